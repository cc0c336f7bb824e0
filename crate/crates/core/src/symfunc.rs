//! Elementary symmetric functions and the operator family built on them.
//!
//! An [`Operator`] is a symmetric function `f` on an open cone, evaluated on
//! eigenvalue vectors together with its gradient and Hessian. Concrete kinds:
//! powers of quotients `(σ_k/σ_l)^p` ([`SigmaQuotient`]), their composition
//! with `λ ↦ (Σλ)1 − λ` ([`PComposed`]), and the linear pull-back
//! [`crate::transform::Transformed`].

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::cone::ConeSpec;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::registry::OperatorConfig;

/// An eigenvalue vector. Values are kept in the caller's order; operations
/// that need ascending order work on [`LambdaVec::sorted`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LambdaVec(Vec<f64>);

impl LambdaVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(format!(
                "eigenvalue vectors need n >= 2, got n = {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.0)
    }

    /// Ascending copy plus the permutation: `perm[i]` is the original index
    /// of the `i`-th smallest entry. Ties keep their original order.
    pub fn sorted(&self) -> (LambdaVec, Vec<usize>) {
        let mut perm: Vec<usize> = (0..self.0.len()).collect();
        perm.sort_by(|&a, &b| self.0[a].total_cmp(&self.0[b]));
        let values = perm.iter().map(|&i| self.0[i]).collect();
        (LambdaVec(values), perm)
    }
}

impl Deref for LambdaVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for LambdaVec {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LambdaVec> for Vec<f64> {
    fn from(v: LambdaVec) -> Self {
        v.0
    }
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// All of `σ_0, …, σ_n` as coefficients of `Π (1 + λ_i t)`.
pub fn elementary_symmetric(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut c = vec![0.0; n + 1];
    c[0] = 1.0;
    for (m, &x) in values.iter().enumerate() {
        for j in (1..=m + 1).rev() {
            c[j] += x * c[j - 1];
        }
    }
    c
}

/// `σ_j` of `values` with the entries at `skip` removed; zero if `j` exceeds
/// the remaining length.
pub(crate) fn sigma_without(values: &[f64], skip: &[usize], j: usize) -> f64 {
    let rest: Vec<f64> = values
        .iter()
        .enumerate()
        .filter(|(i, _)| !skip.contains(i))
        .map(|(_, &v)| v)
        .collect();
    if j > rest.len() {
        return 0.0;
    }
    elementary_symmetric(&rest)[j]
}

fn check_order(n: usize, k: usize, min: usize) -> Result<()> {
    if k < min || k > n {
        return Err(Error::Domain(format!("order k = {k} outside {min}..={n}")));
    }
    Ok(())
}

pub fn sigma(lambda: &[f64], k: usize) -> Result<f64> {
    check_order(lambda.len(), k, 0)?;
    Ok(elementary_symmetric(lambda)[k])
}

/// `∂σ_k/∂λ_i = σ_{k−1}(λ | i)`.
pub fn sigma_grad(lambda: &[f64], k: usize) -> Result<Vec<f64>> {
    check_order(lambda.len(), k, 1)?;
    Ok((0..lambda.len())
        .map(|i| sigma_without(lambda, &[i], k - 1))
        .collect())
}

/// `∂²σ_k/∂λ_i∂λ_j = σ_{k−2}(λ | i, j)` off the diagonal, zero on it.
pub fn sigma_hessian(lambda: &[f64], k: usize) -> Result<SymMatrix> {
    check_order(lambda.len(), k, 0)?;
    let n = lambda.len();
    let mut h = SymMatrix::zeros(n);
    if k >= 2 {
        for i in 0..n {
            for j in i + 1..n {
                h.set(i, j, sigma_without(lambda, &[i, j], k - 2));
            }
        }
    }
    Ok(h)
}

/// Exact binomial coefficient.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// Which code path produced a Hessian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianPath {
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Debug)]
pub struct Hessian {
    pub matrix: SymMatrix,
    pub path: HessianPath,
}

/// A symmetric function on an open symmetric cone.
pub trait Operator: Send + Sync + fmt::Debug {
    /// Registry name of the kind.
    fn kind(&self) -> &'static str;

    /// Short human-readable formula, e.g. `(σ2/σ0)^0.5`.
    fn describe(&self) -> String;

    /// Configuration that rebuilds this operator through the registry.
    fn config(&self) -> OperatorConfig;

    fn dim(&self) -> usize;

    /// Degree ς with `f(tλ) = t^ς f(λ)`.
    fn homogeneity(&self) -> f64;

    fn is_normalized(&self) -> bool;

    /// The cone on which `f` is defined and positive.
    fn cone(&self) -> ConeSpec;

    /// `f` and its gradient; fails outside the cone.
    fn value_grad(&self, lambda: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, lambda: &[f64]) -> Result<f64> {
        Ok(self.value_grad(lambda)?.0)
    }

    fn gradient(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_grad(lambda)?.1)
    }

    /// Second derivatives. The default is central differences of the
    /// gradient; kinds with a closed form override it.
    fn hessian(&self, lambda: &[f64]) -> Result<Hessian> {
        hessian_fd(self, lambda)
    }
}

/// Step used for finite-difference Hessians: `1e−5·max(1, |λ|∞)`.
pub fn fd_step(lambda: &[f64]) -> f64 {
    1e-5 * max_abs(lambda).max(1.0)
}

/// Central differences of the analytic gradient.
pub fn hessian_fd<O: Operator + ?Sized>(op: &O, lambda: &[f64]) -> Result<Hessian> {
    let n = lambda.len();
    op.cone().check(lambda)?;
    let h = fd_step(lambda);
    let mut cols = Vec::with_capacity(n);
    let mut x = lambda.to_vec();
    for j in 0..n {
        x[j] = lambda[j] + h;
        let gp = op.gradient(&x)?;
        x[j] = lambda[j] - h;
        let gm = op.gradient(&x)?;
        x[j] = lambda[j];
        cols.push(
            gp.iter()
                .zip(&gm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    Ok(Hessian {
        matrix: SymMatrix::from_fn(n, |i, j| cols[j][i]),
        path: HessianPath::FiniteDifference,
    })
}

/// Central-difference gradient of the value; a test oracle.
pub fn gradient_fd<O: Operator + ?Sized>(op: &O, lambda: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = lambda.to_vec();
    let mut g = Vec::with_capacity(lambda.len());
    for j in 0..lambda.len() {
        x[j] = lambda[j] + h;
        let fp = op.value(&x)?;
        x[j] = lambda[j] - h;
        let fm = op.value(&x)?;
        x[j] = lambda[j];
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// `(σ_k/σ_l)^p`, optionally divided by its value at `1`.
#[derive(Clone, Debug)]
pub struct SigmaQuotient {
    n: usize,
    k: usize,
    l: usize,
    exponent: f64,
    normalized: bool,
    scale: f64,
    cone: ConeSpec,
}

impl SigmaQuotient {
    pub fn new(n: usize, k: usize, l: usize, exponent: f64, normalized: bool) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("dimension n = {n} must be >= 2")));
        }
        if !(l < k && k <= n) {
            return Err(Error::Domain(format!(
                "need 0 <= l < k <= n, got k = {k}, l = {l}, n = {n}"
            )));
        }
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(Error::Parameter(format!("exponent {exponent} must be positive")));
        }
        let scale = if normalized {
            (binomial(n, k) as f64 / binomial(n, l) as f64).powf(exponent)
        } else {
            1.0
        };
        Ok(Self {
            n,
            k,
            l,
            exponent,
            normalized,
            scale,
            cone: ConeSpec::garding(n, k)?,
        })
    }

    /// `σ_k`, unnormalized.
    pub fn sigma(n: usize, k: usize) -> Result<Self> {
        Self::new(n, k, 0, 1.0, false)
    }

    /// `(σ_k/C(n,k))^{1/k}`.
    pub fn sigma_root(n: usize, k: usize) -> Result<Self> {
        Self::new(n, k, 0, 1.0 / k as f64, true)
    }

    /// `(σ_k/σ_l)^{1/(k−l)}`, normalized.
    pub fn ratio_root(n: usize, k: usize, l: usize) -> Result<Self> {
        Self::new(n, k, l, 1.0 / (k.saturating_sub(l)).max(1) as f64, true)
    }

    pub fn with_cone_margin(mut self, margin: f64) -> Self {
        self.cone.margin = margin;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    fn check_dim(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.n {
            return Err(Error::Domain(format!(
                "operator has n = {}, input has n = {}",
                self.n,
                lambda.len()
            )));
        }
        Ok(())
    }

    /// Quotient `R = σ_k/σ_l` and its gradient.
    fn quotient_grad(&self, lambda: &[f64]) -> (f64, Vec<f64>, f64, f64, Vec<f64>, Vec<f64>) {
        let s = elementary_symmetric(lambda);
        let (sk, sl) = (s[self.k], s[self.l]);
        let gk: Vec<f64> = (0..self.n)
            .map(|i| sigma_without(lambda, &[i], self.k - 1))
            .collect();
        let gl: Vec<f64> = if self.l == 0 {
            vec![0.0; self.n]
        } else {
            (0..self.n)
                .map(|i| sigma_without(lambda, &[i], self.l - 1))
                .collect()
        };
        let r = sk / sl;
        let rg = gk
            .iter()
            .zip(&gl)
            .map(|(a, b)| a / sl - sk * b / (sl * sl))
            .collect();
        (r, rg, sk, sl, gk, gl)
    }
}

impl Operator for SigmaQuotient {
    fn kind(&self) -> &'static str {
        if self.l == 0 {
            "sigma"
        } else {
            "sigma-ratio"
        }
    }

    fn describe(&self) -> String {
        let base = if self.l == 0 {
            format!("σ{}", self.k)
        } else {
            format!("σ{}/σ{}", self.k, self.l)
        };
        let powered = if self.exponent == 1.0 {
            base
        } else {
            format!("({base})^{}", self.exponent)
        };
        if self.normalized {
            format!("{powered} normalized")
        } else {
            powered
        }
    }

    fn config(&self) -> OperatorConfig {
        OperatorConfig {
            kind: self.kind().to_string(),
            n: Some(self.n),
            k: Some(self.k),
            l: (self.l != 0).then_some(self.l),
            exponent: Some(self.exponent),
            normalized: self.normalized,
            ..OperatorConfig::default()
        }
    }

    fn dim(&self) -> usize {
        self.n
    }

    fn homogeneity(&self) -> f64 {
        self.exponent * (self.k - self.l) as f64
    }

    fn is_normalized(&self) -> bool {
        self.normalized
    }

    fn cone(&self) -> ConeSpec {
        self.cone.clone()
    }

    fn value_grad(&self, lambda: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(lambda)?;
        self.cone.check(lambda)?;
        let (r, rg, ..) = self.quotient_grad(lambda);
        let p = self.exponent;
        let value = r.powf(p) / self.scale;
        let outer = p * r.powf(p - 1.0) / self.scale;
        Ok((value, rg.iter().map(|g| outer * g).collect()))
    }

    fn hessian(&self, lambda: &[f64]) -> Result<Hessian> {
        self.check_dim(lambda)?;
        self.cone.check(lambda)?;
        let n = self.n;
        let (r, rg, sk, sl, gk, gl) = self.quotient_grad(lambda);
        let hk = sigma_hessian(lambda, self.k)?;
        let hl = sigma_hessian(lambda, self.l)?;
        let (sl2, sl3) = (sl * sl, sl * sl * sl);
        let p = self.exponent;
        let first = p * r.powf(p - 1.0) / self.scale;
        let second = if p == 1.0 {
            0.0
        } else {
            p * (p - 1.0) * r.powf(p - 2.0) / self.scale
        };
        let matrix = SymMatrix::from_fn(n, |i, j| {
            let rij = hk.get(i, j) / sl - (gk[i] * gl[j] + gk[j] * gl[i]) / sl2
                - sk * hl.get(i, j) / sl2
                + 2.0 * sk * gl[i] * gl[j] / sl3;
            first * rij + second * rg[i] * rg[j]
        });
        Ok(Hessian {
            matrix,
            path: HessianPath::Analytic,
        })
    }
}

/// `f(Pλ)` with `Pλ = (Σλ)1 − λ`, optionally normalized at `1`.
#[derive(Clone, Debug)]
pub struct PComposed {
    base: SigmaQuotient,
    normalized: bool,
    scale: f64,
    cone: ConeSpec,
}

impl PComposed {
    pub fn new(base: SigmaQuotient, normalized: bool) -> Result<Self> {
        let n = base.n;
        let scale = if normalized {
            base.value(&vec![(n - 1) as f64; n])?
        } else {
            1.0
        };
        let cone = ConeSpec::p_cone(n, base.k)?.with_margin(base.cone.margin);
        Ok(Self {
            base,
            normalized,
            scale,
            cone,
        })
    }

    pub fn base(&self) -> &SigmaQuotient {
        &self.base
    }
}

/// `(Σλ)1 − λ`.
/// `Σ_{j≠i} λ_j` for each `i`, summed directly so no entry is lost to
/// cancellation against a dominant one. The map is self-adjoint.
pub fn p_map(lambda: &[f64]) -> Vec<f64> {
    (0..lambda.len())
        .map(|i| lambda.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| x).sum())
        .collect()
}

impl Operator for PComposed {
    fn kind(&self) -> &'static str {
        "p-composed"
    }

    fn describe(&self) -> String {
        format!("{} ∘ P", self.base.describe())
    }

    fn config(&self) -> OperatorConfig {
        OperatorConfig {
            kind: self.kind().to_string(),
            n: Some(self.base.n),
            normalized: self.normalized,
            base: Some(Box::new(self.base.config())),
            ..OperatorConfig::default()
        }
    }

    fn dim(&self) -> usize {
        self.base.n
    }

    fn homogeneity(&self) -> f64 {
        self.base.homogeneity()
    }

    fn is_normalized(&self) -> bool {
        self.normalized
    }

    fn cone(&self) -> ConeSpec {
        self.cone.clone()
    }

    fn value_grad(&self, lambda: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.base.check_dim(lambda)?;
        self.cone.check(lambda)?;
        let (v, g) = self.base.value_grad(&p_map(lambda))?;
        Ok((v / self.scale, p_map(&g).iter().map(|gi| gi / self.scale).collect()))
    }

    fn hessian(&self, lambda: &[f64]) -> Result<Hessian> {
        self.base.check_dim(lambda)?;
        self.cone.check(lambda)?;
        let h = self.base.hessian(&p_map(lambda))?.matrix;
        let n = self.base.n;
        let p: Vec<f64> = (0..n * n)
            .map(|idx| if idx / n == idx % n { 0.0 } else { 1.0 })
            .collect();
        Ok(Hessian {
            matrix: h.congruence(&p).scale(1.0 / self.scale),
            path: HessianPath::Analytic,
        })
    }
}

/// `(σ_k/C(n,k))^{1/k} ≤ (σ_l/C(n,l))^{1/l}` for `λ ∈ Γ_k`, `1 ≤ l < k`.
pub fn maclaurin_check(lambda: &[f64], k: usize, l: usize) -> Result<bool> {
    let n = lambda.len();
    if !(1 <= l && l < k && k <= n) {
        return Err(Error::Domain(format!(
            "need 1 <= l < k <= n, got k = {k}, l = {l}, n = {n}"
        )));
    }
    ConeSpec::garding(n, k)?.check(lambda)?;
    let s = elementary_symmetric(lambda);
    let lhs = (s[k] / binomial(n, k) as f64).powf(1.0 / k as f64);
    let rhs = (s[l] / binomial(n, l) as f64).powf(1.0 / l as f64);
    Ok(lhs <= rhs * (1.0 + 1e-12))
}

/// `Σλ_i ≥ n·f(λ)` for a normalized operator of degree one.
pub fn trace_lower_bound_check(op: &dyn Operator, lambda: &[f64]) -> Result<bool> {
    if (op.homogeneity() - 1.0).abs() > 1e-12 || !op.is_normalized() {
        return Err(Error::Parameter(format!(
            "trace bound needs a normalized degree-one operator, got {}",
            op.describe()
        )));
    }
    let f = op.value(lambda)?;
    let trace: f64 = lambda.iter().sum();
    Ok(trace >= lambda.len() as f64 * f - 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::ConeSampler;
    use proptest::prelude::*;

    /// Sum over all index subsets of size k; exponential, small n only.
    fn sigma_subsets(lambda: &[f64], k: usize) -> f64 {
        let n = lambda.len();
        (0u32..(1 << n))
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| {
                (0..n)
                    .filter(|i| m & (1 << i) != 0)
                    .map(|i| lambda[i])
                    .product::<f64>()
            })
            .sum()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma(&[1.0, 1.0, 1.0], 2).unwrap(), 3.0);
        assert_eq!(sigma(&[4.0, -2.0, 7.0], 0).unwrap(), 1.0);
        assert_eq!(sigma(&[1.0, 2.0, 3.0], 3).unwrap(), sigma_subsets(&[1.0, 2.0, 3.0], 3));
        assert_eq!(sigma(&[1.0, 2.0, 3.0], 3).unwrap(), 6.0);
        assert!(matches!(sigma(&[1.0, 2.0], 3), Err(Error::Domain(_))));
    }

    #[test]
    fn sigma_grad_examples() {
        assert_eq!(sigma_grad(&[1.0, 1.0, 1.0], 2).unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(sigma_grad(&[1.0, 2.0, 3.0], 1).unwrap(), vec![1.0, 1.0, 1.0]);
        let lam = [1.0, 2.0, 3.0];
        let brute: Vec<f64> = (0..3)
            .map(|i| {
                let rest: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| lam[j]).collect();
                sigma_subsets(&rest, 2)
            })
            .collect();
        assert_eq!(sigma_grad(&lam, 3).unwrap(), brute);
        assert_eq!(brute, vec![6.0, 3.0, 2.0]);
        assert!(sigma_grad(&lam, 0).is_err());
    }

    #[test]
    fn binomial_exact() {
        assert_eq!(binomial(8, 4), 70);
        assert_eq!(binomial(3, 0), 1);
        assert_eq!(binomial(3, 4), 0);
    }

    #[test]
    fn value_examples() {
        let ones = [1.0; 3];
        let s2 = SigmaQuotient::new(3, 2, 0, 1.0, true).unwrap();
        assert!(close(s2.value(&ones).unwrap(), 1.0, 1e-15));
        let ratio = SigmaQuotient::new(3, 2, 1, 1.0, false).unwrap();
        let oracle = sigma_subsets(&ones, 2) / sigma_subsets(&ones, 1);
        assert!(close(ratio.value(&ones).unwrap(), oracle, 1e-15));
        assert!(close(oracle, 1.0, 1e-15));
        let s1 = SigmaQuotient::sigma(3, 1).unwrap();
        assert_eq!(s1.value(&[2.0, 0.0, -1.0]).unwrap(), 1.0);
    }

    #[test]
    fn infeasible_input_names_inequality() {
        let s2 = SigmaQuotient::sigma(3, 2).unwrap();
        match s2.value(&[0.0, 0.0, 1.0]) {
            Err(Error::Feasibility { inequality, .. }) => assert!(inequality.contains("σ2")),
            other => panic!("expected feasibility error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_examples() {
        let s1 = SigmaQuotient::sigma(3, 1).unwrap();
        assert_eq!(s1.gradient(&[5.0, -1.0, 0.5]).unwrap(), vec![1.0; 3]);

        let root = SigmaQuotient::sigma_root(3, 2).unwrap();
        let g = root.gradient(&[1.0; 3]).unwrap();
        let fd = gradient_fd(&root, &[1.0; 3], 1e-6).unwrap();
        for i in 0..3 {
            assert!(close(g[i], 1.0 / 3.0, 1e-14));
            assert!(close(fd[i], 1.0 / 3.0, 1e-8));
        }

        let ratio = SigmaQuotient::new(3, 2, 1, 1.0, false).unwrap();
        let lam = [1.0, 2.0, 3.0];
        let g = ratio.gradient(&lam).unwrap();
        let fd = gradient_fd(&ratio, &lam, 1e-6).unwrap();
        for i in 0..3 {
            assert!((g[i] - fd[i]).abs() <= 1e-8 * g[i].abs());
        }
    }

    #[test]
    fn hessian_examples() {
        let s1 = SigmaQuotient::sigma(3, 1).unwrap();
        let h = s1.hessian(&[0.3, 0.2, 0.9]).unwrap();
        assert_eq!(h.path, HessianPath::Analytic);
        assert!(h.matrix.max_abs() == 0.0);

        let s2 = SigmaQuotient::sigma(3, 2).unwrap();
        let h = s2.hessian(&[0.5, 1.5, 2.0]).unwrap().matrix;
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(h.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }

        let root = SigmaQuotient::new(3, 2, 0, 0.5, false).unwrap();
        let h = root.hessian(&[1.0; 3]).unwrap().matrix;
        let top = crate::linalg::jacobi_eigen(&h).values[2];
        assert!(top <= 1e-10);
    }

    #[test]
    fn fd_hessian_records_path() {
        let op = SigmaQuotient::ratio_root(4, 3, 1).unwrap();
        let lam = [0.4, 1.0, 1.7, 2.2];
        let fd = hessian_fd(&op, &lam).unwrap();
        let an = op.hessian(&lam).unwrap();
        assert_eq!(fd.path, HessianPath::FiniteDifference);
        for i in 0..4 {
            for j in 0..4 {
                assert!((fd.matrix.get(i, j) - an.matrix.get(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn p_composed_matches_definition() {
        let base = SigmaQuotient::sigma_root(3, 2).unwrap();
        let op = PComposed::new(base.clone(), true).unwrap();
        assert!(close(op.value(&[1.0; 3]).unwrap(), 1.0, 1e-14));
        let lam = [-0.2, 0.7, 1.3];
        let direct = base.value(&p_map(&lam)).unwrap() / base.value(&[2.0; 3]).unwrap();
        assert!(close(op.value(&lam).unwrap(), direct, 1e-14));
        let g = op.gradient(&lam).unwrap();
        let fd = gradient_fd(&op, &lam, 1e-6).unwrap();
        for i in 0..3 {
            assert!((g[i] - fd[i]).abs() < 1e-8);
        }
        let h = op.hessian(&lam).unwrap();
        let hf = hessian_fd(&op, &lam).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.matrix.get(i, j) - hf.matrix.get(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn maclaurin_examples() {
        assert!(maclaurin_check(&[1.0; 3], 3, 1).unwrap());
        assert!(maclaurin_check(&[1.0; 3], 2, 1).unwrap());
        assert!(maclaurin_check(&[1.0, 2.0, 3.0], 2, 1).unwrap());
        let lam = [3.0, 1.0, -0.5];
        assert!(sigma(&lam, 2).unwrap() > 0.0);
        assert!(maclaurin_check(&lam, 2, 1).unwrap());
        assert!(matches!(
            maclaurin_check(&[3.0, -2.0, -2.0], 2, 1),
            Err(Error::Feasibility { .. })
        ));
    }

    #[test]
    fn trace_bound_examples() {
        let root = SigmaQuotient::sigma_root(3, 2).unwrap();
        assert!(trace_lower_bound_check(&root, &[1.0; 3]).unwrap());
        assert!(trace_lower_bound_check(&root, &[1.0, 2.0, 3.0]).unwrap());
        let mean = SigmaQuotient::new(3, 1, 0, 1.0, true).unwrap();
        assert!(trace_lower_bound_check(&mean, &[0.0, 0.0, 3.0]).unwrap());
        let raw = SigmaQuotient::sigma(3, 2).unwrap();
        assert!(matches!(
            trace_lower_bound_check(&raw, &[1.0; 3]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn sorted_records_permutation() {
        let lam = LambdaVec::new(vec![3.0, 1.0, 3.0, 2.0]).unwrap();
        let (s, perm) = lam.sorted();
        assert_eq!(&*s, &[1.0, 2.0, 3.0, 3.0]);
        assert_eq!(perm, vec![1, 3, 0, 2]);
        assert!(LambdaVec::new(vec![1.0]).is_err());
    }

    fn ops_for(n: usize) -> Vec<Box<dyn Operator>> {
        let mut ops: Vec<Box<dyn Operator>> = Vec::new();
        for k in 1..=n {
            ops.push(Box::new(SigmaQuotient::sigma_root(n, k).unwrap()));
            for l in 1..k {
                ops.push(Box::new(SigmaQuotient::ratio_root(n, k, l).unwrap()));
            }
        }
        ops
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn recurrence_matches_subset_sum(v in prop::collection::vec(-3.0f64..3.0, 2..8)) {
            let s = elementary_symmetric(&v);
            for k in 0..=v.len() {
                let b = sigma_subsets(&v, k);
                prop_assert!((s[k] - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn euler_identity_and_schur_order(n in 3usize..6, seed in 0u64..1000) {
            let sampler = ConeSampler::new(ConeSpec::garding(n, n).unwrap(), seed);
            for op in ops_for(n) {
                let sampler = sampler.for_cone(op.cone());
                for idx in 0..8 {
                    let lam = sampler.sample(idx).unwrap();
                    let (f, g) = op.value_grad(&lam).unwrap();
                    let euler: f64 = g.iter().zip(lam.iter()).map(|(a, b)| a * b).sum();
                    prop_assert!((euler - op.homogeneity() * f).abs() <= 1e-10 * f.abs().max(1e-300) + 1e-12 * g.iter().zip(lam.iter()).map(|(a, b)| (a * b).abs()).sum::<f64>());
                    let (sorted, _) = LambdaVec::new(lam.to_vec()).unwrap().sorted();
                    let gs = op.gradient(&sorted).unwrap();
                    for w in gs.windows(2) {
                        prop_assert!(w[0] >= w[1] * (1.0 - 1e-9));
                    }
                }
            }
        }
    }
}
