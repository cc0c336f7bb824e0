//! The linear eigenvalue map `μ_i = (Σλ − ρλ_i)/(n − ρ)`, the pulled-back
//! operator `f̃(λ) = f(μ(λ))`, its ellipticity constant θ, and the reduction of
//! conformal parameters `(α, τ)` to `(ρ, γ)` and right-hand-side constants.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::{ConeConstants, ConeSampler, ConeSpec};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::registry::OperatorConfig;
use crate::symfunc::{Hessian, LambdaVec, Operator};

pub(crate) fn mu_from_slice(lambda: &[f64], rho: f64) -> Vec<f64> {
    let n = lambda.len() as f64;
    let s: f64 = lambda.iter().sum();
    lambda.iter().map(|l| (s - rho * l) / (n - rho)).collect()
}

pub(crate) fn lambda_from_slice(mu: &[f64], rho: f64) -> Vec<f64> {
    let n = mu.len() as f64;
    let s: f64 = mu.iter().sum();
    mu.iter().map(|m| (s - (n - rho) * m) / rho).collect()
}

/// A validated transform parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub rho: f64,
    pub n: usize,
}

impl TransformParams {
    /// Accepts `ρ ≠ 0` with `ρ < 1/(1 − κϑ)` for the given cone constants.
    pub fn new(n: usize, rho: f64, constants: &ConeConstants) -> Result<Self> {
        let p = Self::unchecked(n, rho)?;
        let kv = constants.kappa_vartheta();
        if kv < 1.0 && rho >= 1.0 / (1.0 - kv) {
            return Err(Error::Parameter(format!(
                "ρ = {rho} violates ρ < 1/(1 − κϑ) = {} (κ = {}, ϑ = {})",
                1.0 / (1.0 - kv),
                constants.kappa,
                constants.vartheta.value
            )));
        }
        Ok(p)
    }

    /// Only the algebraic requirements `ρ ≠ 0`, `ρ < n`.
    pub fn unchecked(n: usize, rho: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("dimension n = {n} must be >= 2")));
        }
        if !rho.is_finite() || rho == 0.0 || rho >= n as f64 {
            return Err(Error::Parameter(format!(
                "ρ = {rho} must be nonzero and below n = {n}"
            )));
        }
        Ok(Self { rho, n })
    }
}

pub fn mu_from_lambda(lambda: &LambdaVec, p: &TransformParams) -> Result<LambdaVec> {
    check_n(lambda.n(), p)?;
    LambdaVec::new(mu_from_slice(lambda, p.rho))
}

pub fn lambda_from_mu(mu: &LambdaVec, p: &TransformParams) -> Result<LambdaVec> {
    check_n(mu.n(), p)?;
    LambdaVec::new(lambda_from_slice(mu, p.rho))
}

fn check_n(n: usize, p: &TransformParams) -> Result<()> {
    if n != p.n {
        return Err(Error::Domain(format!(
            "transform has n = {}, input has n = {n}",
            p.n
        )));
    }
    Ok(())
}

/// Lower bound θ for `f̃_i / Σ f̃_j`.
pub fn theta_constant(constants: &ConeConstants, p: &TransformParams) -> Result<f64> {
    let n = p.n as f64;
    let rho = p.rho;
    let kv = constants.kappa_vartheta();
    if rho == 0.0 || (kv < 1.0 && rho >= 1.0 / (1.0 - kv)) {
        return Err(Error::Parameter(format!(
            "ρ = {rho} outside the admissible range for κϑ = {kv}"
        )));
    }
    let theta = if rho < 0.0 {
        1.0 / (n - rho)
    } else {
        (1.0 - rho * (1.0 - kv)) / (n - rho)
    };
    if !(theta > 0.0) {
        return Err(Error::Parameter(format!("θ = {theta} is not positive")));
    }
    Ok(theta)
}

/// `f̃(λ) = f(μ(λ))` on the pulled-back cone.
#[derive(Clone, Debug)]
pub struct Transformed {
    base: Arc<dyn Operator>,
    params: TransformParams,
    cone: ConeSpec,
}

impl Transformed {
    pub fn new(base: Arc<dyn Operator>, params: TransformParams) -> Result<Self> {
        if base.dim() != params.n {
            return Err(Error::Domain(format!(
                "base operator has n = {}, transform has n = {}",
                base.dim(),
                params.n
            )));
        }
        let cone = ConeSpec::transformed(base.cone(), params.rho)?;
        Ok(Self { base, params, cone })
    }

    pub fn base(&self) -> &Arc<dyn Operator> {
        &self.base
    }

    pub fn params(&self) -> TransformParams {
        self.params
    }

    fn m_entry(&self, i: usize, j: usize) -> f64 {
        let n = self.params.n as f64;
        let d = if i == j { self.params.rho } else { 0.0 };
        (1.0 - d) / (n - self.params.rho)
    }
}

impl Operator for Transformed {
    fn kind(&self) -> &'static str {
        "transformed"
    }

    fn describe(&self) -> String {
        format!("{} ∘ μ[ρ={}]", self.base.describe(), self.params.rho)
    }

    fn config(&self) -> OperatorConfig {
        OperatorConfig {
            kind: self.kind().to_string(),
            n: Some(self.params.n),
            normalized: self.base.is_normalized(),
            rho: Some(self.params.rho),
            base: Some(Box::new(self.base.config())),
            ..OperatorConfig::default()
        }
    }

    fn dim(&self) -> usize {
        self.params.n
    }

    fn homogeneity(&self) -> f64 {
        self.base.homogeneity()
    }

    fn is_normalized(&self) -> bool {
        self.base.is_normalized()
    }

    fn cone(&self) -> ConeSpec {
        self.cone.clone()
    }

    fn value_grad(&self, lambda: &[f64]) -> Result<(f64, Vec<f64>)> {
        if lambda.len() != self.params.n {
            return Err(Error::Domain(format!(
                "operator has n = {}, input has n = {}",
                self.params.n,
                lambda.len()
            )));
        }
        self.cone.check(lambda)?;
        let (v, g) = self.base.value_grad(&mu_from_slice(lambda, self.params.rho))?;
        let n = self.params.n as f64;
        let rho = self.params.rho;
        let total: f64 = g.iter().sum();
        Ok((v, g.iter().map(|gi| (total - rho * gi) / (n - rho)).collect()))
    }

    fn hessian(&self, lambda: &[f64]) -> Result<Hessian> {
        self.cone.check(lambda)?;
        let inner = self.base.hessian(&mu_from_slice(lambda, self.params.rho))?;
        let n = self.params.n;
        let m: Vec<f64> = (0..n * n).map(|idx| self.m_entry(idx / n, idx % n)).collect();
        Ok(Hessian {
            matrix: inner.matrix.congruence(&m),
            path: inner.path,
        })
    }
}

/// Sampled check of `f̃_i ≥ θ Σ f̃_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullyUniformReport {
    pub operator: String,
    pub theta: f64,
    pub min_ratio: f64,
    pub witness: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub passed: bool,
}

pub fn fully_uniform_check(
    op: &Transformed,
    constants: &ConeConstants,
    samples: usize,
    seed: u64,
) -> Result<FullyUniformReport> {
    if samples == 0 {
        return Err(Error::Sampling("no samples requested".into()));
    }
    let theta = theta_constant(constants, &op.params)?;
    let sampler = ConeSampler::new(op.cone(), seed);
    const CHUNK: usize = 256;
    let chunks: Vec<Result<(f64, usize)>> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut best = (f64::INFINITY, usize::MAX);
            for idx in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let lam = sampler.sample(idx)?;
                let g = op.gradient(&lam)?;
                let total: f64 = g.iter().sum();
                let r = g.iter().fold(f64::INFINITY, |m, gi| m.min(gi / total));
                if r < best.0 {
                    best = (r, idx);
                }
            }
            Ok(best)
        })
        .collect();
    let mut best = (f64::INFINITY, usize::MAX);
    for c in chunks {
        let c = c?;
        if c.0 < best.0 {
            best = c;
        }
    }
    if best.1 == usize::MAX {
        return Err(Error::Sampling("no feasible samples".into()));
    }
    Ok(FullyUniformReport {
        operator: op.describe(),
        theta,
        min_ratio: best.0,
        witness: sampler.sample(best.1)?.into_inner(),
        samples,
        seed,
        passed: best.0 >= theta - 1e-9,
    })
}

/// Derived constants of the conformal reduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalParams {
    pub alpha: f64,
    pub tau: f64,
    pub n: usize,
    pub varsigma: f64,
    pub rho: f64,
    pub gamma: f64,
    pub gamma_plus_rho: f64,
    /// `((n−2)/(α(nτ+2−2n)))^ς`, multiplying `ψe^{2ςu}` in the transformed form.
    pub rhs_const: f64,
    /// `((n−2)/(α(τ−1)))^ς`, the same constant for the untransformed form.
    pub v_rhs_const: f64,
    /// `α(nτ+2−2n)/(2(n−2))`; the boundary rate is `½ log(c/ψ|∂)`.
    pub rate_const: f64,
    /// θ for the transformed operator, when the ellipticity bound holds.
    pub theta: Option<f64>,
    /// Whether `(α, τ)` passed the admissibility condition.
    pub checked: bool,
}

impl ConformalParams {
    /// Applies the conditions `τ < 1` (α = −1) or `τ > 1 + (n−2)(1−κϑ)`
    /// (α = 1), with κ, ϑ of the operator's cone.
    pub fn new(alpha: f64, tau: f64, n: usize, constants: &ConeConstants, varsigma: f64) -> Result<Self> {
        let kv = constants.kappa_vartheta();
        if alpha < 0.0 && !(tau < 1.0) {
            return Err(Error::Parameter(format!(
                "branch α = −1 requires τ < 1, got τ = {tau}"
            )));
        }
        if alpha > 0.0 {
            let bound = 1.0 + (n as f64 - 2.0) * (1.0 - kv);
            if !(tau > bound) {
                return Err(Error::Parameter(format!(
                    "branch α = 1 requires τ > 1 + (n−2)(1−κϑ) = {bound}, got τ = {tau}"
                )));
            }
        }
        let mut p = Self::unchecked(alpha, tau, n, varsigma)?;
        p.theta = Some(theta_constant(constants, &TransformParams::unchecked(n, p.rho)?)?);
        p.checked = true;
        Ok(p)
    }

    /// Formulas only; `α = ±1`, `n ≥ 3`, `τ ≠ 1` and a nonzero `nτ+2−2n`.
    pub fn unchecked(alpha: f64, tau: f64, n: usize, varsigma: f64) -> Result<Self> {
        if alpha != 1.0 && alpha != -1.0 {
            return Err(Error::Parameter(format!("α must be ±1, got {alpha}")));
        }
        if n < 3 {
            return Err(Error::Parameter(format!("conformal reduction needs n >= 3, got {n}")));
        }
        if !(varsigma > 0.0 && varsigma <= 1.0) {
            return Err(Error::Parameter(format!("homogeneity ς = {varsigma} outside (0, 1]")));
        }
        let nf = n as f64;
        if !tau.is_finite() || tau == 1.0 {
            return Err(Error::Parameter(format!("τ = {tau} must be finite and differ from 1")));
        }
        let lead = alpha * (nf * tau + 2.0 - 2.0 * nf);
        if !(lead > 0.0) {
            return Err(Error::Parameter(format!(
                "α(nτ+2−2n) = {lead} must be positive"
            )));
        }
        let rho = (nf - 2.0) / (tau - 1.0);
        let gamma = (tau - 2.0) * (nf - 2.0) / (2.0 * (tau - 1.0));
        Ok(Self {
            alpha,
            tau,
            n,
            varsigma,
            rho,
            gamma,
            gamma_plus_rho: gamma + rho,
            rhs_const: ((nf - 2.0) / lead).powf(varsigma),
            v_rhs_const: ((nf - 2.0) / (alpha * (tau - 1.0))).powf(varsigma),
            rate_const: lead / (2.0 * (nf - 2.0)),
            theta: None,
            checked: false,
        })
    }

    pub fn transform(&self) -> Result<TransformParams> {
        TransformParams::unchecked(self.n, self.rho)
    }

    /// `½ log(c/ψ)` for boundary value `ψ` of the right-hand side.
    pub fn boundary_rate(&self, psi_boundary: f64) -> f64 {
        0.5 * (self.rate_const / psi_boundary).ln()
    }
}

/// Convenience wrapper mirroring the parameter order used on the command line.
pub fn conformal_params(
    alpha: f64,
    tau: f64,
    n: usize,
    constants: &ConeConstants,
    varsigma: f64,
) -> Result<ConformalParams> {
    ConformalParams::new(alpha, tau, n, constants, varsigma)
}

/// Applies `μ(·)` to a symmetric matrix: `(tr U) I − ρU` divided by `n − ρ`.
pub fn mu_matrix(u: &SymMatrix, rho: f64) -> SymMatrix {
    let n = u.n();
    let tr: f64 = (0..n).map(|i| u.get(i, i)).sum();
    SymMatrix::from_fn(n, |i, j| {
        ((if i == j { tr } else { 0.0 }) - rho * u.get(i, j)) / (n as f64 - rho)
    })
}

/// Inverse of [`mu_matrix`].
pub fn lambda_matrix(m: &SymMatrix, rho: f64) -> SymMatrix {
    let n = m.n();
    let tr: f64 = (0..n).map(|i| m.get(i, i)).sum();
    SymMatrix::from_fn(n, |i, j| {
        ((if i == j { tr } else { 0.0 }) - (n as f64 - rho) * m.get(i, j)) / rho
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::{vartheta, ConeConstants};
    use crate::symfunc::{gradient_fd, SigmaQuotient};
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LambdaVec {
        LambdaVec::new(v.to_vec()).unwrap()
    }

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs()))
    }

    #[test]
    fn mu_examples() {
        let p = TransformParams::unchecked(3, 1.0).unwrap();
        assert!(approx(&mu_from_lambda(&lv(&[1.0; 3]), &p).unwrap(), &[1.0; 3], 1e-15));
        assert!(approx(
            &mu_from_lambda(&lv(&[0.0, 0.0, 1.0]), &p).unwrap(),
            &[0.5, 0.5, 0.0],
            1e-15
        ));
        let p = TransformParams::unchecked(3, -1.0).unwrap();
        assert!(approx(
            &mu_from_lambda(&lv(&[1.0, 2.0, 3.0]), &p).unwrap(),
            &[1.75, 2.0, 2.25],
            1e-15
        ));
    }

    #[test]
    fn lambda_examples() {
        let p = TransformParams::unchecked(3, 1.0).unwrap();
        assert!(approx(&lambda_from_mu(&lv(&[1.0; 3]), &p).unwrap(), &[1.0; 3], 1e-15));
        assert!(approx(
            &lambda_from_mu(&lv(&[0.5, 0.5, 0.0]), &p).unwrap(),
            &[0.0, 0.0, 1.0],
            1e-15
        ));
    }

    #[test]
    fn theta_examples() {
        let g = ConeConstants::with_values(3, 2, 1.0 / 3.0);
        let p = TransformParams::unchecked(3, -1.0).unwrap();
        assert_eq!(theta_constant(&g, &p).unwrap(), 0.25);
        let p = TransformParams::unchecked(3, 1.0).unwrap();
        assert!((theta_constant(&g, &p).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let pos = ConeConstants::with_values(3, 0, 1.0 / 3.0);
        let p = TransformParams::unchecked(3, 0.5).unwrap();
        assert!((theta_constant(&pos, &p).unwrap() - 0.2).abs() < 1e-15);
        let p = TransformParams::unchecked(3, 1.0).unwrap();
        assert!(matches!(theta_constant(&pos, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn conformal_examples() {
        let g1 = ConeConstants::compute(&ConeSpec::garding(3, 1).unwrap(), 8, 1).unwrap();
        let c = conformal_params(1.0, 3.0, 3, &g1, 1.0).unwrap();
        assert_eq!((c.rho, c.gamma, c.gamma_plus_rho), (0.5, 0.25, 0.75));
        assert!((c.rhs_const - 0.2).abs() < 1e-15);
        let c = conformal_params(1.0, 3.0, 3, &g1, 0.5).unwrap();
        assert!((c.rhs_const - 0.2f64.sqrt()).abs() < 1e-15);

        let c = conformal_params(-1.0, 0.0, 3, &g1, 1.0).unwrap();
        assert_eq!((c.rho, c.gamma), (-1.0, 1.0));
        assert!((c.rhs_const - 0.25).abs() < 1e-15);

        let pos = ConeConstants::compute(&ConeSpec::positive(3).unwrap(), 8, 1).unwrap();
        match conformal_params(1.0, 2.0, 3, &pos, 1.0) {
            Err(Error::Parameter(m)) => assert!(m.contains("α = 1")),
            other => panic!("{other:?}"),
        }
        match conformal_params(-1.0, 2.0, 3, &pos, 1.0) {
            Err(Error::Parameter(m)) => assert!(m.contains("α = −1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transformed_operator_gradient_chain_rule() {
        let base: Arc<dyn Operator> = Arc::new(SigmaQuotient::sigma_root(3, 2).unwrap());
        let p = TransformParams::unchecked(3, -1.0).unwrap();
        let op = Transformed::new(base.clone(), p).unwrap();
        let lam = [0.3, 1.1, 2.0];
        let g = op.gradient(&lam).unwrap();
        let fd = gradient_fd(&op, &lam, 1e-6).unwrap();
        let mu = mu_from_slice(&lam, -1.0);
        let gb = base.gradient(&mu).unwrap();
        let total: f64 = gb.iter().sum();
        for i in 0..3 {
            let chain = (total + gb[i]) / 4.0;
            assert!((g[i] - chain).abs() < 1e-15);
            assert!((g[i] - fd[i]).abs() < 1e-6 * g[i].abs());
        }
    }

    #[test]
    fn fully_uniform_at_ones_is_one_over_n() {
        let base: Arc<dyn Operator> = Arc::new(SigmaQuotient::sigma_root(3, 2).unwrap());
        let op = Transformed::new(base, TransformParams::unchecked(3, -1.0).unwrap()).unwrap();
        let g = op.gradient(&[1.0; 3]).unwrap();
        let total: f64 = g.iter().sum();
        for gi in g {
            assert!((gi / total - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_uniform_check_case_one() {
        let cone = ConeSpec::garding(3, 2).unwrap();
        let constants = ConeConstants::compute(&cone, 4, 1).unwrap();
        let base: Arc<dyn Operator> = Arc::new(SigmaQuotient::sigma_root(3, 2).unwrap());
        let op = Transformed::new(base, TransformParams::unchecked(3, -1.0).unwrap()).unwrap();
        let r = fully_uniform_check(&op, &constants, 3000, 9).unwrap();
        assert_eq!(r.theta, 0.25);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn fully_uniform_check_sigma_one_positive_rho() {
        let cone = ConeSpec::garding(3, 1).unwrap();
        let constants = ConeConstants::compute(&cone, 8, 1).unwrap();
        let base: Arc<dyn Operator> = Arc::new(SigmaQuotient::sigma(3, 1).unwrap());
        let op = Transformed::new(base, TransformParams::new(3, 1.0, &constants).unwrap()).unwrap();
        let r = fully_uniform_check(&op, &constants, 1000, 2).unwrap();
        assert!(r.passed && r.min_ratio >= r.theta - 1e-9);
    }

    #[test]
    fn transform_params_bound() {
        let cone = ConeSpec::garding(3, 2).unwrap();
        let v = vartheta(&cone, 4, 1).unwrap();
        let c = ConeConstants {
            kappa: 1,
            vartheta: v,
            is_type2: false,
        };
        assert!(TransformParams::new(3, 1.05, &c).is_ok());
        assert!(TransformParams::new(3, 1.2, &c).is_err());
        assert!(TransformParams::new(3, 0.0, &c).is_err());
    }

    #[test]
    fn corner_vector_lies_in_cone() {
        // (1,…,1,1−ρ) sits inside Γ for admissible ρ.
        for n in 3..6 {
            for k in 1..=n {
                let cone = ConeSpec::garding(n, k).unwrap();
                let c = ConeConstants::compute(&cone, 6, 3).unwrap();
                for rho in [-2.0, -0.5, 0.3, 0.9] {
                    if TransformParams::new(n, rho, &c).is_ok() {
                        let mut v = vec![1.0; n];
                        v[n - 1] = 1.0 - rho;
                        assert!(cone.contains(&v), "n={n} k={k} rho={rho}");
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_and_trace(v in prop::collection::vec(-5.0f64..5.0, 3..7), rho in -3.0f64..2.5) {
            prop_assume!(rho.abs() > 1e-2);
            let p = TransformParams::unchecked(v.len(), rho).unwrap();
            let lam = lv(&v);
            let mu = mu_from_lambda(&lam, &p).unwrap();
            let back = lambda_from_mu(&mu, &p).unwrap();
            let scale = 1.0 + lam.max_abs() / rho.abs().min(1.0);
            for i in 0..v.len() {
                prop_assert!((back[i] - v[i]).abs() <= 1e-14 * scale * v.len() as f64);
            }
            let s1: f64 = v.iter().sum();
            let s2: f64 = mu.iter().sum();
            prop_assert!((s1 - s2).abs() <= 1e-14 * (1.0 + v.iter().map(|x| x.abs()).sum::<f64>()));
        }

        #[test]
        fn positive_vectors_lie_in_transformed_cone(v in prop::collection::vec(1e-6f64..10.0, 3..6), k in 1usize..6) {
            let n = v.len();
            let k = k.min(n);
            let base = ConeSpec::garding(n, k).unwrap();
            for rho in [-1.0, 0.5] {
                let t = ConeSpec::transformed(base.clone(), rho).unwrap();
                prop_assert!(t.contains(&v));
            }
        }
    }
}
