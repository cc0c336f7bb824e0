//! Conformal-geometry kernels on domains of ℝⁿ with conformally flat metrics.
//!
//! All tensors are in Cartesian coordinates. For a base metric `g = e^{2w}δ`
//! covariant derivatives are expressed through the flat ones and `Dw`.

use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::ConeSpec;
use crate::error::{Error, Result};
use crate::linalg::{generalized_eigen, SymMatrix};
use crate::symfunc::LambdaVec;
use crate::transform::ConformalParams;

// ---------------------------------------------------------------------------
// Domains

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hole {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainSpec {
    /// `|x| < radius`.
    Ball { radius: f64 },
    /// `inner < |x| < outer`.
    Annulus { inner: f64, outer: f64 },
    /// `(−h, h)ⁿ` minus closed balls.
    BoxMinusBalls { half_width: f64, holes: Vec<Hole> },
    /// `|x| < radius` minus closed balls.
    BallMinusBalls { radius: f64, holes: Vec<Hole> },
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl DomainSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        let pos = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Domain(format!("{what} must be positive, got {v}")))
            }
        };
        match self {
            DomainSpec::Ball { radius } => pos(*radius, "radius"),
            DomainSpec::Annulus { inner, outer } => {
                pos(*inner, "inner radius")?;
                if !(outer > inner) {
                    return Err(Error::Domain(format!(
                        "annulus needs inner < outer, got {inner} and {outer}"
                    )));
                }
                Ok(())
            }
            DomainSpec::BoxMinusBalls { half_width, holes }
            | DomainSpec::BallMinusBalls {
                radius: half_width,
                holes,
            } => {
                pos(*half_width, "outer size")?;
                for (i, h) in holes.iter().enumerate() {
                    pos(h.radius, "hole radius")?;
                    if h.center.len() != n {
                        return Err(Error::Domain(format!(
                            "hole {i} center has {} coordinates, expected {n}",
                            h.center.len()
                        )));
                    }
                    let clear = match self {
                        DomainSpec::BoxMinusBalls { .. } => h
                            .center
                            .iter()
                            .map(|c| half_width - c.abs())
                            .fold(f64::INFINITY, f64::min),
                        _ => half_width - norm(&h.center),
                    };
                    if !(clear > h.radius) {
                        return Err(Error::Domain(format!("hole {i} touches the outer boundary")));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn holes(&self) -> &[Hole] {
        match self {
            DomainSpec::BoxMinusBalls { holes, .. } | DomainSpec::BallMinusBalls { holes, .. } => holes,
            _ => &[],
        }
    }

    /// Half-width of an axis-aligned box containing the domain.
    pub fn extent(&self) -> f64 {
        match self {
            DomainSpec::Ball { radius } => *radius,
            DomainSpec::Annulus { outer, .. } => *outer,
            DomainSpec::BoxMinusBalls { half_width, .. } => *half_width,
            DomainSpec::BallMinusBalls { radius, .. } => *radius,
        }
    }

    /// Euclidean distance to the boundary; positive inside, negative or zero
    /// outside.
    pub fn sigma(&self, x: &[f64]) -> f64 {
        let r = norm(x);
        let outer = match self {
            DomainSpec::Ball { radius } => radius - r,
            DomainSpec::Annulus { inner, outer } => (outer - r).min(r - inner),
            DomainSpec::BoxMinusBalls { half_width, .. } => x
                .iter()
                .map(|c| half_width - c.abs())
                .fold(f64::INFINITY, f64::min),
            DomainSpec::BallMinusBalls { radius, .. } => radius - r,
        };
        self.holes()
            .iter()
            .map(|h| dist(x, &h.center) - h.radius)
            .fold(outer, f64::min)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.sigma(x) > 0.0
    }

    /// For an interior point `x`, the fraction `t ∈ (0, 1]` at which the
    /// segment `x → x + step·e_axis` first meets the boundary, if it does.
    pub fn crossing(&self, x: &[f64], axis: usize, step: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        let mut consider = |t: f64| {
            if t > 0.0 && t <= 1.0 && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        };
        let sphere = |c: Option<&[f64]>, r: f64, inside: bool| -> Option<f64> {
            // |x + t·s·e − c|² = r², quadratic in t.
            let d: Vec<f64> = match c {
                Some(c) => x.iter().zip(c).map(|(a, b)| a - b).collect(),
                None => x.to_vec(),
            };
            let a = step * step;
            let b = 2.0 * step * d[axis];
            let cc = d.iter().map(|v| v * v).sum::<f64>() - r * r;
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let (t1, t2) = ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a));
            if inside {
                Some(t2)
            } else if t1 > 0.0 {
                Some(t1)
            } else {
                None
            }
        };
        match self {
            DomainSpec::Ball { radius } | DomainSpec::BallMinusBalls { radius, .. } => {
                if let Some(t) = sphere(None, *radius, true) {
                    consider(t);
                }
            }
            DomainSpec::Annulus { inner, outer } => {
                if let Some(t) = sphere(None, *outer, true) {
                    consider(t);
                }
                if let Some(t) = sphere(None, *inner, false) {
                    consider(t);
                }
            }
            DomainSpec::BoxMinusBalls { half_width, .. } => {
                let face = if step > 0.0 { *half_width } else { -*half_width };
                consider((face - x[axis]) / step);
            }
        }
        for h in self.holes() {
            if let Some(t) = sphere(Some(&h.center), h.radius, false) {
                consider(t);
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Smooth fields

/// A scalar field with closed-form first and second derivatives.
pub trait SmoothField: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn hessian(&self, x: &[f64]) -> SymMatrix;
}

/// Radial profile: returns `(u, u′, u″)` at `r`.
pub type Profile = Arc<dyn Fn(f64) -> (f64, f64, f64) + Send + Sync>;

/// `u(|x|)` from a profile; the origin uses `u′/r → u″`.
#[derive(Clone)]
pub struct RadialField {
    n: usize,
    profile: Profile,
}

impl RadialField {
    pub fn new(n: usize, profile: Profile) -> Self {
        Self { n, profile }
    }
}

impl SmoothField for RadialField {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.profile)(norm(x)).0
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = norm(x);
        if r == 0.0 {
            return vec![0.0; self.n];
        }
        let (_, d1, _) = (self.profile)(r);
        x.iter().map(|xi| d1 * xi / r).collect()
    }

    fn hessian(&self, x: &[f64]) -> SymMatrix {
        let r = norm(x);
        let (_, d1, d2) = (self.profile)(r);
        if r == 0.0 {
            return SymMatrix::identity(self.n).scale(d2);
        }
        let over = d1 / r;
        SymMatrix::from_fn(self.n, |i, j| {
            let xx = x[i] * x[j] / (r * r);
            d2 * xx + over * (if i == j { 1.0 } else { 0.0 } - xx)
        })
    }
}

/// Closed-form fields selectable from configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant { value: f64 },
    /// `a + b|x|²/2`.
    Quadratic { a: f64, b: f64 },
    /// `log(2/(1 − |x|²))`, the Poincaré-ball factor.
    HyperbolicFactor,
    /// `log(2√(n(n−1))/(1 − |x|²))`.
    LoewnerNirenberg,
    /// `c₀ + c₁|x|² + c₂ x₀x₁`, used for manufactured solutions.
    Polynomial { c0: f64, c1: f64, c2: f64 },
}

impl FieldSpec {
    pub fn build(&self, n: usize) -> Arc<dyn SmoothField> {
        match *self {
            FieldSpec::Constant { value } => Arc::new(RadialField::new(n, Arc::new(move |_| (value, 0.0, 0.0)))),
            FieldSpec::Quadratic { a, b } => Arc::new(quadratic_field(n, a, b)),
            FieldSpec::HyperbolicFactor => Arc::new(log_ball_field(n, 2.0)),
            FieldSpec::LoewnerNirenberg => {
                Arc::new(log_ball_field(n, 2.0 * ((n * (n - 1)) as f64).sqrt()))
            }
            FieldSpec::Polynomial { c0, c1, c2 } => Arc::new(PolynomialField { n, c0, c1, c2 }),
        }
    }
}

pub fn quadratic_field(n: usize, a: f64, b: f64) -> RadialField {
    RadialField::new(n, Arc::new(move |r| (a + 0.5 * b * r * r, b * r, b)))
}

/// `log(c/(1 − r²))`.
pub fn log_ball_field(n: usize, c: f64) -> RadialField {
    RadialField::new(
        n,
        Arc::new(move |r| {
            let q = 1.0 - r * r;
            ((c / q).ln(), 2.0 * r / q, 2.0 * (1.0 + r * r) / (q * q))
        }),
    )
}

/// `c₀ + c₁|x|² + c₂ x₀x₁`.
#[derive(Clone, Debug)]
pub struct PolynomialField {
    pub n: usize,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SmoothField for PolynomialField {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.c0 + self.c1 * x.iter().map(|v| v * v).sum::<f64>() + self.c2 * x[0] * x[1]
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = x.iter().map(|v| 2.0 * self.c1 * v).collect();
        g[0] += self.c2 * x[1];
        g[1] += self.c2 * x[0];
        g
    }

    fn hessian(&self, _: &[f64]) -> SymMatrix {
        let mut h = SymMatrix::identity(self.n).scale(2.0 * self.c1);
        h.set(0, 1, self.c2);
        h
    }
}

/// Sum of plane waves `Σ a_k sin(ω_k·x + φ_k)`, a smooth test field with
/// exact derivatives.
#[derive(Clone, Debug)]
pub struct WaveField {
    pub n: usize,
    pub terms: Vec<(f64, Vec<f64>, f64)>,
}

impl WaveField {
    pub fn random(n: usize, terms: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            n,
            terms: (0..terms)
                .map(|_| {
                    (
                        rng.random_range(-0.5..0.5),
                        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect(),
        }
    }
}

impl SmoothField for WaveField {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(a, w, p)| a * (dot(w, x) + p).sin())
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for (a, w, p) in &self.terms {
            let c = a * (dot(w, x) + p).cos();
            for i in 0..self.n {
                g[i] += c * w[i];
            }
        }
        g
    }

    fn hessian(&self, x: &[f64]) -> SymMatrix {
        let mut h = SymMatrix::zeros(self.n);
        for (a, w, p) in &self.terms {
            let s = -a * (dot(w, x) + p).sin();
            for i in 0..self.n {
                for j in i..self.n {
                    h.set(i, j, h.get(i, j) + s * w[i] * w[j]);
                }
            }
        }
        h
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Metrics and curvature

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetricSpec {
    #[default]
    Euclidean,
    /// Poincaré ball of curvature −1.
    HyperbolicBall,
    /// `e^{2w}δ` for a closed-form `w`.
    ConformalToEuclidean { factor: FieldSpec },
}

/// Pointwise data of a conformally flat metric `e^{2w}δ`.
#[derive(Clone, Debug)]
pub struct MetricPoint {
    pub w: f64,
    pub dw: Vec<f64>,
    pub g: SymMatrix,
}

impl MetricSpec {
    fn factor(&self, n: usize) -> Option<Arc<dyn SmoothField>> {
        match self {
            MetricSpec::Euclidean => None,
            MetricSpec::HyperbolicBall => Some(FieldSpec::HyperbolicFactor.build(n)),
            MetricSpec::ConformalToEuclidean { factor } => Some(factor.build(n)),
        }
    }

    pub fn at(&self, x: &[f64]) -> Result<MetricPoint> {
        let n = x.len();
        match self.factor(n) {
            None => Ok(MetricPoint {
                w: 0.0,
                dw: vec![0.0; n],
                g: SymMatrix::identity(n),
            }),
            Some(f) => {
                if matches!(self, MetricSpec::HyperbolicBall) && norm(x) >= 1.0 {
                    return Err(Error::Metric(format!(
                        "point at |x| = {} lies outside the Poincaré ball",
                        norm(x)
                    )));
                }
                let w = f.value(x);
                if !w.is_finite() {
                    return Err(Error::Metric("conformal factor is not finite".into()));
                }
                Ok(MetricPoint {
                    w,
                    dw: f.gradient(x),
                    g: SymMatrix::identity(n).scale((2.0 * w).exp()),
                })
            }
        }
    }
}

/// First and covariant second derivatives of a field with respect to a
/// conformally flat metric.
#[derive(Clone, Debug)]
pub struct Jet {
    pub du: Vec<f64>,
    /// `∇²u = D²u − dw⊗du − du⊗dw + (Dw·Du)δ`.
    pub hess: SymMatrix,
    /// `|∇u|²_g = e^{−2w}|Du|²`.
    pub grad_sq: f64,
    /// `Δ_g u = e^{−2w}(Δu + (n−2)Dw·Du)`.
    pub laplacian: f64,
}

impl Jet {
    pub fn new(mp: &MetricPoint, du: Vec<f64>, d2u: &SymMatrix) -> Self {
        let n = du.len();
        let wu = dot(&mp.dw, &du);
        let hess = SymMatrix::from_fn(n, |i, j| {
            d2u.get(i, j) - mp.dw[i] * du[j] - mp.dw[j] * du[i] + if i == j { wu } else { 0.0 }
        });
        let e = (-2.0 * mp.w).exp();
        let trace: f64 = (0..n).map(|i| d2u.get(i, i)).sum();
        Self {
            grad_sq: e * dot(&du, &du),
            laplacian: e * (trace + (n as f64 - 2.0) * wu),
            du,
            hess,
        }
    }

    pub fn of(field: &dyn SmoothField, metric: &MetricSpec, x: &[f64]) -> Result<Self> {
        let mp = metric.at(x)?;
        Ok(Self::new(&mp, field.gradient(x), &field.hessian(x)))
    }
}

/// `A^{τ,α}_g = (α/(n−2))(Ric − τR/(2(n−1)) g)` at `x`.
pub fn a_tau_alpha(metric: &MetricSpec, alpha: f64, tau: f64, x: &[f64]) -> Result<SymMatrix> {
    let n = x.len();
    if n < 3 {
        return Err(Error::Unsupported(format!("A^(τ,α) needs n >= 3, got {n}")));
    }
    let nf = n as f64;
    match metric {
        MetricSpec::Euclidean => Ok(SymMatrix::zeros(n)),
        MetricSpec::HyperbolicBall => {
            let mp = metric.at(x)?;
            Ok(mp.g.scale(alpha / (nf - 2.0) * (-(nf - 1.0) + tau * nf / 2.0)))
        }
        MetricSpec::ConformalToEuclidean { factor } => {
            conformal_a_tau_alpha(factor.build(n).as_ref(), &MetricSpec::Euclidean, alpha, tau, x)
        }
    }
}

/// `A^{τ,α}` of `e^{2u}g` from that of `g`:
/// `A + α(τ−1)/(n−2)Δu g − α∇²u + α(τ−2)/2|∇u|² g + α du⊗du`.
pub fn conformal_a_tau_alpha(
    u: &dyn SmoothField,
    base: &MetricSpec,
    alpha: f64,
    tau: f64,
    x: &[f64],
) -> Result<SymMatrix> {
    let n = x.len();
    let nf = n as f64;
    let a = a_tau_alpha(base, alpha, tau, x)?;
    let mp = base.at(x)?;
    let jet = Jet::new(&mp, u.gradient(x), &u.hessian(x));
    let scalar = alpha * (tau - 1.0) / (nf - 2.0) * jet.laplacian + alpha * (tau - 2.0) / 2.0 * jet.grad_sq;
    Ok(SymMatrix::from_fn(n, |i, j| {
        a.get(i, j) + scalar * mp.g.get(i, j) - alpha * jet.hess.get(i, j) + alpha * jet.du[i] * jet.du[j]
    }))
}

/// Schouten tensor of `e^{2u}g`: `A − ∇²u − ½|∇u|² g + du⊗du`.
pub fn conformal_schouten(u: &dyn SmoothField, base: &MetricSpec, x: &[f64]) -> Result<SymMatrix> {
    let n = x.len();
    let a = a_tau_alpha(base, 1.0, 1.0, x)?;
    let mp = base.at(x)?;
    let jet = Jet::new(&mp, u.gradient(x), &u.hessian(x));
    Ok(SymMatrix::from_fn(n, |i, j| {
        a.get(i, j) - jet.hess.get(i, j) - 0.5 * jet.grad_sq * mp.g.get(i, j) + jet.du[i] * jet.du[j]
    }))
}

/// Einstein tensor `Ric − R/2·g` of a three-dimensional metric.
pub fn einstein_tensor(metric: &MetricSpec, x: &[f64]) -> Result<SymMatrix> {
    if x.len() != 3 {
        return Err(Error::Unsupported("Einstein tensor helper is three-dimensional".into()));
    }
    a_tau_alpha(metric, 1.0, 2.0, x)
}

/// Background term of `V`: `(n−2)/(α(τ−1))·A^{τ,α}_g`.
pub fn v_background(metric: &MetricSpec, params: &ConformalParams, x: &[f64]) -> Result<SymMatrix> {
    let nf = params.n as f64;
    Ok(a_tau_alpha(metric, params.alpha, params.tau, x)?.scale((nf - 2.0) / (params.alpha * (params.tau - 1.0))))
}

/// `V = Δu g − ρ∇²u + γ|∇u|² g + ρ du⊗du + A` from a jet.
pub fn v_from_jet(jet: &Jet, g: &SymMatrix, params: &ConformalParams, a: &SymMatrix) -> SymMatrix {
    let n = jet.du.len();
    let (rho, gamma) = (params.rho, params.gamma);
    let scalar = jet.laplacian + gamma * jet.grad_sq;
    SymMatrix::from_fn(n, |i, j| {
        scalar * g.get(i, j) - rho * jet.hess.get(i, j) + rho * jet.du[i] * jet.du[j] + a.get(i, j)
    })
}

pub fn v_of_u(u: &dyn SmoothField, base: &MetricSpec, params: &ConformalParams, x: &[f64]) -> Result<SymMatrix> {
    if x.len() != params.n {
        return Err(Error::Domain(format!(
            "point has {} coordinates, problem has n = {}",
            x.len(),
            params.n
        )));
    }
    let mp = base.at(x)?;
    let jet = Jet::new(&mp, u.gradient(x), &u.hessian(x));
    let a = v_background(base, params, x)?;
    Ok(v_from_jet(&jet, &mp.g, params, &a))
}

/// Eigenvalues of `g⁻¹U`, ascending.
pub fn eigenvalues_wrt(g: &SymMatrix, u: &SymMatrix) -> Result<LambdaVec> {
    LambdaVec::new(generalized_eigen(g, u)?.values)
}

// ---------------------------------------------------------------------------
// Admissible metrics

/// The critical-point-free function `v ≥ 0` used per domain kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MorseFunction {
    /// `x₀ + shift`.
    Linear { shift: f64 },
    /// `|x|`.
    Radius,
}

impl MorseFunction {
    pub fn for_domain(domain: &DomainSpec) -> Self {
        match domain {
            DomainSpec::Annulus { .. } => MorseFunction::Radius,
            other => MorseFunction::Linear {
                shift: other.extent(),
            },
        }
    }

    fn jet(&self, x: &[f64]) -> (f64, Vec<f64>, SymMatrix) {
        let n = x.len();
        match self {
            MorseFunction::Linear { shift } => {
                let mut d = vec![0.0; n];
                d[0] = 1.0;
                (x[0] + shift, d, SymMatrix::zeros(n))
            }
            MorseFunction::Radius => {
                let r = norm(x);
                let d: Vec<f64> = x.iter().map(|v| v / r).collect();
                let h = SymMatrix::from_fn(n, |i, j| {
                    ((if i == j { 1.0 } else { 0.0 }) - d[i] * d[j]) / r
                });
                (r, d, h)
            }
        }
    }
}

/// Result of the doubling search for `u = e^{Nv}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorseCertificate {
    pub function: MorseFunction,
    pub factor: f64,
    pub doublings: u32,
    pub points: usize,
    /// Smallest cone depth of the rescaled `V[e^{Nv}]` over the points.
    pub min_margin: f64,
    pub min_gradient_sq: f64,
    pub rechecked: bool,
}

const MORSE_MAX_DOUBLINGS: u32 = 20;

/// `V[e^{Nv}]/(N²e^{2Nv})`, finite for every `N` since `v ≥ 0`.
fn morse_scaled_v(
    f: &MorseFunction,
    factor: f64,
    base: &MetricSpec,
    params: &ConformalParams,
    x: &[f64],
) -> Result<SymMatrix> {
    let n = x.len();
    let (v, dv, d2v) = f.jet(x);
    let mp = base.at(x)?;
    let jet = Jet::new(&mp, dv, &d2v);
    let a = v_background(base, params, x)?;
    let decay = (-factor * v).exp();
    let rho = params.rho;
    Ok(SymMatrix::from_fn(n, |i, j| {
        let g = mp.g.get(i, j);
        let dd = jet.du[i] * jet.du[j];
        decay * ((jet.laplacian / factor + jet.grad_sq) * g - rho * (jet.hess.get(i, j) / factor + dd))
            + params.gamma * jet.grad_sq * g
            + rho * dd
            + a.get(i, j) * decay * decay / (factor * factor)
    }))
}

/// Interior sample points on a uniform lattice of `per_axis` points.
pub fn lattice_points(domain: &DomainSpec, n: usize, per_axis: usize) -> Vec<Vec<f64>> {
    let e = domain.extent();
    let h = 2.0 * e / (per_axis - 1) as f64;
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|_| {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    -e + i as f64 * h
                })
                .collect::<Vec<f64>>()
        })
        .filter(|x| domain.contains(x))
        .collect()
}

/// Smallest `N = 2^j ≤ 2^20` with `λ(g⁻¹V[e^{Nv}]) ∈ Γ` at every point.
pub fn morse_admissible(
    domain: &DomainSpec,
    base: &MetricSpec,
    params: &ConformalParams,
    cone: &ConeSpec,
    points: &[Vec<f64>],
) -> Result<MorseCertificate> {
    if points.is_empty() {
        return Err(Error::Construction("no sample points inside the domain".into()));
    }
    let f = MorseFunction::for_domain(domain);
    let min_gradient_sq = points
        .iter()
        .map(|x| f.jet(x).1.iter().map(|d| d * d).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    let margins = |factor: f64| -> Result<Vec<f64>> {
        points
            .par_iter()
            .map(|x| {
                let v = morse_scaled_v(&f, factor, base, params, x)?;
                let g = base.at(x)?.g;
                let lam = eigenvalues_wrt(&g, &v)?;
                Ok(if cone.contains(&lam) { cone.depth(&lam) } else { f64::NEG_INFINITY })
            })
            .collect()
    };
    for j in 0..=MORSE_MAX_DOUBLINGS {
        let factor = f64::from(1u32 << j);
        let m = margins(factor)?;
        if m.iter().all(|v| *v > 0.0) {
            let min_margin = m.iter().copied().fold(f64::INFINITY, f64::min);
            let rechecked = points.iter().all(|x| {
                morse_scaled_v(&f, factor, base, params, x)
                    .and_then(|v| eigenvalues_wrt(&base.at(x)?.g, &v))
                    .map(|lam| cone.contains(&lam))
                    .unwrap_or(false)
            });
            return Ok(MorseCertificate {
                function: f,
                factor,
                doublings: j,
                points: points.len(),
                min_margin,
                min_gradient_sq,
                rechecked,
            });
        }
    }
    Err(Error::Construction(format!(
        "no N <= 2^{MORSE_MAX_DOUBLINGS} makes e^(Nv) admissible for α = {}, τ = {}",
        params.alpha, params.tau
    )))
}

// ---------------------------------------------------------------------------
// Grids and serialization

/// Uniform three-dimensional grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub shape: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: f64,
}

impl Grid3 {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.shape[1] + j) * self.shape[0] + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.shape[0];
        let j = (idx / self.shape[0]) % self.shape[1];
        let k = idx / (self.shape[0] * self.shape[1]);
        [i, j, k]
    }

    pub fn position(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        [
            self.origin[0] + c[0] as f64 * self.spacing,
            self.origin[1] + c[1] as f64 * self.spacing,
            self.origin[2] + c[2] as f64 * self.spacing,
        ]
    }
}

/// Values on a [`Grid3`] with finite-difference derivatives.
#[derive(Clone, Debug)]
pub struct GridField3 {
    pub grid: Grid3,
    pub data: Vec<f64>,
}

impl GridField3 {
    pub fn sample(grid: Grid3, field: &dyn SmoothField) -> Self {
        let data = (0..grid.len()).map(|i| field.value(&grid.position(i))).collect();
        Self { grid, data }
    }

    fn check_resolution(&self) -> Result<()> {
        if self.grid.shape.iter().any(|&s| s < 5) {
            return Err(Error::Resolution(format!(
                "grid {:?} has fewer than 5 points along an axis",
                self.grid.shape
            )));
        }
        Ok(())
    }

    fn at(&self, c: [usize; 3]) -> f64 {
        self.data[self.grid.index(c[0], c[1], c[2])]
    }

    /// First derivative along `axis` at `c`: centred inside, one-sided
    /// second-order at the ends.
    fn d1(&self, c: [usize; 3], axis: usize, get: &dyn Fn([usize; 3]) -> f64) -> f64 {
        let h = self.grid.spacing;
        let m = self.grid.shape[axis];
        let mv = |d: isize| {
            let mut q = c;
            q[axis] = (c[axis] as isize + d) as usize;
            get(q)
        };
        if c[axis] == 0 {
            (-3.0 * mv(0) + 4.0 * mv(1) - mv(2)) / (2.0 * h)
        } else if c[axis] == m - 1 {
            (3.0 * mv(0) - 4.0 * mv(-1) + mv(-2)) / (2.0 * h)
        } else {
            (mv(1) - mv(-1)) / (2.0 * h)
        }
    }

    fn d2(&self, c: [usize; 3], axis: usize) -> f64 {
        let h = self.grid.spacing;
        let m = self.grid.shape[axis];
        let mv = |d: isize| {
            let mut q = c;
            q[axis] = (c[axis] as isize + d) as usize;
            self.at(q)
        };
        if c[axis] == 0 {
            (2.0 * mv(0) - 5.0 * mv(1) + 4.0 * mv(2) - mv(3)) / (h * h)
        } else if c[axis] == m - 1 {
            (2.0 * mv(0) - 5.0 * mv(-1) + 4.0 * mv(-2) - mv(-3)) / (h * h)
        } else {
            (mv(1) - 2.0 * mv(0) + mv(-1)) / (h * h)
        }
    }

    pub fn gradient_at(&self, idx: usize) -> Vec<f64> {
        let c = self.grid.coords(idx);
        (0..3).map(|a| self.d1(c, a, &|q| self.at(q))).collect()
    }

    pub fn hessian_at(&self, idx: usize) -> SymMatrix {
        let c = self.grid.coords(idx);
        let mut h = SymMatrix::zeros(3);
        for a in 0..3 {
            h.set(a, a, self.d2(c, a));
            for b in a + 1..3 {
                let inner = |q: [usize; 3]| self.d1(q, b, &|p| self.at(p));
                h.set(a, b, self.d1(c, a, &inner));
            }
        }
        h
    }
}

/// `A^{τ,α}` of `e^{2u}g` at every node of a grid field.
pub fn conformal_a_tau_alpha_grid(
    u: &GridField3,
    base: &MetricSpec,
    alpha: f64,
    tau: f64,
) -> Result<Vec<SymMatrix>> {
    u.check_resolution()?;
    (0..u.grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = u.grid.position(idx);
            let mp = base.at(&x)?;
            let jet = Jet::new(&mp, u.gradient_at(idx), &u.hessian_at(idx));
            let a = a_tau_alpha(base, alpha, tau, &x)?;
            let nf = 3.0;
            let scalar = alpha * (tau - 1.0) / (nf - 2.0) * jet.laplacian + alpha * (tau - 2.0) / 2.0 * jet.grad_sq;
            Ok(SymMatrix::from_fn(3, |i, j| {
                a.get(i, j) + scalar * mp.g.get(i, j) - alpha * jet.hess.get(i, j) + alpha * jet.du[i] * jet.du[j]
            }))
        })
        .collect()
}

/// `V[u]` at every node of a grid field.
pub fn v_of_u_grid(u: &GridField3, base: &MetricSpec, params: &ConformalParams) -> Result<Vec<SymMatrix>> {
    u.check_resolution()?;
    (0..u.grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = u.grid.position(idx);
            let mp = base.at(&x)?;
            let jet = Jet::new(&mp, u.gradient_at(idx), &u.hessian_at(idx));
            let a = v_background(base, params, &x)?;
            Ok(v_from_jet(&jet, &mp.g, params, &a))
        })
        .collect()
}

/// Header of the binary grid-field layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub field: String,
    pub domain: DomainSpec,
    pub shape: Vec<usize>,
    pub origin: Vec<f64>,
    pub spacing: f64,
}

/// Layout: header length as little-endian `u64`, the JSON header, then the
/// values as little-endian `f64` in x-fastest order.
pub fn write_field(mut w: impl Write, header: &FieldHeader, data: &[f64]) -> std::io::Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field(mut r: impl Read) -> std::io::Result<(FieldHeader, Vec<f64>)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: FieldHeader = serde_json::from_slice(&json)?;
    let count: usize = header.shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok((header, data))
}

/// Comma-separated columns with a header row; values in shortest
/// round-trip form.
pub fn write_csv(mut w: impl Write, names: &[&str], columns: &[&[f64]]) -> std::io::Result<()> {
    writeln!(w, "{}", names.join(","))?;
    let rows = columns.first().map_or(0, |c| c.len());
    for i in 0..rows {
        let line: Vec<String> = columns.iter().map(|c| format!("{:?}", c[i])).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::ConeConstants;
    use crate::linalg::jacobi_eigen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(alpha: f64, tau: f64, n: usize) -> ConformalParams {
        ConformalParams::unchecked(alpha, tau, n, 1.0).unwrap()
    }

    #[test]
    fn domain_distances() {
        let d = DomainSpec::BoxMinusBalls {
            half_width: 1.0,
            holes: vec![Hole {
                center: vec![0.5, 0.0, 0.0],
                radius: 0.2,
            }],
        };
        d.validate(3).unwrap();
        assert!((d.sigma(&[0.0, 0.0, 0.0]) - 0.3).abs() < 1e-15);
        assert!((d.sigma(&[-0.9, 0.0, 0.0]) - 0.1).abs() < 1e-15);
        assert!(!d.contains(&[0.5, 0.0, 0.1]));
        let t = d.crossing(&[0.2, 0.0, 0.0], 0, 0.2).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert!(d.crossing(&[0.0, 0.0, 0.0], 1, 0.2).is_none());
        let t = d.crossing(&[0.0, 0.0, 0.9], 2, 0.2).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        let a = DomainSpec::Annulus { inner: 0.5, outer: 1.0 };
        assert!((a.sigma(&[0.6, 0.0]) - 0.1).abs() < 1e-12);
        assert!(DomainSpec::Annulus { inner: 1.0, outer: 0.5 }.validate(2).is_err());
    }

    #[test]
    fn euclidean_a_is_zero_and_hyperbolic_is_minus_half_g() {
        let x = [0.1, -0.2, 0.3];
        assert_eq!(a_tau_alpha(&MetricSpec::Euclidean, 1.0, 1.0, &x).unwrap().max_abs(), 0.0);
        let g = MetricSpec::HyperbolicBall.at(&x).unwrap().g;
        let a = a_tau_alpha(&MetricSpec::HyperbolicBall, 1.0, 1.0, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.get(i, j) + 0.5 * g.get(i, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_shift_leaves_a_unchanged() {
        let u = FieldSpec::Constant { value: 0.7 }.build(3);
        let x = [0.2, 0.1, -0.3];
        for metric in [MetricSpec::Euclidean, MetricSpec::HyperbolicBall] {
            let a0 = a_tau_alpha(&metric, -1.0, 0.5, &x).unwrap();
            let a1 = conformal_a_tau_alpha(u.as_ref(), &metric, -1.0, 0.5, &x).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a0.get(i, j) - a1.get(i, j)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn conformal_change_to_hyperbolic() {
        let u = FieldSpec::HyperbolicFactor.build(3);
        for x in [[0.0, 0.0, 0.0], [0.3, -0.1, 0.2], [0.5, 0.5, 0.1]] {
            let e2u = (2.0 * u.value(&x)).exp();
            let general = conformal_a_tau_alpha(u.as_ref(), &MetricSpec::Euclidean, 1.0, 1.0, &x).unwrap();
            let schouten = conformal_schouten(u.as_ref(), &MetricSpec::Euclidean, &x).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { -0.5 * e2u } else { 0.0 };
                    assert!((general.get(i, j) - expect).abs() < 1e-6);
                    assert!((schouten.get(i, j) - general.get(i, j)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn schouten_special_case_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let u = WaveField::random(4, 3, &mut rng);
            let x = [0.1, 0.2, -0.3, 0.05];
            let metric = MetricSpec::HyperbolicBall;
            let a = conformal_a_tau_alpha(&u, &metric, 1.0, 1.0, &x).unwrap();
            let s = conformal_schouten(&u, &metric, &x).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    assert!((a.get(i, j) - s.get(i, j)).abs() < 1e-10 * (1.0 + a.max_abs()));
                }
            }
        }
    }

    #[test]
    fn einstein_tensor_of_constant_curvature() {
        // The Poincaré ball has curvature −1: G(e, e) = 1 for g-unit e.
        let x = [0.2, 0.3, -0.4];
        let g = MetricSpec::HyperbolicBall.at(&x).unwrap().g;
        let gt = einstein_tensor(&MetricSpec::HyperbolicBall, &x).unwrap();
        for axis in 0..3 {
            let unit = 1.0 / g.get(axis, axis);
            assert!((gt.get(axis, axis) * unit - 1.0).abs() < 1e-12);
        }
        // A rescaled ball (factor log(2c/(1−r²))) has curvature −1/c².
        let c = 3.0;
        let metric = MetricSpec::ConformalToEuclidean {
            factor: FieldSpec::Polynomial { c0: 0.0, c1: 0.0, c2: 0.0 },
        };
        let flat = einstein_tensor(&metric, &x).unwrap();
        assert!(flat.max_abs() < 1e-14);
        let f = log_ball_field(3, 2.0 * c);
        let t = conformal_a_tau_alpha(&f, &MetricSpec::Euclidean, 1.0, 2.0, &x).unwrap();
        let e2w = (2.0 * f.value(&x)).exp();
        assert!((t.get(2, 2) / e2w - 1.0 / (c * c)).abs() < 1e-10);
    }

    #[test]
    fn v_identity_against_conformal_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let consts = ConeConstants::with_values(3, 2, 1.0 / 3.0);
        let p = ConformalParams::new(1.0, 3.0, 3, &consts, 1.0).unwrap();
        for metric in [MetricSpec::Euclidean, MetricSpec::HyperbolicBall] {
            for _ in 0..20 {
                let u = WaveField::random(3, 4, &mut rng);
                let x = [0.1, -0.25, 0.3];
                let v = v_of_u(&u, &metric, &p, &x).unwrap();
                let a = conformal_a_tau_alpha(&u, &metric, p.alpha, p.tau, &x).unwrap();
                let s = (3.0 - 2.0) / (p.alpha * (p.tau - 1.0));
                for i in 0..3 {
                    for j in 0..3 {
                        let rel = (v.get(i, j) - s * a.get(i, j)).abs() / (1.0 + v.max_abs());
                        assert!(rel < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn v_of_zero_is_background() {
        let p = params(1.0, 3.0, 3);
        let x = [0.1, 0.2, 0.3];
        let zero = FieldSpec::Constant { value: 0.0 }.build(3);
        let v = v_of_u(zero.as_ref(), &MetricSpec::HyperbolicBall, &p, &x).unwrap();
        let a = v_background(&MetricSpec::HyperbolicBall, &p, &x).unwrap();
        assert_eq!(v, a);
    }

    #[test]
    fn eigenvalues_wrt_examples() {
        let d = SymMatrix::diagonal(&[3.0, -1.0, 2.0]);
        let e = eigenvalues_wrt(&SymMatrix::identity(3), &d).unwrap();
        assert_eq!(&*e, &[-1.0, 2.0, 3.0]);
        let u = SymMatrix::from_fn(3, |i, j| 1.0 + (i * j) as f64);
        let plain = jacobi_eigen(&u).values;
        let e = eigenvalues_wrt(&SymMatrix::identity(3).scale(2.5), &u).unwrap();
        for k in 0..3 {
            assert!((e[k] - plain[k] / 2.5).abs() < 1e-14);
        }
        assert!(matches!(
            eigenvalues_wrt(&SymMatrix::diagonal(&[1.0, 0.0, 1.0]), &u),
            Err(Error::Metric(_))
        ));
    }

    /// Roots of det(U − λG) = 0 by expanding the characteristic cubic and
    /// solving it trigonometrically.
    fn cubic_oracle(g: &SymMatrix, u: &SymMatrix) -> Vec<f64> {
        let det = |m: &dyn Fn(usize, usize) -> f64| {
            m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
        };
        let p = |t: f64| det(&|i, j| u.get(i, j) - t * g.get(i, j));
        // p(t) = c0 + c1 t + c2 t² + c3 t³ by interpolation at 4 points.
        let ts = [-1.0, 0.0, 1.0, 2.0];
        let ys: Vec<f64> = ts.iter().map(|&t| p(t)).collect();
        let c0 = ys[1];
        let c3 = (ys[3] - 3.0 * ys[2] + 3.0 * ys[1] - ys[0]) / 6.0;
        let c2 = (ys[2] + ys[0] - 2.0 * ys[1]) / 2.0;
        let c1 = ys[2] - c0 - c2 - c3;
        let (a, b, c) = (c2 / c3, c1 / c3, c0 / c3);
        let q = (a * a - 3.0 * b) / 9.0;
        let r = (2.0 * a * a * a - 9.0 * a * b + 27.0 * c) / 54.0;
        let th = (r / q.powf(1.5)).clamp(-1.0, 1.0).acos();
        let mut roots: Vec<f64> = (0..3)
            .map(|k| -2.0 * q.sqrt() * ((th + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() - a / 3.0)
            .collect();
        roots.sort_by(|x, y| x.total_cmp(y));
        roots
    }

    #[test]
    fn eigenvalues_match_cubic_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = SymMatrix::from_fn(3, |i, j| raw[i * 3 + j]);
            let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = SymMatrix::from_fn(3, |i, j| {
                (0..3).map(|k| b[i * 3 + k] * b[j * 3 + k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 }
            });
            let e = eigenvalues_wrt(&g, &u).unwrap();
            let o = cubic_oracle(&g, &u);
            for k in 0..3 {
                assert!((e[k] - o[k]).abs() < 1e-10 * (1.0 + o[k].abs()), "{e:?} {o:?}");
            }
        }
    }

    #[test]
    fn loewner_nirenberg_closed_form_residual() {
        // 2(n−1)Δu + (n−1)(n−2)|∇u|² = e^{2u} for the flat base.
        for n in [3usize, 4, 5] {
            let f = FieldSpec::LoewnerNirenberg.build(n);
            for r in [0.0, 0.3, 0.6, 0.9] {
                let mut x = vec![0.0; n];
                x[0] = r;
                let jet = Jet::of(f.as_ref(), &MetricSpec::Euclidean, &x).unwrap();
                let nf = n as f64;
                let lhs = 2.0 * (nf - 1.0) * jet.laplacian + (nf - 1.0) * (nf - 2.0) * jet.grad_sq;
                let rhs = (2.0 * f.value(&x)).exp();
                assert!((lhs - rhs).abs() < 1e-8 * rhs);
            }
        }
    }

    #[test]
    fn morse_search_examples() {
        let annulus = DomainSpec::Annulus { inner: 0.5, outer: 1.0 };
        let pts = lattice_points(&annulus, 3, 9);
        let g1 = ConeSpec::garding(3, 1).unwrap();
        let p = params(-1.0, 0.0, 3);
        let cert = morse_admissible(&annulus, &MetricSpec::Euclidean, &p, &g1, &pts).unwrap();
        assert!(cert.rechecked && cert.min_margin > 0.0);
        assert!(cert.factor <= 4.0, "{cert:?}");

        let ball = DomainSpec::Ball { radius: 1.0 };
        let pts = lattice_points(&ball, 3, 9);
        let p = params(1.0, 2.0, 3);
        assert_eq!(p.gamma, 0.0);
        let pos = ConeSpec::positive(3).unwrap();
        let cert = morse_admissible(&ball, &MetricSpec::Euclidean, &p, &pos, &pts).unwrap();
        assert!(cert.rechecked);
    }

    #[test]
    fn grid_field_derivatives_and_resolution() {
        let grid = Grid3 {
            shape: [9, 9, 9],
            origin: [-0.4, -0.4, -0.4],
            spacing: 0.1,
        };
        let u = PolynomialField { n: 3, c0: 0.1, c1: 0.3, c2: 0.2 };
        let gf = GridField3::sample(grid.clone(), &u);
        for idx in [0, 40, 364, grid.len() - 1] {
            let x = grid.position(idx);
            let g = gf.gradient_at(idx);
            let h = gf.hessian_at(idx);
            let ge = u.gradient(&x);
            let he = u.hessian(&x);
            for i in 0..3 {
                assert!((g[i] - ge[i]).abs() < 1e-12);
                for j in 0..3 {
                    assert!((h.get(i, j) - he.get(i, j)).abs() < 1e-9);
                }
            }
        }
        let coarse = GridField3::sample(
            Grid3 {
                shape: [4, 9, 9],
                ..grid
            },
            &u,
        );
        assert!(matches!(
            conformal_a_tau_alpha_grid(&coarse, &MetricSpec::Euclidean, 1.0, 1.0),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn v_identity_converges_at_second_order_on_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = WaveField::random(3, 3, &mut rng);
        let p = params(1.0, 3.0, 3);
        let mut errs = Vec::new();
        for m in [9usize, 17, 33] {
            let h = 0.4 / (m - 1) as f64;
            let grid = Grid3 {
                shape: [m, m, m],
                origin: [-0.2; 3],
                spacing: h,
            };
            let gf = GridField3::sample(grid.clone(), &u);
            let centre = grid.index(m / 2, m / 2, m / 2);
            let v = v_of_u_grid(&gf, &MetricSpec::Euclidean, &p).unwrap();
            let exact = v_of_u(&u, &MetricSpec::Euclidean, &p, &grid.position(centre)).unwrap();
            let e = (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| (v[centre].get(i, j) - exact.get(i, j)).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order > 1.8, "{errs:?}");
        }
    }

    #[test]
    fn field_file_round_trip() {
        let header = FieldHeader {
            field: "u".into(),
            domain: DomainSpec::Ball { radius: 1.0 },
            shape: vec![2, 2, 1],
            origin: vec![0.0; 3],
            spacing: 0.5,
        };
        let data = vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE];
        let mut buf = Vec::new();
        write_field(&mut buf, &header, &data).unwrap();
        let (h, d) = read_field(&buf[..]).unwrap();
        assert_eq!(h, header);
        assert_eq!(d, data);
        let mut csv = Vec::new();
        write_csv(&mut csv, &["a", "b"], &[&[1.0, 2.0], &[0.5, 0.25]]).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "a,b\n1.0,0.5\n2.0,0.25\n");
    }
}
