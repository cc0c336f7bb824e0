//! Radially symmetric Dirichlet problems on balls and annuli.
//!
//! The unknown `u(r)` is discretized on a (possibly graded) radial grid and
//! the equation `f(λ(g⁻¹V[u])) = c·ψ·e^{2ςu}` is solved by damped Newton
//! with a tridiagonal Jacobian. Infinite boundary data are reached through
//! the increasing family with boundary values `log k`.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::ConeSpec;
use crate::error::{Error, Result};
use crate::geometry::{v_background, DomainSpec, FieldSpec, MetricSpec};
use crate::linalg::solve_tridiagonal;
use crate::problem::{interpolate, BoundarySpec, Prepared, ProblemFile, RadialFn};
use crate::registry::OperatorRegistry;
use crate::solver::{Artifact, SolveOptions, SolveOutcome, Solver};
use crate::symfunc::{LambdaVec, Operator};
use crate::transform::ConformalParams;

pub const MAX_NEWTON_ITERATIONS: usize = 200;
pub const MAX_HALVINGS: usize = 40;
const ARMIJO_SLOPE: f64 = 1e-4;
/// Tolerance for the nodewise ordering checks.
pub const ORDER_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Grids

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RadialDomain {
    Ball { radius: f64 },
    Annulus { inner: f64, outer: f64 },
}

impl RadialDomain {
    pub fn from_spec(d: &DomainSpec) -> Result<Self> {
        match *d {
            DomainSpec::Ball { radius } => Ok(Self::Ball { radius }),
            DomainSpec::Annulus { inner, outer } => Ok(Self::Annulus { inner, outer }),
            _ => Err(Error::Unsupported(
                "the radial solver handles balls and annuli only".into(),
            )),
        }
    }

    pub fn sigma(&self, r: f64) -> f64 {
        match *self {
            Self::Ball { radius } => radius - r,
            Self::Annulus { inner, outer } => (r - inner).min(outer - r),
        }
    }

    fn span(&self) -> (f64, f64) {
        match *self {
            Self::Ball { radius } => (0.0, radius),
            Self::Annulus { inner, outer } => (inner, outer),
        }
    }

    fn has_centre(&self) -> bool {
        matches!(self, Self::Ball { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    pub domain: RadialDomain,
    pub r: Vec<f64>,
}

/// Points on `[0, 1]`: uniform on `[0, 1 − split]`, then geometric in
/// `s + s0` toward 1, with matching spacing at the junction.
fn graded_unit(nodes: usize, s0: f64, split: f64) -> Vec<f64> {
    let intervals = nodes - 1;
    let span = ((split + s0) / s0).ln();
    let a = 1.0 - split;
    let b = (split + s0) * span;
    let m = ((a * intervals as f64 / (a + b)).round() as usize).clamp(1, intervals - 1);
    let nl = intervals - m;
    let mut t: Vec<f64> = (0..=m).map(|i| a * i as f64 / m as f64).collect();
    for j in 1..=nl {
        let s = if j == nl {
            0.0
        } else {
            (split + s0) * (-(j as f64) * span / nl as f64).exp() - s0
        };
        t.push(1.0 - s);
    }
    t
}

impl RadialGrid {
    pub fn uniform(domain: RadialDomain, nodes: usize) -> Result<Self> {
        Self::check_nodes(nodes)?;
        let t: Vec<f64> = (0..nodes).map(|i| i as f64 / (nodes - 1) as f64).collect();
        Ok(Self::from_unit(domain, &t))
    }

    /// Clustered toward the boundary: the last cell has width about `s0`
    /// times the radius.
    pub fn graded(domain: RadialDomain, nodes: usize, s0: f64) -> Result<Self> {
        Self::check_nodes(nodes)?;
        let t = match domain {
            RadialDomain::Ball { .. } => graded_unit(nodes, s0, 0.1),
            RadialDomain::Annulus { .. } => {
                let half = graded_unit(nodes / 2 + 1, 2.0 * s0, 0.1);
                let mut t: Vec<f64> = half.iter().rev().map(|h| 0.5 - 0.5 * h).collect();
                t.extend(half.iter().skip(1).map(|h| 0.5 + 0.5 * h));
                t
            }
        };
        Ok(Self::from_unit(domain, &t))
    }

    /// Boundary cell width `0.25/2^K` for the family up to `k = 2^K`.
    pub fn for_levels(domain: RadialDomain, nodes: usize, levels: u32) -> Result<Self> {
        Self::graded(domain, nodes, 0.25 / f64::from(1u32 << levels.min(30)))
    }

    fn check_nodes(nodes: usize) -> Result<()> {
        if nodes < 8 {
            return Err(Error::Resolution(format!("radial grid needs at least 8 nodes, got {nodes}")));
        }
        Ok(())
    }

    fn from_unit(domain: RadialDomain, t: &[f64]) -> Self {
        let (a, b) = domain.span();
        let mut r: Vec<f64> = t.iter().map(|t| a + (b - a) * t).collect();
        let last = r.len() - 1;
        r[0] = a;
        r[last] = b;
        Self { domain, r }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.r.iter().map(|&r| self.domain.sigma(r)).collect()
    }

    /// Largest ratio between neighbouring cell widths, a grading measure.
    pub fn max_ratio(&self) -> f64 {
        self.r
            .windows(3)
            .map(|w| {
                let (a, b) = (w[1] - w[0], w[2] - w[1]);
                (a / b).max(b / a)
            })
            .fold(1.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Problem and reduction

/// Radial and tangential data of the background at a radius.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RadialBackground {
    /// Conformal factor `w` of `g = e^{2w}δ` and its radial derivative.
    pub w: f64,
    pub dw: f64,
    /// Eigenvalues of `g⁻¹A` in the radial and tangential directions.
    pub a_rad: f64,
    pub a_tan: f64,
}

#[derive(Clone)]
pub struct RadialProblem {
    pub operator: Arc<dyn Operator>,
    pub params: ConformalParams,
    pub domain: RadialDomain,
    pub metric: MetricSpec,
    pub psi: RadialFn,
}

impl RadialProblem {
    pub fn new(
        operator: Arc<dyn Operator>,
        params: ConformalParams,
        domain: RadialDomain,
        metric: MetricSpec,
        psi: RadialFn,
    ) -> Result<Self> {
        if operator.dim() != params.n {
            return Err(Error::Parameter(format!(
                "operator dimension {} differs from n = {}",
                operator.dim(),
                params.n
            )));
        }
        if let MetricSpec::ConformalToEuclidean {
            factor: FieldSpec::Polynomial { c2, .. },
        } = &metric
        {
            if *c2 != 0.0 {
                return Err(Error::Unsupported("the radial solver needs a radial metric".into()));
            }
        }
        Ok(Self {
            operator,
            params,
            domain,
            metric,
            psi,
        })
    }

    pub fn from_prepared(p: &Prepared) -> Result<Self> {
        Self::new(
            p.operator.clone(),
            p.params.clone(),
            RadialDomain::from_spec(&p.file.domain)?,
            p.file.metric.clone(),
            p.psi.clone(),
        )
    }

    pub fn cone(&self) -> ConeSpec {
        self.operator.cone()
    }

    /// Same problem with `ψ` multiplied by `s`.
    pub fn scaled_psi(&self, s: f64) -> Self {
        let psi = self.psi.clone();
        Self {
            psi: Arc::new(move |r| s * psi(r)),
            ..self.clone()
        }
    }

    pub fn background(&self, r: f64) -> Result<RadialBackground> {
        let n = self.params.n;
        let mut x = vec![0.0; n];
        x[0] = r;
        let mp = self.metric.at(&x)?;
        let a = v_background(&self.metric, &self.params, &x)?;
        let e = (-2.0 * mp.w).exp();
        Ok(RadialBackground {
            w: mp.w,
            dw: mp.dw[0],
            a_rad: e * a.get(0, 0),
            a_tan: e * a.get(1, 1),
        })
    }

    /// `c·ψ(r)`.
    fn rhs_weight(&self, r: f64) -> f64 {
        self.params.v_rhs_const * (self.psi)(r)
    }
}

/// Radial and tangential eigenvalues of `g⁻¹V[u]` from `(u′, u″)`; at the
/// centre `u′/r` is replaced by `u″`.
fn reduce(p: &ConformalParams, bg: &RadialBackground, du: f64, d2u: f64, r: f64) -> (f64, f64) {
    let nf = p.n as f64;
    let e = (-2.0 * bg.w).exp();
    if r == 0.0 {
        let v = e * (nf - p.rho) * d2u;
        return (v + bg.a_rad, v + bg.a_tan);
    }
    let lr = e * ((1.0 - p.rho) * d2u + (nf - 1.0) * du / r + (nf - 2.0 + p.rho) * bg.dw * du + p.gamma_plus_rho * du * du);
    let lt = e * (d2u + (nf - 1.0 - p.rho) * du / r + (nf - 2.0 - p.rho) * bg.dw * du + p.gamma * du * du);
    (lr + bg.a_rad, lt + bg.a_tan)
}

fn spread(n: usize, lr: f64, lt: f64) -> Vec<f64> {
    let mut v = vec![lt; n];
    v[0] = lr;
    v
}

/// The `n` eigenvalues of `g⁻¹V[u]` at radius `r`: the radial one first,
/// then the tangential one with multiplicity `n − 1`.
pub fn radial_reduce(problem: &RadialProblem, du: f64, d2u: f64, r: f64) -> Result<LambdaVec> {
    if r == 0.0 && !problem.domain.has_centre() {
        return Err(Error::Domain("r = 0 lies outside an annulus".into()));
    }
    let bg = problem.background(r)?;
    let (lr, lt) = reduce(&problem.params, &bg, du, d2u, r);
    LambdaVec::new(spread(problem.params.n, lr, lt))
}

// ---------------------------------------------------------------------------
// Discrete system

struct Stencil {
    /// Weights of `(u_{i−1}, u_i, u_{i+1})` for `u″` and `u′`.
    d2: [f64; 3],
    d1: [f64; 3],
}

struct Discretization<'a> {
    problem: &'a RadialProblem,
    grid: &'a RadialGrid,
    stencils: Vec<Stencil>,
    backgrounds: Vec<RadialBackground>,
    weights: Vec<f64>,
    cone: ConeSpec,
}

struct Evaluation {
    residual: Vec<f64>,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    margins: Vec<f64>,
}

enum EvalOutcome {
    Ok(Evaluation),
    Infeasible { node: usize, inequality: String },
}

impl<'a> Discretization<'a> {
    fn new(problem: &'a RadialProblem, grid: &'a RadialGrid) -> Result<Self> {
        let r = &grid.r;
        let stencils = (0..r.len())
            .map(|i| {
                if i == 0 || i + 1 == r.len() {
                    let h = if i == 0 { r[1] - r[0] } else { r[i] - r[i - 1] };
                    // Only the centre row uses this, as (u₁ − u₀)·2/h².
                    Stencil {
                        d2: [0.0, -2.0 / (h * h), 2.0 / (h * h)],
                        d1: [0.0; 3],
                    }
                } else {
                    let hm = r[i] - r[i - 1];
                    let hp = r[i + 1] - r[i];
                    Stencil {
                        d2: [2.0 / (hm * (hm + hp)), -2.0 / (hm * hp), 2.0 / (hp * (hm + hp))],
                        d1: [-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp))],
                    }
                }
            })
            .collect();
        let backgrounds = r.iter().map(|&x| problem.background(x)).collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = r.iter().map(|&x| problem.rhs_weight(x)).collect();
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Parameter(format!("ψ is not positive at r = {}", r[i])));
        }
        Ok(Self {
            problem,
            grid,
            stencils,
            backgrounds,
            weights,
            cone: problem.cone(),
        })
    }

    fn first_unknown(&self) -> usize {
        usize::from(!self.problem.domain.has_centre())
    }

    fn unknowns(&self) -> std::ops::Range<usize> {
        self.first_unknown()..self.grid.len() - 1
    }

    /// Derivative estimates `(u′, u″)` at node `i`.
    fn derivatives(&self, u: &[f64], i: usize) -> (f64, f64) {
        let s = &self.stencils[i];
        if i == 0 {
            return (0.0, s.d2[1] * u[0] + s.d2[2] * u[1]);
        }
        let v = [u[i - 1], u[i], u[i + 1]];
        let dot = |w: &[f64; 3]| w[0] * v[0] + w[1] * v[1] + w[2] * v[2];
        (dot(&s.d1), dot(&s.d2))
    }

    fn lambda_at(&self, u: &[f64], i: usize) -> Vec<f64> {
        let (d1, d2) = self.derivatives(u, i);
        let (lr, lt) = reduce(&self.problem.params, &self.backgrounds[i], d1, d2, self.grid.r[i]);
        spread(self.problem.params.n, lr, lt)
    }

    fn evaluate(&self, u: &[f64]) -> Result<EvalOutcome> {
        let p = &self.problem.params;
        let nf = p.n as f64;
        let len = self.grid.len();
        let mut ev = Evaluation {
            residual: vec![0.0; len],
            lower: vec![0.0; len],
            diag: vec![1.0; len],
            upper: vec![0.0; len],
            margins: vec![f64::INFINITY; len],
        };
        for i in self.unknowns() {
            let lam = self.lambda_at(u, i);
            if let Err(e) = self.cone.check(&lam) {
                let inequality = match e {
                    Error::Feasibility { inequality, .. } => inequality,
                    other => other.to_string(),
                };
                return Ok(EvalOutcome::Infeasible { node: i, inequality });
            }
            ev.margins[i] = self.cone.depth(&lam);
            let (f, g) = self.problem.operator.value_grad(&lam)?;
            let fr = g[0];
            let ft: f64 = g[1..].iter().sum();
            let source = self.weights[i] * (2.0 * p.varsigma * u[i]).exp();
            ev.residual[i] = f - source;
            let dsource = 2.0 * p.varsigma * source;
            let bg = &self.backgrounds[i];
            let e = (-2.0 * bg.w).exp();
            let s = &self.stencils[i];
            if i == 0 {
                let c = (fr + ft) * e * (nf - p.rho);
                ev.diag[0] = c * s.d2[1] - dsource;
                ev.upper[0] = c * s.d2[2];
                continue;
            }
            let r = self.grid.r[i];
            let (d1, _) = self.derivatives(u, i);
            let c2 = e * (fr * (1.0 - p.rho) + ft);
            let c1 = e
                * (fr * ((nf - 1.0) / r + (nf - 2.0 + p.rho) * bg.dw + 2.0 * p.gamma_plus_rho * d1)
                    + ft * ((nf - 1.0 - p.rho) / r + (nf - 2.0 - p.rho) * bg.dw + 2.0 * p.gamma * d1));
            ev.lower[i] = c2 * s.d2[0] + c1 * s.d1[0];
            ev.diag[i] = c2 * s.d2[1] + c1 * s.d1[1] - dsource;
            ev.upper[i] = c2 * s.d2[2] + c1 * s.d1[2];
        }
        Ok(EvalOutcome::Ok(ev))
    }

    /// `max |F_i / J_ii|` over the unknowns.
    fn scaled_norm(&self, ev: &Evaluation) -> (f64, usize) {
        self.unknowns()
            .map(|i| ((ev.residual[i] / ev.diag[i]).abs(), i))
            .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
    }
}

// ---------------------------------------------------------------------------
// Newton

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    pub residual: f64,
    pub step: f64,
    pub halvings: usize,
    pub min_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialSolution {
    pub r: Vec<f64>,
    pub sigma: Vec<f64>,
    pub u: Vec<f64>,
    /// Normalized cone depth of `λ(g⁻¹V[u])` per node (infinite at
    /// Dirichlet nodes).
    pub margins: Vec<f64>,
    pub history: Vec<NewtonStep>,
    pub residual: f64,
    /// Member index `k` when part of the increasing family.
    pub k: Option<u64>,
    pub boundary_value: f64,
}

impl RadialSolution {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Linear interpolation in `r`.
    pub fn at(&self, r: f64) -> f64 {
        interpolate(&self.r, &self.u, r)
    }
}

fn set_boundary(grid: &RadialGrid, u: &mut [f64], value: f64) {
    let last = u.len() - 1;
    u[last] = value;
    if !grid.domain.has_centre() {
        u[0] = value;
    }
}

fn newton(disc: &Discretization, mut u: Vec<f64>, tol: f64) -> Result<(Vec<f64>, Evaluation, Vec<NewtonStep>, f64)> {
    let mut history = Vec::new();
    let first = disc.first_unknown();
    let end = disc.grid.len() - 1;
    let mut ev = match disc.evaluate(&u)? {
        EvalOutcome::Ok(ev) => ev,
        EvalOutcome::Infeasible { node, inequality } => {
            return Err(Error::InfeasibleNode {
                node,
                position: vec![disc.grid.r[node]],
                inequality,
            })
        }
    };
    for _ in 0..MAX_NEWTON_ITERATIONS {
        let (norm, _) = disc.scaled_norm(&ev);
        let min_margin = disc.unknowns().map(|i| ev.margins[i]).fold(f64::INFINITY, f64::min);
        if norm < tol {
            history.push(NewtonStep {
                residual: norm,
                step: 0.0,
                halvings: 0,
                min_margin,
            });
            return Ok((u, ev, history, norm));
        }
        let rhs: Vec<f64> = (first..end).map(|i| -ev.residual[i]).collect();
        let lower: Vec<f64> = (first..end).map(|i| ev.lower[i]).collect();
        let diag: Vec<f64> = (first..end).map(|i| ev.diag[i]).collect();
        let upper: Vec<f64> = (first..end).map(|i| ev.upper[i]).collect();
        let du = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
        let mut t = 1.0;
        let mut accepted = None;
        let mut blocking = 0;
        for halvings in 0..=MAX_HALVINGS {
            let mut trial = u.clone();
            for (j, d) in du.iter().enumerate() {
                trial[first + j] += t * d;
            }
            match disc.evaluate(&trial)? {
                EvalOutcome::Infeasible { node, .. } => blocking = node,
                EvalOutcome::Ok(next) => {
                    let (nn, worst) = disc.scaled_norm(&next);
                    if nn <= (1.0 - ARMIJO_SLOPE * t) * norm {
                        accepted = Some((trial, next, halvings));
                        break;
                    }
                    blocking = worst;
                }
            }
            t *= 0.5;
        }
        let Some((trial, next, halvings)) = accepted else {
            return Err(Error::LineSearch {
                node: blocking,
                position: vec![disc.grid.r[blocking]],
                halvings: MAX_HALVINGS,
            });
        };
        history.push(NewtonStep {
            residual: norm,
            step: t,
            halvings,
            min_margin,
        });
        u = trial;
        ev = next;
    }
    let (norm, _) = disc.scaled_norm(&ev);
    Err(Error::NonConvergence {
        iterations: MAX_NEWTON_ITERATIONS,
        residual: norm,
    })
}

fn solve_from(
    problem: &RadialProblem,
    grid: &RadialGrid,
    boundary: f64,
    mut u0: Vec<f64>,
    tol: f64,
) -> Result<RadialSolution> {
    let disc = Discretization::new(problem, grid)?;
    set_boundary(grid, &mut u0, boundary);
    let (u, ev, history, residual) = newton(&disc, u0, tol)?;
    Ok(RadialSolution {
        r: grid.r.clone(),
        sigma: grid.sigma(),
        u,
        margins: ev.margins,
        history,
        residual,
        k: None,
        boundary_value: boundary,
    })
}

// ---------------------------------------------------------------------------
// Admissible start and the C⁰ bracket

/// The bowl `b r²/2` and the constants bounding a solution relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C0Bracket {
    pub bowl_curvature: f64,
    /// `½ς⁻¹ log(inf f(w)/(c sup ψ))` and `½ς⁻¹ log(sup f(w)/(c inf ψ))`.
    pub a1: f64,
    pub a2: f64,
    /// Bounds on `u − w`.
    pub lower: f64,
    pub upper: f64,
}

impl C0Bracket {
    /// Largest violation of `lower ≤ u − w ≤ upper` over the nodes.
    pub fn violation(&self, sol: &RadialSolution) -> f64 {
        sol.r
            .iter()
            .zip(&sol.u)
            .map(|(r, u)| {
                let d = u - 0.5 * self.bowl_curvature * r * r;
                (self.lower - d).max(d - self.upper).max(0.0)
            })
            .fold(0.0, f64::max)
    }
}

/// Finds an admissible bowl on the grid and the bracket for boundary value
/// `phi`; the bowl shifted by `lower` is a starting iterate below the
/// solution.
pub fn c0_bracket(problem: &RadialProblem, grid: &RadialGrid, phi: f64) -> Result<C0Bracket> {
    let disc = Discretization::new(problem, grid)?;
    let vs = problem.params.varsigma;
    for j in 0..=30 {
        let b = 0.5f64.powi(j);
        let w: Vec<f64> = grid.r.iter().map(|r| 0.5 * b * r * r).collect();
        let mut fmin = f64::INFINITY;
        let mut fmax = 0.0f64;
        let mut ok = true;
        for i in 0..grid.len() {
            let lam = disc.lambda_at_exact(b, i);
            if !disc.cone.contains(&lam) {
                ok = false;
                break;
            }
            let f = problem.operator.value(&lam)?;
            fmin = fmin.min(f / disc.weights[i]);
            fmax = fmax.max(f / disc.weights[i]);
        }
        if !ok {
            continue;
        }
        let a1 = 0.5 / vs * fmin.ln();
        let a2 = 0.5 / vs * fmax.ln();
        let sup_w = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let inf_w = w.iter().copied().fold(f64::INFINITY, f64::min);
        let boundary_w: Vec<f64> = if grid.domain.has_centre() {
            vec![w[w.len() - 1]]
        } else {
            vec![w[0], w[w.len() - 1]]
        };
        let inf_phi = boundary_w.iter().map(|bw| phi - bw).fold(f64::INFINITY, f64::min);
        let sup_phi = boundary_w.iter().map(|bw| phi - bw).fold(f64::NEG_INFINITY, f64::max);
        return Ok(C0Bracket {
            bowl_curvature: b,
            a1,
            a2,
            lower: inf_phi.min(a1 - sup_w),
            upper: sup_phi.max(a2 - inf_w),
        });
    }
    Err(Error::Construction(
        "no bowl b r²/2 with b >= 2^-30 is admissible on the grid".into(),
    ))
}

impl Discretization<'_> {
    /// Eigenvalues for the exact bowl `b r²/2`.
    fn lambda_at_exact(&self, b: f64, i: usize) -> Vec<f64> {
        let r = self.grid.r[i];
        let (lr, lt) = reduce(&self.problem.params, &self.backgrounds[i], b * r, b, r);
        spread(self.problem.params.n, lr, lt)
    }
}

fn start_from_bracket(grid: &RadialGrid, br: &C0Bracket) -> Vec<f64> {
    grid.r.iter().map(|r| 0.5 * br.bowl_curvature * r * r + br.lower).collect()
}

/// Dirichlet problem with constant boundary value `phi`.
pub fn solve_finite(problem: &RadialProblem, grid: &RadialGrid, phi: f64, tol: f64) -> Result<RadialSolution> {
    let br = c0_bracket(problem, grid, phi)?;
    solve_from(problem, grid, phi, start_from_bracket(grid, &br), tol)
}

// ---------------------------------------------------------------------------
// Infinite boundary data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    /// `min (u^{(2k)} − u^{(k)})` over consecutive pairs and nodes.
    pub min_increment: f64,
    pub pairs: usize,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfiniteSolution {
    pub levels: Vec<RadialSolution>,
    /// Boundary growth factor ε in `ε log k`.
    pub epsilon: f64,
    /// Whether `(γ, …, γ, γ+ρ+1)` lies in the cone.
    pub structure_holds: bool,
    pub monotone: MonotoneReport,
    /// Richardson extrapolation of the family; `None` at the boundary.
    pub limit: Vec<Option<f64>>,
    /// Change of the extrapolation between the last two levels.
    pub limit_change: Vec<f64>,
    pub settle_tol: f64,
    /// Nodes `0..settled` (from the centre, or from the middle for annuli)
    /// form the band where the extrapolation has settled.
    pub settled: Vec<bool>,
}

impl InfiniteSolution {
    pub fn r(&self) -> &[f64] {
        &self.levels[0].r
    }

    pub fn sigma(&self) -> &[f64] {
        &self.levels[0].sigma
    }

    /// Radius range `[0, r]` of the settled band for a ball.
    pub fn settled_radius(&self) -> f64 {
        let r = self.r();
        let mut last = 0.0;
        for (i, s) in self.settled.iter().enumerate() {
            if !s {
                break;
            }
            last = r[i];
        }
        last
    }

    /// Limit values on the settled band, as `(r, u)` pairs.
    pub fn settled_limit(&self) -> Vec<(f64, f64)> {
        self.r()
            .iter()
            .zip(&self.limit)
            .zip(&self.settled)
            .filter_map(|((r, l), s)| if *s { l.map(|v| (*r, v)) } else { None })
            .collect()
    }

    pub fn limit_at(&self, r: f64) -> Option<f64> {
        let pts = self.settled_limit();
        if pts.is_empty() || r < pts[0].0 || r > pts[pts.len() - 1].0 {
            return None;
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        Some(interpolate(&xs, &ys, r))
    }
}

/// Richardson tables of a sequence with error proportional to `1/k`.
fn richardson(levels: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mut table: Vec<Vec<f64>> = levels.to_vec();
    let mut order = 1;
    while table.len() > 2 && order <= 2 {
        let f = f64::from(1u32 << order);
        table = table
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (f * b - a) / (f - 1.0)).collect())
            .collect();
        order += 1;
    }
    let last = table[table.len() - 1].clone();
    let prev = if table.len() > 1 {
        table[table.len() - 2].clone()
    } else {
        levels[levels.len() - 2].clone()
    };
    (last, prev)
}

/// Solves for `k = 1, 2, 4, …, 2^K` with boundary values `ε log k`, each
/// warm-started from the previous member.
pub fn solve_infinite(
    problem: &RadialProblem,
    grid: &RadialGrid,
    levels: u32,
    tol: f64,
    settle_tol: f64,
) -> Result<InfiniteSolution> {
    if levels < 2 {
        return Err(Error::Parameter(format!("the increasing family needs K >= 2, got {levels}")));
    }
    let p = &problem.params;
    let mut corner = vec![p.gamma; p.n];
    corner[p.n - 1] = p.gamma_plus_rho + 1.0;
    let structure_holds = problem.cone().contains(&corner);
    let epsilon = 1.0;
    let br = c0_bracket(problem, grid, 0.0)?;
    let mut u = start_from_bracket(grid, &br);
    let mut sols: Vec<RadialSolution> = Vec::new();
    for j in 0..=levels {
        let k = 1u64 << j;
        let phi = epsilon * (k as f64).ln();
        // A steep boundary layer can defeat the warm start; restart cold.
        let mut s = match solve_from(problem, grid, phi, u, tol) {
            Ok(s) => s,
            Err(Error::LineSearch { .. } | Error::NonConvergence { .. }) => solve_finite(problem, grid, phi, tol)?,
            Err(e) => return Err(e),
        };
        s.k = Some(k);
        u = s.u.clone();
        sols.push(s);
    }
    let mut min_increment = f64::INFINITY;
    for w in sols.windows(2) {
        for (a, b) in w[0].u.iter().zip(&w[1].u) {
            min_increment = min_increment.min(b - a);
        }
    }
    let monotone = MonotoneReport {
        min_increment,
        pairs: sols.len() - 1,
        holds: min_increment >= -ORDER_TOL,
    };
    if !monotone.holds {
        return Err(Error::Scheme(format!(
            "increasing family decreases by {:e}; refine the grid",
            -min_increment
        )));
    }
    let us: Vec<Vec<f64>> = sols.iter().map(|s| s.u.clone()).collect();
    let (last, prev) = richardson(&us);
    let boundary = |i: usize| i + 1 == grid.len() || (i == 0 && !grid.domain.has_centre());
    let limit: Vec<Option<f64>> = (0..grid.len()).map(|i| (!boundary(i)).then_some(last[i])).collect();
    let limit_change: Vec<f64> = (0..grid.len())
        .map(|i| if boundary(i) { f64::INFINITY } else { (last[i] - prev[i]).abs() })
        .collect();
    // The settled band grows from the point farthest from the boundary.
    let mut settled = vec![false; grid.len()];
    let sig = grid.sigma();
    let deepest = (0..grid.len()).max_by(|&a, &b| sig[a].total_cmp(&sig[b])).unwrap_or(0);
    let mut i = deepest;
    while i < grid.len() && limit_change[i] < settle_tol {
        settled[i] = true;
        i += 1;
    }
    let mut i = deepest;
    while i > 0 && limit_change[i - 1] < settle_tol && settled[i] {
        settled[i - 1] = true;
        i -= 1;
    }
    Ok(InfiniteSolution {
        levels: sols,
        epsilon,
        structure_holds,
        monotone,
        limit,
        limit_change,
        settle_tol,
        settled,
    })
}

/// `C = max (u^{(k)} − ũ)` over all members and the settled nodes of the
/// reference limit `ũ` (same grid).
pub fn c0_upper_constant(family: &InfiniteSolution, reference: &InfiniteSolution) -> Result<f64> {
    if family.r() != reference.r() {
        return Err(Error::Parameter("c0 comparison needs identical grids".into()));
    }
    let mut c = f64::NEG_INFINITY;
    for s in &family.levels {
        for i in 0..s.u.len() {
            if let (true, Some(v)) = (reference.settled[i], reference.limit[i]) {
                c = c.max(s.u[i] - v);
            }
        }
    }
    Ok(c)
}

/// `C₀ = max(−log σ − u)` over settled nodes with `σ < collar`.
pub fn lower_asymptotic_constant(sol: &InfiniteSolution, collar: f64) -> f64 {
    sol.sigma()
        .iter()
        .zip(&sol.limit)
        .zip(&sol.settled)
        .filter(|((s, _), ok)| **ok && **s < collar && **s > 0.0)
        .filter_map(|((s, l), _)| l.map(|v| -s.ln() - v))
        .fold(f64::NEG_INFINITY, f64::max)
}

// ---------------------------------------------------------------------------
// Asymptotic rate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandFit {
    /// Lower end of the settled part of the band that was fitted.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub points: usize,
    pub intercept: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub estimate: f64,
    /// Spread of the intercept over the alternative bands.
    pub spread: f64,
    pub fits: Vec<BandFit>,
    /// `½ log(c/ψ)` for constant boundary `ψ`.
    pub target: Option<f64>,
    /// `[½ log(c/sup ψ), ½ log(c/inf ψ)]` over the boundary.
    pub bracket: (f64, f64),
}

pub const DEFAULT_RATE_BAND: (f64, f64) = (0.05, 0.2);
const ALTERNATIVE_BANDS: [(f64, f64); 2] = [(0.02, 0.1), (0.03, 0.15)];

/// Least-squares quadratic `a + bx + cx²`; returns `a`.
fn quadratic_intercept(x: &[f64], y: &[f64]) -> f64 {
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut m = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for (&xi, &yi) in x.iter().zip(y) {
        let t = xi / scale;
        let p = [1.0, t, t * t];
        for a in 0..3 {
            rhs[a] += p[a] * yi;
            for b in 0..3 {
                m[a][b] += p[a] * p[b];
            }
        }
    }
    // Gaussian elimination with partial pivoting.
    for c in 0..3 {
        let piv = (c..3).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap_or(c);
        m.swap(c, piv);
        rhs.swap(c, piv);
        for r in c + 1..3 {
            let f = m[r][c] / m[c][c];
            for k in c..3 {
                m[r][k] -= f * m[c][k];
            }
            rhs[r] -= f * rhs[c];
        }
    }
    let mut sol = [0.0; 3];
    for c in (0..3).rev() {
        let s: f64 = (c + 1..3).map(|k| m[c][k] * sol[k]).sum();
        sol[c] = (rhs[c] - s) / m[c][c];
    }
    sol[0]
}

/// Fits the settled part of `band`, which must cover at least its upper half.
fn band_fit(sol: &InfiniteSolution, band: (f64, f64)) -> Result<BandFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ((s, l), ok) in sol.sigma().iter().zip(&sol.limit).zip(&sol.settled) {
        if *s >= band.0 && *s <= band.1 && *ok {
            if let Some(v) = l {
                xs.push(*s);
                ys.push(v + s.ln());
            }
        }
    }
    let low = xs.iter().copied().fold(f64::INFINITY, f64::min);
    if xs.len() < 4 || low > 0.5 * (band.0 + band.1) {
        return Err(Error::RateUnavailable(format!(
            "band σ ∈ [{}, {}] has {} settled nodes, from σ = {low}",
            band.0,
            band.1,
            xs.len()
        )));
    }
    Ok(BandFit {
        sigma_min: low,
        sigma_max: band.1,
        points: xs.len(),
        intercept: quadratic_intercept(&xs, &ys),
    })
}

/// Extrapolates `u + log σ` to `σ → 0` from the settled limit.
pub fn asymptotic_rate(problem: &RadialProblem, sol: &InfiniteSolution, band: (f64, f64)) -> Result<RateEstimate> {
    if problem.params.varsigma != 1.0 {
        return Err(Error::RateUnavailable("rate extraction needs ς = 1".into()));
    }
    let main = band_fit(sol, band)?;
    let mut fits = vec![main.clone()];
    for b in ALTERNATIVE_BANDS {
        if let Ok(f) = band_fit(sol, b) {
            fits.push(f);
        }
    }
    let hi = fits.iter().map(|f| f.intercept).fold(f64::NEG_INFINITY, f64::max);
    let lo = fits.iter().map(|f| f.intercept).fold(f64::INFINITY, f64::min);
    let (a, b) = problem.domain.span();
    let boundary_psi: Vec<f64> = if problem.domain.has_centre() {
        vec![(problem.psi)(b)]
    } else {
        vec![(problem.psi)(a), (problem.psi)(b)]
    };
    let sup = boundary_psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inf = boundary_psi.iter().copied().fold(f64::INFINITY, f64::min);
    let p = &problem.params;
    Ok(RateEstimate {
        estimate: main.intercept,
        spread: hi - lo,
        fits,
        target: (sup == inf).then(|| p.boundary_rate(sup)),
        bracket: (p.boundary_rate(sup), p.boundary_rate(inf)),
    })
}

// ---------------------------------------------------------------------------
// Exhaustion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExhaustionResult {
    pub radii: Vec<f64>,
    /// Settled limits `(r, u)` per radius.
    pub limits: Vec<Vec<(f64, f64)>>,
    /// `max (u_{j+1} − u_j)` on the nodes of the smaller ball.
    pub max_increase: f64,
    /// `max (u̲ − u_j)` over all settled nodes.
    pub max_below_lower: f64,
    /// `max |u_last − u̲|` on `r ≤ compact`.
    pub compact_gap: f64,
    pub compact: f64,
}

/// Infinite-boundary problems on balls of increasing radius, checked for
/// decrease on overlaps and for the lower bound `u ≥ u̲`.
pub fn exhaustion_solve(
    make: &(dyn Fn(f64) -> Result<RadialProblem> + Sync),
    lower: &(dyn Fn(f64) -> f64 + Sync),
    radii: &[f64],
    levels: u32,
    nodes: usize,
    tol: f64,
    compact: f64,
) -> Result<ExhaustionResult> {
    let sols: Vec<InfiniteSolution> = radii
        .par_iter()
        .map(|&radius| {
            let problem = make(radius)?;
            let grid = RadialGrid::for_levels(RadialDomain::Ball { radius }, nodes, levels)?;
            solve_infinite(&problem, &grid, levels, tol, 1e-3)
        })
        .collect::<Result<_>>()?;
    let limits: Vec<Vec<(f64, f64)>> = sols.iter().map(|s| s.settled_limit()).collect();
    let mut max_increase = f64::NEG_INFINITY;
    for (j, w) in sols.windows(2).enumerate() {
        for &(r, u) in &limits[j] {
            if let Some(next) = w[1].limit_at(r) {
                max_increase = max_increase.max(next - u);
            }
        }
    }
    let max_below_lower = limits
        .iter()
        .flatten()
        .map(|&(r, u)| lower(r) - u)
        .fold(f64::NEG_INFINITY, f64::max);
    let compact_gap = limits
        .last()
        .map(|l| {
            l.iter()
                .filter(|(r, _)| *r <= compact)
                .map(|&(r, u)| (u - lower(r)).abs())
                .fold(0.0, f64::max)
        })
        .unwrap_or(f64::NAN);
    Ok(ExhaustionResult {
        radii: radii.to_vec(),
        limits,
        max_increase,
        max_below_lower,
        compact_gap,
        compact,
    })
}

// ---------------------------------------------------------------------------
// Barriers

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BarrierSpec {
    /// `ε log(δ²/(kσ+δ²)) + φ`, below the solution on the collar.
    LowerFinite { eps: f64, delta: f64, k: f64, phi: f64 },
    /// `ε log(1 + σ/δ²) + φ`, above the solution on the collar.
    UpperFinite { eps: f64, delta: f64, phi: f64 },
    /// `log(k/(kσ+1)) + ½log((1−ε)²c/(sup ψ+ε)) + 1/(σ+δ) − 1/δ`, a
    /// subsolution on the collar.
    InfiniteLower { eps: f64, delta: f64, k: f64 },
}

impl BarrierSpec {
    pub fn delta(&self) -> f64 {
        match *self {
            Self::LowerFinite { delta, .. } | Self::UpperFinite { delta, .. } | Self::InfiniteLower { delta, .. } => delta,
        }
    }

    /// Value and first two `σ`-derivatives.
    fn jet(&self, s: f64, sup_psi: f64, rate_const: f64) -> (f64, f64, f64) {
        match *self {
            Self::LowerFinite { eps, delta, k, phi } => {
                let q = k * s + delta * delta;
                (eps * (delta * delta / q).ln() + phi, -eps * k / q, eps * k * k / (q * q))
            }
            Self::UpperFinite { eps, delta, phi } => {
                let q = delta * delta + s;
                (eps * (q / (delta * delta)).ln() + phi, eps / q, -eps / (q * q))
            }
            Self::InfiniteLower { eps, delta, k } => {
                let q = k * s + 1.0;
                let c = 0.5 * ((1.0 - eps).powi(2) * rate_const / (sup_psi + eps)).ln();
                let d = s + delta;
                (
                    (k / q).ln() + c + 1.0 / d - 1.0 / delta,
                    -k / q - 1.0 / (d * d),
                    k * k / (q * q) + 2.0 / (d * d * d),
                )
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierViolation {
    pub r: f64,
    pub sigma: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierReport {
    pub barrier: BarrierSpec,
    pub collar_nodes: usize,
    pub violations: Vec<BarrierViolation>,
    pub passed: bool,
}

/// Checks a barrier nodewise on the collar `σ < δ`. For the finite kinds
/// the solution is compared with the barrier; for the infinite kind the
/// subsolution inequality `f(λ(V[h])) ≥ cψe^{2h}` is checked instead.
pub fn barrier_check(problem: &RadialProblem, sol: &RadialSolution, barrier: &BarrierSpec) -> Result<BarrierReport> {
    let delta = barrier.delta();
    let (a, b) = problem.domain.span();
    let sup_psi = if problem.domain.has_centre() {
        (problem.psi)(b)
    } else {
        (problem.psi)(a).max((problem.psi)(b))
    };
    let cone = problem.cone();
    let mut violations = Vec::new();
    let mut collar_nodes = 0;
    for (i, (&r, &s)) in sol.r.iter().zip(&sol.sigma).enumerate() {
        if !(s < delta) {
            continue;
        }
        collar_nodes += 1;
        let (h, hs, hss) = barrier.jet(s, sup_psi, problem.params.rate_const);
        let (lhs, rhs) = match barrier {
            BarrierSpec::LowerFinite { .. } => (sol.u[i], h),
            BarrierSpec::UpperFinite { .. } => (h, sol.u[i]),
            BarrierSpec::InfiniteLower { .. } => {
                if s <= 0.0 {
                    collar_nodes -= 1;
                    continue;
                }
                // σ = R − r (outer) or r − r₀ (inner part of an annulus).
                let outer = problem.domain.span().1 - r <= r - problem.domain.span().0 || problem.domain.has_centre();
                let du = if outer { -hs } else { hs };
                let bg = problem.background(r)?;
                let (lr, lt) = reduce(&problem.params, &bg, du, hss, r);
                let lam = spread(problem.params.n, lr, lt);
                let f = if cone.contains(&lam) {
                    problem.operator.value(&lam)?
                } else {
                    f64::NEG_INFINITY
                };
                (f, problem.rhs_weight(r) * (2.0 * problem.params.varsigma * h).exp())
            }
        };
        if lhs < rhs - ORDER_TOL {
            violations.push(BarrierViolation { r, sigma: s, lhs, rhs });
        }
    }
    Ok(BarrierReport {
        barrier: *barrier,
        collar_nodes,
        passed: violations.is_empty() && collar_nodes > 0,
        violations,
    })
}

pub const BARRIER_EPS: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];
pub const BARRIER_DELTA: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierSearch {
    /// First `(ε, δ)` in search order verifying both finite barriers.
    pub verified: Option<(f64, f64)>,
    pub tried: usize,
    pub lower: Option<BarrierReport>,
    pub upper: Option<BarrierReport>,
}

/// Grid search over [`BARRIER_EPS`] × [`BARRIER_DELTA`] for the finite
/// barriers around a solution with boundary value `phi`.
pub fn barrier_search(problem: &RadialProblem, sol: &RadialSolution, phi: f64) -> Result<BarrierSearch> {
    let mut tried = 0;
    for &eps in &BARRIER_EPS {
        for &delta in &BARRIER_DELTA {
            tried += 1;
            let lo = barrier_check(problem, sol, &BarrierSpec::LowerFinite { eps, delta, k: 1.0, phi })?;
            let up = barrier_check(problem, sol, &BarrierSpec::UpperFinite { eps, delta, phi })?;
            if lo.passed && up.passed {
                return Ok(BarrierSearch {
                    verified: Some((eps, delta)),
                    tried,
                    lower: Some(lo),
                    upper: Some(up),
                });
            }
        }
    }
    Ok(BarrierSearch {
        verified: None,
        tried,
        lower: None,
        upper: None,
    })
}

pub const BARRIER_SLOPES: [f64; 4] = [1.0, 4.0, 16.0, 64.0];

/// First `(ε, δ, k)` over [`BARRIER_EPS`] (ε < 1) × [`BARRIER_DELTA`] ×
/// [`BARRIER_SLOPES`] for which the infinite-boundary lower barrier is a
/// subsolution on its collar.
pub fn subsolution_search(problem: &RadialProblem, sol: &RadialSolution) -> Result<Option<BarrierReport>> {
    for &eps in BARRIER_EPS.iter().filter(|e| **e < 1.0) {
        for &delta in &BARRIER_DELTA {
            for &k in &BARRIER_SLOPES {
                let rep = barrier_check(problem, sol, &BarrierSpec::InfiniteLower { eps, delta, k })?;
                if rep.passed {
                    return Ok(Some(rep));
                }
            }
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scale: f64,
    /// `max (u_{sψ} − u_ψ)`; nonpositive when the ordering holds.
    pub max_excess: f64,
    pub holds: bool,
}

/// Solves with `ψ` and `scale·ψ` (`scale > 1`) and checks `u_{sψ} ≤ u_ψ`.
pub fn comparison_check(problem: &RadialProblem, grid: &RadialGrid, phi: f64, scale: f64, tol: f64) -> Result<ComparisonReport> {
    let a = solve_finite(problem, grid, phi, tol)?;
    let b = solve_finite(&problem.scaled_psi(scale), grid, phi, tol)?;
    let max_excess = a.u.iter().zip(&b.u).map(|(x, y)| y - x).fold(f64::NEG_INFINITY, f64::max);
    Ok(ComparisonReport {
        scale,
        max_excess,
        holds: max_excess <= 1e-8,
    })
}

// ---------------------------------------------------------------------------
// Output

fn csv_profile(sol: &RadialSolution, limit: Option<&InfiniteSolution>) -> Vec<u8> {
    let mut out = String::from("r,sigma,u,u_plus_log_sigma,margin\n");
    for i in 0..sol.r.len() {
        let u = match limit {
            Some(l) => match l.limit[i] {
                Some(v) if l.settled[i] => v,
                _ => sol.u[i],
            },
            None => sol.u[i],
        };
        let s = sol.sigma[i];
        let ul = if s > 0.0 { u + s.ln() } else { f64::NAN };
        let _ = writeln!(out, "{:?},{:?},{:?},{:?},{:?}", sol.r[i], s, u, ul, sol.margins[i]);
    }
    out.into_bytes()
}

/// Plot of `u + log σ` against `σ` with a horizontal line at the target.
pub fn rate_plot_svg(sol: &InfiniteSolution, target: Option<f64>) -> Vec<u8> {
    let pts: Vec<(f64, f64)> = sol
        .sigma()
        .iter()
        .zip(&sol.limit)
        .zip(&sol.settled)
        .filter_map(|((s, l), ok)| match l {
            Some(v) if *ok && *s > 0.0 && *s <= 0.5 => Some((*s, v + s.ln())),
            _ => None,
        })
        .collect();
    crate::report::line_plot_svg("σ", "u + log σ", &pts, target)
}

/// Registry entry for the radial backend.
#[derive(Clone, Copy, Debug, Default)]
pub struct RadialSolver;

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

impl Solver for RadialSolver {
    fn name(&self) -> &'static str {
        "radial"
    }

    fn solve(&self, problem: &ProblemFile, options: &SolveOptions) -> Result<SolveOutcome> {
        let mut file = options.apply(problem);
        if let Some(g) = options.grid {
            file.grid.nodes = g;
        }
        let prepared = file.prepare(&OperatorRegistry::default())?;
        let rp = RadialProblem::from_prepared(&prepared)?;
        let mut report = serde_json::json!({
            "solver": self.name(),
            "inputs": to_value(&file),
            "derived": to_value(&prepared.derived()),
        });
        let mut artifacts = Vec::new();
        match file.boundary {
            BoundarySpec::Finite(phi) => {
                let grid = RadialGrid::uniform(rp.domain, file.grid.nodes)?;
                let br = c0_bracket(&rp, &grid, phi)?;
                let sol = solve_finite(&rp, &grid, phi, file.tol)?;
                let barriers = barrier_search(&rp, &sol, phi)?;
                report["grid"] = serde_json::json!({"nodes": grid.len(), "kind": "uniform"});
                report["newton"] = to_value(&sol.history);
                report["residual"] = to_value(&sol.residual);
                report["min_margin"] = to_value(&sol.min_margin());
                report["c0_bracket"] = serde_json::json!({
                    "bracket": to_value(&br),
                    "violation": br.violation(&sol),
                });
                report["barriers"] = to_value(&barriers);
                artifacts.push(Artifact {
                    name: "profile.csv".into(),
                    bytes: csv_profile(&sol, None),
                });
            }
            BoundarySpec::Infinite(ref cfg) => {
                let grid = RadialGrid::for_levels(rp.domain, file.grid.nodes, cfg.levels)?;
                let inf = solve_infinite(&rp, &grid, cfg.levels, file.tol, 1e-3)?;
                let rate = asymptotic_rate(&rp, &inf, DEFAULT_RATE_BAND);
                let c0 = lower_asymptotic_constant(&inf, 0.2);
                report["grid"] = serde_json::json!({
                    "nodes": grid.len(),
                    "kind": "graded",
                    "max_ratio": grid.max_ratio(),
                });
                report["levels"] = serde_json::Value::Array(
                    inf.levels
                        .iter()
                        .map(|s| {
                            serde_json::json!({
                                "k": s.k,
                                "boundary_value": s.boundary_value,
                                "iterations": s.history.len(),
                                "residual": s.residual,
                                "min_margin": s.min_margin(),
                            })
                        })
                        .collect(),
                );
                report["epsilon"] = to_value(&inf.epsilon);
                report["structure_holds"] = to_value(&inf.structure_holds);
                report["monotone"] = to_value(&inf.monotone);
                report["settled_radius"] = to_value(&inf.settled_radius());
                report["lower_asymptotic_c0"] = to_value(&c0);
                report["rate"] = match &rate {
                    Ok(r) => to_value(r),
                    Err(e) => serde_json::json!({"error": e.to_string()}),
                };
                let last = inf.levels.last().ok_or_else(|| Error::Internal("empty family".into()))?;
                artifacts.push(Artifact {
                    name: "profile.csv".into(),
                    bytes: csv_profile(last, Some(&inf)),
                });
                artifacts.push(Artifact {
                    name: "rate.svg".into(),
                    bytes: rate_plot_svg(&inf, rate.as_ref().ok().and_then(|r| r.target)),
                });
            }
        }
        report["artifacts"] = serde_json::Value::Array(
            artifacts.iter().map(|a| serde_json::Value::String(a.name.clone())).collect(),
        );
        Ok(SolveOutcome { report, artifacts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::ConeConstants;
    use crate::geometry::{eigenvalues_wrt, v_of_u, RadialField, SmoothField};
    use crate::symfunc::SigmaQuotient;

    fn params(alpha: f64, tau: f64) -> ConformalParams {
        ConformalParams::new(alpha, tau, 3, &ConeConstants::with_values(3, 1, 1.0 / 12.0), 1.0).unwrap()
    }

    fn sigma2_problem(psi: f64) -> RadialProblem {
        RadialProblem::new(
            Arc::new(SigmaQuotient::sigma_root(3, 2).unwrap()),
            params(1.0, 3.0),
            RadialDomain::Ball { radius: 1.0 },
            MetricSpec::Euclidean,
            Arc::new(move |_| psi),
        )
        .unwrap()
    }

    #[test]
    fn reduction_of_zero_is_background() {
        let p = sigma2_problem(1.0);
        assert_eq!(&*radial_reduce(&p, 0.0, 0.0, 0.4).unwrap(), &[0.0; 3]);
        let hyp = RadialProblem {
            metric: MetricSpec::HyperbolicBall,
            ..p.clone()
        };
        let lam = radial_reduce(&hyp, 0.0, 0.0, 0.3).unwrap();
        // (n−2)/(α(τ−1))·A for curvature −1 with α = 1, τ = 3: ½·(−2 + 9/2).
        for v in lam.iter() {
            assert!((v - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn reduction_of_bowl() {
        let p = sigma2_problem(1.0);
        let c = 0.7;
        let r = 0.6;
        let lam = radial_reduce(&p, c * r, c, r).unwrap();
        let (rho, g) = (p.params.rho, p.params.gamma);
        let rad = (1.0 - rho) * c + 2.0 * c + (g + rho) * c * c * r * r;
        let tan = c + (2.0 - rho) * c + g * c * c * r * r;
        assert!((lam[0] - rad).abs() < 1e-14);
        assert!((lam[1] - tan).abs() < 1e-14 && (lam[2] - tan).abs() < 1e-14);
    }

    #[test]
    fn reduction_matches_three_dimensional_path() {
        let p = sigma2_problem(1.0);
        for metric in [MetricSpec::Euclidean, MetricSpec::HyperbolicBall] {
            let prob = RadialProblem {
                metric: metric.clone(),
                ..p.clone()
            };
            let field = RadialField::new(3, Arc::new(|r: f64| {
                (0.2 * r * r + 0.1 * r.powi(4), 0.4 * r + 0.4 * r.powi(3), 0.4 + 1.2 * r * r)
            }));
            for r in [0.1f64, 0.35, 0.8] {
                let (d1, d2) = (0.4 * r + 0.4 * r.powi(3), 0.4 + 1.2 * r * r);
                let mut radial = radial_reduce(&prob, d1, d2, r).unwrap().into_inner();
                radial.sort_by(|a, b| a.total_cmp(b));
                // Off-axis point at the same radius.
                let x = [r * 0.6, r * 0.8, 0.0];
                let v = v_of_u(&field, &metric, &p.params, &x).unwrap();
                let g = metric.at(&x).unwrap().g;
                let full = eigenvalues_wrt(&g, &v).unwrap();
                for k in 0..3 {
                    assert!((radial[k] - full[k]).abs() < 1e-8 * (1.0 + full[k].abs()));
                }
                let _ = field.value(&x);
            }
        }
    }

    #[test]
    fn graded_grid_shape() {
        let g = RadialGrid::for_levels(RadialDomain::Ball { radius: 1.0 }, 2000, 10).unwrap();
        assert_eq!(g.len(), 2000);
        assert_eq!(g.r[0], 0.0);
        assert_eq!(*g.r.last().unwrap(), 1.0);
        assert!(g.r.windows(2).all(|w| w[1] > w[0]));
        let last = 1.0 - g.r[g.len() - 2];
        assert!(last > 0.0 && last < 0.25 / 1024.0, "{last}");
        assert!(g.max_ratio() < 1.05);
        let a = RadialGrid::for_levels(RadialDomain::Annulus { inner: 0.5, outer: 1.0 }, 400, 6).unwrap();
        assert_eq!(a.r[0], 0.5);
        assert!(a.r.windows(2).all(|w| w[1] > w[0]));
    }

    /// `u*(r) = −0.3 + 0.25r² + 0.05r⁴` and the matching `ψ`.
    fn manufactured(p: &RadialProblem) -> (RadialProblem, impl Fn(f64) -> f64) {
        let exact = |r: f64| -0.3 + 0.25 * r * r + 0.05 * r.powi(4);
        let d1 = |r: f64| 0.5 * r + 0.2 * r.powi(3);
        let d2 = |r: f64| 0.5 + 0.6 * r * r;
        let q = p.clone();
        let psi: RadialFn = Arc::new(move |r| {
            let lam = radial_reduce(&q, d1(r), d2(r), r).unwrap();
            q.operator.value(&lam).unwrap() * (-2.0 * exact(r)).exp() / q.params.v_rhs_const
        });
        (RadialProblem { psi, ..p.clone() }, exact)
    }

    #[test]
    fn manufactured_solution_second_order() {
        let (prob, exact) = manufactured(&sigma2_problem(1.0));
        let mut errs = Vec::new();
        for nodes in [41, 81, 161, 321] {
            let grid = RadialGrid::uniform(prob.domain, nodes).unwrap();
            let sol = solve_finite(&prob, &grid, exact(1.0), 1e-12).unwrap();
            let e = sol.r.iter().zip(&sol.u).map(|(r, u)| (u - exact(*r)).abs()).fold(0.0, f64::max);
            errs.push(e);
        }
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() > 1.8, "{errs:?}");
        }
    }

    #[test]
    fn bracket_contains_solution() {
        let prob = sigma2_problem(1.0);
        let grid = RadialGrid::uniform(prob.domain, 201).unwrap();
        let br = c0_bracket(&prob, &grid, 0.3).unwrap();
        let sol = solve_finite(&prob, &grid, 0.3, 1e-12).unwrap();
        assert!(br.violation(&sol) < 1e-9, "{br:?}");
        assert!(sol.history.iter().all(|s| s.min_margin > 0.0));
    }

    #[test]
    fn comparison_ordering() {
        let prob = sigma2_problem(1.0);
        let grid = RadialGrid::uniform(prob.domain, 201).unwrap();
        let rep = comparison_check(&prob, &grid, 0.0, 1.1, 1e-12).unwrap();
        assert!(rep.holds && rep.max_excess <= 0.0, "{rep:?}");
    }

    #[test]
    fn barriers_on_finite_run() {
        let prob = sigma2_problem(1.0);
        let grid = RadialGrid::uniform(prob.domain, 401).unwrap();
        let sol = solve_finite(&prob, &grid, 0.0, 1e-12).unwrap();
        let search = barrier_search(&prob, &sol, 0.0).unwrap();
        assert!(search.verified.is_some(), "{search:?}");
        let loose = barrier_check(&prob, &sol, &BarrierSpec::LowerFinite { eps: 0.01, delta: 1.5, k: 1.0, phi: 0.0 }).unwrap();
        assert!(!loose.passed);
        let h = barrier_check(&prob, &sol, &BarrierSpec::InfiniteLower { eps: 0.05, delta: 0.05, k: 16.0 }).unwrap();
        assert!(h.passed, "{h:?}");
        assert!(subsolution_search(&prob, &sol).unwrap().is_some());
    }

    #[test]
    fn infinite_family_sigma2_rate() {
        let prob = sigma2_problem(1.0);
        let grid = RadialGrid::for_levels(prob.domain, 1000, 10).unwrap();
        let inf = solve_infinite(&prob, &grid, 10, 1e-12, 1e-3).unwrap();
        assert!(inf.monotone.holds);
        assert!(inf.structure_holds);
        let rate = asymptotic_rate(&prob, &inf, DEFAULT_RATE_BAND).unwrap();
        let target = 0.5 * 2.5f64.ln();
        assert_eq!(rate.target, Some(prob.params.boundary_rate(1.0)));
        assert!((rate.estimate - target).abs() < 2e-2, "{rate:?}");
    }

    #[test]
    fn annulus_family_is_monotone() {
        let prob = RadialProblem {
            domain: RadialDomain::Annulus { inner: 0.5, outer: 1.5 },
            ..sigma2_problem(1.0)
        };
        let grid = RadialGrid::for_levels(prob.domain, 800, 10).unwrap();
        let inf = solve_infinite(&prob, &grid, 10, 1e-11, 1e-3).unwrap();
        assert!(inf.monotone.holds);
        assert!(inf.settled.iter().any(|s| *s));
    }

    #[test]
    fn line_search_reports_blocking_node() {
        let prob = sigma2_problem(1.0);
        let grid = RadialGrid::uniform(prob.domain, 51).unwrap();
        let bad: Vec<f64> = grid.r.iter().map(|r| -r * r).collect();
        match solve_from(&prob, &grid, 0.0, bad, 1e-12) {
            Err(Error::InfeasibleNode { node, .. }) => assert!(node < 50),
            other => panic!("{:?}", other.map(|s| s.residual)),
        }
    }
}
