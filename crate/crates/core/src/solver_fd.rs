//! Three-dimensional finite differences for the transformed equation
//! `f̃(λ(U[u])) = c·ψ·e^{2ςu}` with `U = D²u + ½|Du|²I − Du⊗Du + B` on a
//! box grid with masked nodes.
//!
//! Nodes inside the domain carry the equation unless the boundary passes
//! within a quarter cell along an axis; those nodes are tied to the
//! boundary value by quadratic interpolation instead. Missing neighbours are
//! replaced by quadratic ghost values through the boundary crossing.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::{stream_rng, ConeSpec};
use crate::error::{Error, Result};
use crate::geometry::{write_field, DomainSpec, FieldHeader, Grid3, MetricSpec};
use crate::linalg::{bicgstab, eigen_sym3, CsrMatrix};
use crate::problem::{BoundarySpec, ProblemFile};
use crate::registry::OperatorRegistry;
use crate::solver::{Artifact, SolveOptions, SolveOutcome, Solver};
use crate::symfunc::Operator;
use crate::transform::{ConformalParams, TransformParams, Transformed};

pub type PointFn = Arc<dyn Fn(&[f64; 3]) -> f64 + Send + Sync>;

/// Boundary distance below which a node is interpolated, in cells.
const INTERP_FRACTION: f64 = 0.25;
const MAX_NEWTON: usize = 200;
const MAX_HALVINGS: usize = 40;
const ARMIJO_SLOPE: f64 = 1e-4;
pub const KRYLOV_TOL: f64 = 1e-8;
pub const KRYLOV_MAX: usize = 500;

// ---------------------------------------------------------------------------
// Problem and layout

#[derive(Clone)]
pub struct GridProblem {
    pub domain: DomainSpec,
    pub grid: Grid3,
    pub params: ConformalParams,
    pub base: Arc<dyn Operator>,
    pub operator: Arc<Transformed>,
    pub psi: PointFn,
}

impl GridProblem {
    /// Box grid `[−E, E]³` with `points` per axis, `E` the domain extent.
    pub fn new(
        domain: DomainSpec,
        points: usize,
        params: ConformalParams,
        base: Arc<dyn Operator>,
        psi: PointFn,
    ) -> Result<Self> {
        if params.n != 3 || base.dim() != 3 {
            return Err(Error::Unsupported("the grid solver is three-dimensional".into()));
        }
        if points < 5 {
            return Err(Error::Resolution(format!("need at least 5 points per axis, got {points}")));
        }
        domain.validate(3)?;
        let e = domain.extent();
        let h = 2.0 * e / (points - 1) as f64;
        for (i, hole) in domain.holes().iter().enumerate() {
            if hole.radius < 4.0 * h - 1e-12 {
                return Err(Error::Resolution(format!(
                    "hole {i} of radius {} spans fewer than 4 cells of width {h}",
                    hole.radius
                )));
            }
        }
        let operator = Arc::new(Transformed::new(base.clone(), TransformParams::unchecked(3, params.rho)?)?);
        Ok(Self {
            domain,
            grid: Grid3 {
                shape: [points; 3],
                origin: [-e; 3],
                spacing: h,
            },
            params,
            base,
            operator,
            psi,
        })
    }

    pub fn cone(&self) -> ConeSpec {
        self.operator.cone()
    }

    pub fn scaled_psi(&self, s: f64) -> Self {
        let psi = self.psi.clone();
        Self {
            psi: Arc::new(move |x| s * psi(x)),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeClass {
    Outside,
    /// On the boundary; holds the boundary value.
    Dirichlet,
    /// Carries the equation.
    Equation,
    /// Tied to the boundary by interpolation.
    Interpolated,
}

/// Affine function of node values and boundary values.
#[derive(Clone, Debug, Default, PartialEq)]
struct Lin {
    terms: Vec<(usize, f64)>,
    bterms: Vec<(usize, f64)>,
}

impl Lin {
    fn node(i: usize) -> Self {
        Self {
            terms: vec![(i, 1.0)],
            bterms: Vec::new(),
        }
    }

    fn boundary(b: usize) -> Self {
        Self {
            terms: Vec::new(),
            bterms: vec![(b, 1.0)],
        }
    }

    fn axpy(&mut self, a: f64, o: &Lin) {
        self.terms.extend(o.terms.iter().map(|&(i, c)| (i, a * c)));
        self.bterms.extend(o.bterms.iter().map(|&(i, c)| (i, a * c)));
    }

    fn combo(parts: &[(f64, &Lin)]) -> Self {
        let mut l = Lin::default();
        for (a, p) in parts {
            l.axpy(*a, p);
        }
        l
    }

    fn eval(&self, u: &[f64], bvals: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * u[i]).sum::<f64>() + self.bterms.iter().map(|&(i, c)| c * bvals[i]).sum::<f64>()
    }


    fn coefficient(&self, i: usize) -> f64 {
        self.terms.iter().filter(|t| t.0 == i).map(|t| t.1).sum()
    }
}

/// Derivative functionals `[D₀, D₁, D₂, D₀₀, D₁₁, D₂₂, D₀₁, D₀₂, D₁₂]`.
type Stencil = [Lin; 9];

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Nearest axis crossing of an interpolated node: axis, direction, fraction.
type Crossing = (usize, isize, f64);

/// Residual, diagonal, margin and cached frame of one equation node.
type NodeEval = (f64, f64, f64, NodeCache);

/// Node classification, boundary points and near-boundary stencils.
#[derive(Clone, Debug)]
pub struct Layout {
    pub classes: Vec<NodeClass>,
    /// Unknown index per node.
    unknown: Vec<Option<usize>>,
    /// Node per unknown.
    nodes: Vec<usize>,
    /// Boundary crossing points referenced by ghosts and interpolations.
    pub boundary_points: Vec<[f64; 3]>,
    /// Explicit stencils for equation nodes lacking a full neighbourhood.
    irregular: Vec<Option<Box<Stencil>>>,
    /// Interpolation rows for interpolated nodes.
    interp: Vec<Option<Lin>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayoutStats {
    pub nodes: usize,
    pub unknowns: usize,
    pub equation: usize,
    pub interpolated: usize,
    pub dirichlet: usize,
    pub irregular: usize,
}

fn offset(grid: &Grid3, idx: usize, d: [isize; 3]) -> Option<usize> {
    let c = grid.coords(idx);
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + d[a];
        if v < 0 || v >= grid.shape[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(grid.index(q[0], q[1], q[2]))
}

fn unit(axis: usize, s: isize) -> [isize; 3] {
    let mut d = [0; 3];
    d[axis] = s;
    d
}

/// Lagrange weights at `1` for nodes at `a < 0`, `0`, `b > 0`.
fn ghost_weights(a: f64, b: f64) -> [f64; 3] {
    [
        (1.0 - b) / (a * (a - b)),
        (1.0 - a) * (1.0 - b) / (a * b),
        (1.0 - a) / (b * (b - a)),
    ]
}

struct Builder<'a> {
    problem: &'a GridProblem,
    classes: &'a [NodeClass],
    points: Vec<[f64; 3]>,
}

impl Builder<'_> {
    fn available(&self, idx: Option<usize>) -> Option<usize> {
        idx.filter(|&j| self.classes[j] != NodeClass::Outside)
    }

    fn is_unknown(&self, idx: Option<usize>) -> Option<usize> {
        idx.filter(|&j| matches!(self.classes[j], NodeClass::Equation | NodeClass::Interpolated))
    }

    fn add_point(&mut self, p: &[f64; 3], axis: usize, t: f64) -> usize {
        let mut x = *p;
        x[axis] += t;
        self.points.push(x);
        self.points.len() - 1
    }

    /// Fraction of a cell to the boundary from interior node `idx`.
    fn crossing(&self, idx: usize, axis: usize, s: isize) -> f64 {
        let g = &self.problem.grid;
        self.problem
            .domain
            .crossing(&g.position(idx), axis, s as f64 * g.spacing)
            .unwrap_or(1.0)
    }

    /// Value at `idx + s·e_axis`, a node or a quadratic ghost.
    fn neighbour(&mut self, idx: usize, axis: usize, s: isize) -> Lin {
        let g = self.problem.grid.clone();
        if let Some(j) = self.available(offset(&g, idx, unit(axis, s))) {
            return Lin::node(j);
        }
        let h = g.spacing;
        let p = g.position(idx);
        let b = self.crossing(idx, axis, s);
        let bp = self.add_point(&p, axis, s as f64 * b * h);
        let (a, opposite) = match self.available(offset(&g, idx, unit(axis, -s))) {
            Some(j) => (-1.0, Lin::node(j)),
            None => {
                let a = self.crossing(idx, axis, -s);
                let ap = self.add_point(&p, axis, -(s as f64) * a * h);
                (-a, Lin::boundary(ap))
            }
        };
        let w = ghost_weights(a, b);
        Lin::combo(&[(w[0], &opposite), (w[1], &Lin::node(idx)), (w[2], &Lin::boundary(bp))])
    }

    /// Value at `idx + sa·e_a + sb·e_b`, from the node or from a ghost of
    /// an adjacent unknown.
    fn corner(&mut self, idx: usize, a: usize, sa: isize, b: usize, sb: isize) -> Option<Lin> {
        let g = self.problem.grid.clone();
        let mut d = [0isize; 3];
        d[a] = sa;
        d[b] = sb;
        if let Some(j) = self.available(offset(&g, idx, d)) {
            return Some(Lin::node(j));
        }
        let qa = self.is_unknown(offset(&g, idx, unit(a, sa)));
        let qb = self.is_unknown(offset(&g, idx, unit(b, sb)));
        let qa = qa.filter(|&q| self.ghost_ok(q, b, sb));
        let qb = qb.filter(|&q| self.ghost_ok(q, a, sa));
        let ta = qa.map(|q| self.crossing(q, b, sb));
        let tb = qb.map(|q| self.crossing(q, a, sa));
        match (qa, qb) {
            (Some(q), _) if tb.is_none() || ta >= tb => Some(self.neighbour(q, b, sb)),
            (_, Some(q)) => Some(self.neighbour(q, a, sa)),
            _ => None,
        }
    }

    /// Whether the ghost of `q` along `s·e_axis` has bounded weights.
    fn ghost_ok(&self, q: usize, axis: usize, s: isize) -> bool {
        let g = &self.problem.grid;
        if self.available(offset(g, q, unit(axis, s))).is_some() {
            return true;
        }
        self.crossing(q, axis, s) >= INTERP_FRACTION
            && (self.available(offset(g, q, unit(axis, -s))).is_some() || self.crossing(q, axis, -s) >= INTERP_FRACTION)
    }

    /// Mixed second difference. Uses four corners when available, else a
    /// single diagonal with the axis values; both are exact on quadratics.
    fn mixed(&mut self, idx: usize, a: usize, b: usize, axis: &[[Lin; 2]; 3]) -> Lin {
        let h2 = self.problem.grid.spacing.powi(2);
        let centre = Lin::node(idx);
        let pp = self.corner(idx, a, 1, b, 1);
        let mm = self.corner(idx, a, -1, b, -1);
        let pm = self.corner(idx, a, 1, b, -1);
        let mp = self.corner(idx, a, -1, b, 1);
        let axis_sum = Lin::combo(&[(1.0, &axis[a][0]), (1.0, &axis[a][1]), (1.0, &axis[b][0]), (1.0, &axis[b][1])]);
        match (pp, mm, pm, mp) {
            (Some(pp), Some(mm), Some(pm), Some(mp)) => {
                let w = 0.25 / h2;
                Lin::combo(&[(w, &pp), (-w, &pm), (-w, &mp), (w, &mm)])
            }
            (Some(pp), Some(mm), _, _) => {
                let w = 0.5 / h2;
                Lin::combo(&[(w, &pp), (w, &mm), (-w, &axis_sum), (2.0 * w, &centre)])
            }
            (_, _, Some(pm), Some(mp)) => {
                let w = 0.5 / h2;
                Lin::combo(&[(-w, &pm), (-w, &mp), (w, &axis_sum), (-2.0 * w, &centre)])
            }
            (pp, mm, pm, mp) => {
                // Missing corners from the axis values; first order.
                let fill = |c: Option<Lin>, ia: usize, ib: usize| {
                    c.unwrap_or_else(|| Lin::combo(&[(1.0, &axis[a][ia]), (1.0, &axis[b][ib]), (-1.0, &centre)]))
                };
                let (pp, mm, pm, mp) = (fill(pp, 0, 0), fill(mm, 1, 1), fill(pm, 0, 1), fill(mp, 1, 0));
                let w = 0.25 / h2;
                Lin::combo(&[(w, &pp), (-w, &pm), (-w, &mp), (w, &mm)])
            }
        }
    }

    fn stencil(&mut self, idx: usize) -> Stencil {
        let h = self.problem.grid.spacing;
        let centre = Lin::node(idx);
        let mut out: Stencil = Default::default();
        let mut axis: [[Lin; 2]; 3] = Default::default();
        for a in 0..3 {
            let up = self.neighbour(idx, a, 1);
            let down = self.neighbour(idx, a, -1);
            out[a] = Lin::combo(&[(0.5 / h, &up), (-0.5 / h, &down)]);
            out[3 + a] = Lin::combo(&[(1.0 / (h * h), &up), (-2.0 / (h * h), &centre), (1.0 / (h * h), &down)]);
            axis[a] = [up, down];
        }
        for (k, &(a, b)) in PAIRS.iter().enumerate() {
            out[6 + k] = self.mixed(idx, a, b, &axis);
        }
        out
    }

    fn is_regular(&self, idx: usize) -> bool {
        let g = &self.problem.grid;
        for a in 0..3 {
            for s in [-1, 1] {
                if self.available(offset(g, idx, unit(a, s))).is_none() {
                    return false;
                }
            }
        }
        for &(a, b) in &PAIRS {
            for sa in [-1, 1] {
                for sb in [-1, 1] {
                    let mut d = [0isize; 3];
                    d[a] = sa;
                    d[b] = sb;
                    if self.available(offset(g, idx, d)).is_none() {
                        return false;
                    }
                }
            }
        }
        true
    }
}

impl Layout {
    pub fn new(problem: &GridProblem) -> Result<Self> {
        let g = &problem.grid;
        let h = g.spacing;
        let domain = &problem.domain;
        let len = g.len();
        // Classification.
        let info: Vec<(NodeClass, Option<Crossing>)> = (0..len)
            .into_par_iter()
            .map(|idx| {
                let x = g.position(idx);
                let s = domain.sigma(&x);
                if s.abs() <= 1e-10 * h {
                    return (NodeClass::Dirichlet, None);
                }
                if s < 0.0 {
                    return (NodeClass::Outside, None);
                }
                let mut best: Option<Crossing> = None;
                for a in 0..3 {
                    for sg in [-1isize, 1] {
                        if let Some(t) = domain.crossing(&x, a, sg as f64 * h) {
                            if best.is_none_or(|b| t < b.2) {
                                best = Some((a, sg, t));
                            }
                        }
                    }
                }
                match best {
                    Some(b) if b.2 < INTERP_FRACTION => (NodeClass::Interpolated, Some(b)),
                    _ => (NodeClass::Equation, None),
                }
            })
            .collect();
        let mut classes: Vec<NodeClass> = info.iter().map(|i| i.0).collect();
        // Interpolation needs two available nodes behind; otherwise pin the
        // node to the boundary value.
        for idx in 0..len {
            if let (NodeClass::Interpolated, Some((a, s, _))) = info[idx] {
                let back1 = offset(g, idx, unit(a, -s));
                let back2 = offset(g, idx, unit(a, -2 * s));
                let ok = |j: Option<usize>| j.is_some_and(|j| info[j].0 != NodeClass::Outside);
                if !(ok(back1) && ok(back2)) {
                    classes[idx] = NodeClass::Dirichlet;
                }
            }
        }
        let mut unknown = vec![None; len];
        let mut nodes = Vec::new();
        for (idx, c) in classes.iter().enumerate() {
            if matches!(c, NodeClass::Equation | NodeClass::Interpolated) {
                unknown[idx] = Some(nodes.len());
                nodes.push(idx);
            }
        }
        if nodes.is_empty() {
            return Err(Error::Resolution("no interior nodes on the grid".into()));
        }
        let mut b = Builder {
            problem,
            classes: &classes,
            points: Vec::new(),
        };
        let mut irregular: Vec<Option<Box<Stencil>>> = vec![None; len];
        let mut interp: Vec<Option<Lin>> = vec![None; len];
        for idx in 0..len {
            match classes[idx] {
                NodeClass::Equation if !b.is_regular(idx) => {
                    irregular[idx] = Some(Box::new(b.stencil(idx)));
                }
                NodeClass::Interpolated => {
                    let (a, s, t) = info[idx].1.ok_or_else(|| Error::Internal("missing crossing".into()))?;
                    let bp = b.add_point(&g.position(idx), a, s as f64 * t * h);
                    let j1 = offset(g, idx, unit(a, -s)).ok_or_else(|| Error::Internal("no node behind".into()))?;
                    let j2 = offset(g, idx, unit(a, -2 * s)).ok_or_else(|| Error::Internal("no node behind".into()))?;
                    let wb = 2.0 / ((t + 1.0) * (t + 2.0));
                    let w1 = 2.0 * t / (1.0 + t);
                    let w2 = -t / (2.0 + t);
                    interp[idx] = Some(Lin::combo(&[(wb, &Lin::boundary(bp)), (w1, &Lin::node(j1)), (w2, &Lin::node(j2))]));
                }
                _ => {}
            }
        }
        let boundary_points = b.points;
        Ok(Self {
            classes,
            unknown,
            nodes,
            boundary_points,
            irregular,
            interp,
        })
    }

    pub fn stats(&self) -> LayoutStats {
        let count = |c: NodeClass| self.classes.iter().filter(|&&x| x == c).count();
        LayoutStats {
            nodes: self.classes.len(),
            unknowns: self.nodes.len(),
            equation: count(NodeClass::Equation),
            interpolated: count(NodeClass::Interpolated),
            dirichlet: count(NodeClass::Dirichlet),
            irregular: self.irregular.iter().filter(|s| s.is_some()).count(),
        }
    }

    pub fn unknowns(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_of(&self, unknown: usize) -> usize {
        self.nodes[unknown]
    }
}

fn regular_stencil(grid: &Grid3, idx: usize) -> Stencil {
    let h = grid.spacing;
    let at = |d: [isize; 3]| Lin::node(offset(grid, idx, d).unwrap_or(idx));
    let centre = Lin::node(idx);
    let mut out: Stencil = Default::default();
    for a in 0..3 {
        let up = at(unit(a, 1));
        let down = at(unit(a, -1));
        out[a] = Lin::combo(&[(0.5 / h, &up), (-0.5 / h, &down)]);
        out[3 + a] = Lin::combo(&[(1.0 / (h * h), &up), (-2.0 / (h * h), &centre), (1.0 / (h * h), &down)]);
    }
    for (k, &(a, b)) in PAIRS.iter().enumerate() {
        let c = |sa: isize, sb: isize| {
            let mut d = [0isize; 3];
            d[a] = sa;
            d[b] = sb;
            at(d)
        };
        let w = 0.25 / (h * h);
        out[6 + k] = Lin::combo(&[(w, &c(1, 1)), (-w, &c(1, -1)), (-w, &c(-1, 1)), (w, &c(-1, -1))]);
    }
    out
}

/// Derivatives at a node with a full neighbourhood, read directly.
fn regular_derivatives(grid: &Grid3, u: &[f64], idx: usize) -> [f64; 9] {
    let h = grid.spacing;
    let [nx, ny, _] = grid.shape;
    let stride = [1isize, nx as isize, (nx * ny) as isize];
    let at = |d: isize| u[(idx as isize + d) as usize];
    let c = u[idx];
    let mut out = [0.0; 9];
    for a in 0..3 {
        let (up, down) = (at(stride[a]), at(-stride[a]));
        out[a] = (up - down) * 0.5 / h;
        out[3 + a] = (up - 2.0 * c + down) / (h * h);
    }
    for (k, &(a, b)) in PAIRS.iter().enumerate() {
        let (sa, sb) = (stride[a], stride[b]);
        out[6 + k] = (at(sa + sb) - at(sa - sb) - at(-sa + sb) + at(-sa - sb)) * 0.25 / (h * h);
    }
    out
}

// ---------------------------------------------------------------------------
// State, residual and linearization

/// Per-node data of the current iterate.
#[derive(Clone, Debug, Default)]
struct NodeCache {
    derivs: [f64; 9],
    eigvecs: [[f64; 3]; 3],
    /// `f̃_i` at the eigenvalues.
    fgrad: [f64; 3],
    /// Derivative of the source term in `u`.
    dsource: f64,
}

impl NodeCache {
    /// `F = Q diag(f̃_i) Qᵀ`.
    fn frame_matrix(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.eigvecs[i][k] * self.fgrad[k] * self.eigvecs[j][k]).sum();
            }
        }
        m
    }

    /// Weights on `[D₀..D₂, D₀₀..D₂₂, D₀₁, D₀₂, D₁₂]` in the linearization.
    fn weights(&self) -> [f64; 9] {
        let f = self.frame_matrix();
        let du = [self.derivs[0], self.derivs[1], self.derivs[2]];
        let tr = f[0][0] + f[1][1] + f[2][2];
        let mut w = [0.0; 9];
        for k in 0..3 {
            w[k] = tr * du[k] - 2.0 * (0..3).map(|j| f[k][j] * du[j]).sum::<f64>();
            w[3 + k] = f[k][k];
        }
        for (k, &(a, b)) in PAIRS.iter().enumerate() {
            w[6 + k] = 2.0 * f[a][b];
        }
        w
    }
}

/// Iterate with cached eigen-decompositions. The cache is tied to the
/// iterate through `version`.
#[derive(Clone, Debug)]
pub struct NewtonState {
    /// Values at every node; boundary nodes hold boundary values.
    pub u: Vec<f64>,
    pub bvals: Vec<f64>,
    /// Residual per unknown.
    pub residual: Vec<f64>,
    /// Jacobian diagonal per unknown.
    pub diag: Vec<f64>,
    /// Cone depth per equation node (infinite elsewhere).
    pub margins: Vec<f64>,
    cache: Vec<NodeCache>,
    version: u64,
    cache_version: u64,
}

impl NewtonState {
    pub fn scaled_norm(&self) -> (f64, usize) {
        self.residual
            .iter()
            .zip(&self.diag)
            .enumerate()
            .map(|(i, (r, d))| ((r / d).abs(), i))
            .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
    }

    pub fn residual_inf(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Marks the cache stale after an external change of `u`.
    pub fn touch(&mut self) {
        self.version += 1;
    }
}

pub struct Discrete<'a> {
    pub problem: &'a GridProblem,
    pub layout: &'a Layout,
    psi: Vec<f64>,
    positions: Vec<[f64; 3]>,
}

enum Eval {
    Ok(NewtonState),
    Infeasible { node: usize, inequality: String },
}

impl<'a> Discrete<'a> {
    pub fn new(problem: &'a GridProblem, layout: &'a Layout) -> Result<Self> {
        let positions: Vec<[f64; 3]> = layout.nodes.iter().map(|&i| problem.grid.position(i)).collect();
        let psi: Vec<f64> = positions.iter().map(|x| (problem.psi)(x)).collect();
        if let Some(i) = psi.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter(format!("ψ is not positive at {:?}", positions[i])));
        }
        Ok(Self {
            problem,
            layout,
            psi,
            positions,
        })
    }

    /// Fills boundary values from `phi`: Dirichlet nodes and crossing points.
    pub fn boundary_values(&self, phi: &(dyn Fn(&[f64; 3]) -> f64 + Sync)) -> (Vec<(usize, f64)>, Vec<f64>) {
        let g = &self.problem.grid;
        let dir: Vec<(usize, f64)> = self
            .layout
            .classes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == NodeClass::Dirichlet)
            .map(|(i, _)| (i, phi(&g.position(i))))
            .collect();
        let bvals = self.layout.boundary_points.iter().map(phi).collect();
        (dir, bvals)
    }

    /// Full node vector from a field and boundary data `phi`.
    pub fn state_vector(
        &self,
        field: &(dyn Fn(&[f64; 3]) -> f64 + Sync),
        phi: &(dyn Fn(&[f64; 3]) -> f64 + Sync),
    ) -> (Vec<f64>, Vec<f64>) {
        let g = &self.problem.grid;
        let mut u = vec![0.0; g.len()];
        for &i in &self.layout.nodes {
            u[i] = field(&g.position(i));
        }
        let (dir, bvals) = self.boundary_values(phi);
        for (i, v) in dir {
            u[i] = v;
        }
        (u, bvals)
    }

    fn derivatives(&self, u: &[f64], bvals: &[f64], idx: usize) -> [f64; 9] {
        match &self.layout.irregular[idx] {
            Some(st) => std::array::from_fn(|k| st[k].eval(u, bvals)),
            None => regular_derivatives(&self.problem.grid, u, idx),
        }
    }

    fn stencil(&self, idx: usize) -> Stencil {
        match &self.layout.irregular[idx] {
            Some(st) => (**st).clone(),
            None => regular_stencil(&self.problem.grid, idx),
        }
    }

    fn u_matrix(&self, d: &[f64; 9]) -> [[f64; 3]; 3] {
        u_matrix_of(d)
    }

    fn evaluate(&self, u: Vec<f64>, bvals: Vec<f64>, version: u64) -> Result<Eval> {
        let p = &self.problem.params;
        let cone = self.problem.cone();
        let results: Vec<Result<std::result::Result<NodeEval, String>>> = self
            .layout
            .nodes
            .par_iter()
            .enumerate()
            .map(|(k, &idx)| {
                if let Some(row) = &self.layout.interp[idx] {
                    let r = u[idx] - row.eval(&u, &bvals);
                    return Ok(Ok((r, 1.0, f64::INFINITY, NodeCache::default())));
                }
                let derivs = self.derivatives(&u, &bvals, idx);
                let (vals, vecs) = eigen_sym3(&self.u_matrix(&derivs));
                if let Err(e) = cone.check(&vals) {
                    return Ok(Err(match e {
                        Error::Feasibility { inequality, .. } => inequality,
                        other => other.to_string(),
                    }));
                }
                let (f, g) = self.problem.operator.value_grad(&vals)?;
                let source = p.rhs_const * self.psi[k] * (2.0 * p.varsigma * u[idx]).exp();
                let cache = NodeCache {
                    derivs,
                            eigvecs: vecs,
                    fgrad: [g[0], g[1], g[2]],
                    dsource: 2.0 * p.varsigma * source,
                };
                let fm = cache.frame_matrix();
                let h2 = self.problem.grid.spacing.powi(2);
                let diag = match &self.layout.irregular[idx] {
                    None => -2.0 / h2 * (fm[0][0] + fm[1][1] + fm[2][2]) - cache.dsource,
                    Some(st) => {
                        let w = cache.weights();
                        (0..9).map(|j| w[j] * st[j].coefficient(idx)).sum::<f64>() - cache.dsource
                    }
                };
                Ok(Ok((f - source, diag, cone.depth(&vals), cache)))
            })
            .collect();
        let n = self.layout.nodes.len();
        let mut residual = Vec::with_capacity(n);
        let mut diag = Vec::with_capacity(n);
        let mut margins = Vec::with_capacity(n);
        let mut cache = Vec::with_capacity(n);
        for (k, r) in results.into_iter().enumerate() {
            match r? {
                Ok((res, d, m, c)) => {
                    residual.push(res);
                    diag.push(d);
                    margins.push(m);
                    cache.push(c);
                }
                Err(inequality) => {
                    return Ok(Eval::Infeasible {
                        node: self.layout.nodes[k],
                        inequality,
                    })
                }
            }
        }
        Ok(Eval::Ok(NewtonState {
            u,
            bvals,
            residual,
            diag,
            margins,
            cache,
            version,
            cache_version: version,
        }))
    }

    /// Residual and caches at `u`, or the first inadmissible node.
    pub fn state(&self, u: Vec<f64>, bvals: Vec<f64>) -> Result<NewtonState> {
        match self.evaluate(u, bvals, 0)? {
            Eval::Ok(s) => Ok(s),
            Eval::Infeasible { node, inequality } => Err(self.infeasible(node, inequality)),
        }
    }

    fn infeasible(&self, node: usize, inequality: String) -> Error {
        Error::InfeasibleNode {
            node,
            position: self.problem.grid.position(node).to_vec(),
            inequality,
        }
    }

    /// Residual per unknown at `u` (convenience for tests).
    pub fn residual(&self, u: &[f64], bvals: &[f64]) -> Result<Vec<f64>> {
        Ok(self.state(u.to_vec(), bvals.to_vec())?.residual)
    }

    /// Jacobian as a sparse matrix over the unknowns.
    pub fn jacobian(&self, state: &NewtonState) -> Result<CsrMatrix> {
        if state.version != state.cache_version {
            return Err(Error::Internal("stale eigen-decomposition cache".into()));
        }
        let rows: Vec<Vec<(usize, f64)>> = self
            .layout
            .nodes
            .par_iter()
            .enumerate()
            .map(|(k, &idx)| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(32);
                if let Some(interp) = &self.layout.interp[idx] {
                    row.push((k, 1.0));
                    for &(j, c) in &interp.terms {
                        if let Some(col) = self.layout.unknown[j] {
                            row.push((col, -c));
                        }
                    }
                    return row;
                }
                let nc = &state.cache[k];
                let w = nc.weights();
                let st = self.stencil(idx);
                for (wj, lin) in w.iter().zip(st.iter()) {
                    for &(j, c) in &lin.terms {
                        if let Some(col) = self.layout.unknown[j] {
                            row.push((col, wj * c));
                        }
                    }
                }
                row.push((k, -nc.dsource));
                row
            })
            .collect();
        Ok(CsrMatrix::from_rows(rows))
    }

    /// Applies the linearized operator to `v` (one value per unknown) by
    /// rotating the second differences of `v` into each node's eigenframe.
    pub fn linearize_apply(&self, state: &NewtonState, v: &[f64]) -> Result<Vec<f64>> {
        let mut full = vec![0.0; self.problem.grid.len()];
        for (k, &idx) in self.layout.nodes.iter().enumerate() {
            full[idx] = v[k];
        }
        let zero_b = vec![0.0; self.layout.boundary_points.len()];
        self.apply_full(state, &full, &zero_b)
    }

    /// Linearized residual change for a perturbation of every node value
    /// (boundary nodes included) and of the boundary values.
    fn apply_full(&self, state: &NewtonState, full: &[f64], dbvals: &[f64]) -> Result<Vec<f64>> {
        if state.version != state.cache_version {
            return Err(Error::Internal("stale eigen-decomposition cache".into()));
        }
        let g = &self.problem.grid;
        let out = self
            .layout
            .nodes
            .par_iter()
            .enumerate()
            .map(|(k, &idx)| {
                if let Some(interp) = &self.layout.interp[idx] {
                    return full[idx] - interp.eval(full, dbvals);
                }
                let d = match &self.layout.irregular[idx] {
                    Some(st) => std::array::from_fn(|j| st[j].eval(full, dbvals)),
                    None => regular_derivatives(g, full, idx),
                };
                let nc = &state.cache[k];
                let mut w = [[0.0; 3]; 3];
                for a in 0..3 {
                    w[a][a] = d[3 + a];
                }
                for (j, &(a, b)) in PAIRS.iter().enumerate() {
                    w[a][b] = d[6 + j];
                    w[b][a] = d[6 + j];
                }
                let mut second = 0.0;
                for i in 0..3 {
                    let q = [nc.eigvecs[0][i], nc.eigvecs[1][i], nc.eigvecs[2][i]];
                    let mut qwq = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            qwq += q[a] * w[a][b] * q[b];
                        }
                    }
                    second += nc.fgrad[i] * qwq;
                }
                let weights = nc.weights();
                let first: f64 = (0..3).map(|j| weights[j] * d[j]).sum();
                second + first - nc.dsource * full[idx]
            })
            .collect();
        Ok(out)
    }

    /// Relative error of `linearize_apply` against the difference quotient
    /// `(F(u + tv) − F(u))/t` for a seeded random direction.
    pub fn gateaux_check(&self, state: &NewtonState, t: f64, seed: u64) -> Result<f64> {
        use rand::Rng;
        let mut rng = stream_rng(seed, 0);
        let v: Vec<f64> = (0..self.layout.unknowns()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lv = self.linearize_apply(state, &v)?;
        let mut u = state.u.clone();
        for (k, &idx) in self.layout.nodes.iter().enumerate() {
            u[idx] += t * v[k];
        }
        let moved = self.state(u, state.bvals.clone())?;
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for k in 0..lv.len() {
            let fd = (moved.residual[k] - state.residual[k]) / t;
            err = err.max((fd - lv[k]).abs());
            scale = scale.max(lv[k].abs());
        }
        Ok(err / scale.max(f64::MIN_POSITIVE))
    }

    fn admissible_bowl(&self) -> Result<f64> {
        let cone = self.problem.cone();
        for j in 0..=30 {
            let b = 0.5f64.powi(j);
            let ok = self.positions.iter().all(|x| {
                let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
                let mut m = [[0.0; 3]; 3];
                for a in 0..3 {
                    for c in 0..3 {
                        m[a][c] = -b * b * x[a] * x[c] + if a == c { b + 0.5 * b * b * r2 } else { 0.0 };
                    }
                }
                cone.contains(&eigen_sym3(&m).0)
            });
            if ok {
                return Ok(b);
            }
        }
        Err(Error::Construction("no admissible bowl b|x|²/2 with b >= 2^-30".into()))
    }
}

// ---------------------------------------------------------------------------
// Newton

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdStep {
    pub residual: f64,
    pub step: f64,
    pub halvings: usize,
    pub krylov_iterations: usize,
    pub krylov_residual: f64,
    pub krylov_converged: bool,
    pub min_margin: f64,
    /// Linearization check, sampled every fifth iterate when enabled.
    pub gateaux_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub check_linearization: bool,
    pub seed: u64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: MAX_NEWTON,
            check_linearization: false,
            seed: crate::cone::DEFAULT_SEED,
        }
    }
}

/// Damped Newton from an admissible state.
pub fn newton_solve(disc: &Discrete, mut state: NewtonState, opts: &NewtonOptions) -> Result<(NewtonState, Vec<FdStep>)> {
    let mut history = Vec::new();
    for it in 0..opts.max_iter {
        let (norm, _) = state.scaled_norm();
        let gateaux_error = if opts.check_linearization && it % 5 == 0 {
            Some(disc.gateaux_check(&state, 1e-6, opts.seed.wrapping_add(it as u64))?)
        } else {
            None
        };
        if norm < opts.tol {
            history.push(FdStep {
                residual: norm,
                step: 0.0,
                halvings: 0,
                krylov_iterations: 0,
                krylov_residual: 0.0,
                krylov_converged: true,
                min_margin: state.min_margin(),
                gateaux_error,
            });
            return Ok((state, history));
        }
        let jac = disc.jacobian(&state)?;
        let rhs: Vec<f64> = state.residual.iter().map(|r| -r).collect();
        let (du, stats) = bicgstab(&jac, &rhs, KRYLOV_TOL, KRYLOV_MAX);
        let mut t = 1.0;
        let mut accepted = None;
        let mut blocking = 0;
        for halvings in 0..=MAX_HALVINGS {
            let mut u = state.u.clone();
            for (k, &idx) in disc.layout.nodes.iter().enumerate() {
                u[idx] += t * du[k];
            }
            match disc.evaluate(u, state.bvals.clone(), state.version + 1)? {
                Eval::Infeasible { node, .. } => blocking = node,
                Eval::Ok(next) => {
                    let (nn, worst) = next.scaled_norm();
                    if nn <= (1.0 - ARMIJO_SLOPE * t) * norm {
                        accepted = Some((next, halvings));
                        break;
                    }
                    blocking = disc.layout.nodes[worst];
                }
            }
            t *= 0.5;
        }
        let Some((next, halvings)) = accepted else {
            return Err(Error::LineSearch {
                node: blocking,
                position: disc.problem.grid.position(blocking).to_vec(),
                halvings: MAX_HALVINGS,
            });
        };
        history.push(FdStep {
            residual: norm,
            step: t,
            halvings,
            krylov_iterations: stats.iterations,
            krylov_residual: stats.relative_residual,
            krylov_converged: stats.converged,
            min_margin: state.min_margin(),
            gateaux_error,
        });
        state = next;
    }
    let (norm, _) = state.scaled_norm();
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationStep {
    pub t: f64,
    pub newton_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct FdSolution {
    pub state: NewtonState,
    pub history: Vec<FdStep>,
    pub continuation: Vec<ContinuationStep>,
    pub bowl_curvature: Option<f64>,
}

impl FdSolution {
    pub fn residual(&self) -> f64 {
        self.state.scaled_norm().0
    }
}

const MIN_CONTINUATION_STEP: f64 = 1.0 / 4096.0;
/// Residual target at intermediate continuation steps.
const CONTINUATION_TOL: f64 = 1e-3;

/// Moves the boundary data from `from` to `to` in adaptive steps, solving
/// at each step from the previous solution.
fn continue_boundary(
    disc: &Discrete,
    mut state: NewtonState,
    from: &(dyn Fn(&[f64; 3]) -> f64 + Sync),
    to: &(dyn Fn(&[f64; 3]) -> f64 + Sync),
    opts: &NewtonOptions,
    history: &mut Vec<FdStep>,
    steps: &mut Vec<ContinuationStep>,
) -> Result<NewtonState> {
    let mut t = 0.0;
    let mut dt = 1.0;
    let mut last_err = None;
    while t < 1.0 {
        if dt < MIN_CONTINUATION_STEP {
            return Err(last_err.unwrap_or_else(|| Error::Scheme("boundary continuation stalled".into())));
        }
        let next_t = (t + dt).min(1.0);
        let phi = |x: &[f64; 3]| (1.0 - next_t) * from(x) + next_t * to(x);
        let (dir, bvals) = disc.boundary_values(&phi);
        let u = predict(disc, &state, &dir, &bvals)?;
        let step_opts = NewtonOptions {
            tol: if next_t < 1.0 { opts.tol.max(CONTINUATION_TOL) } else { opts.tol },
            ..*opts
        };
        let attempt = disc.state(u, bvals).and_then(|s| newton_solve(disc, s, &step_opts));
        match attempt {
            Ok((s, h)) => {
                steps.push(ContinuationStep {
                    t: next_t,
                    newton_iterations: h.len(),
                });
                history.extend(h);
                state = s;
                t = next_t;
                dt *= 2.0;
            }
            Err(e) if !e.is_input_error() => {
                last_err = Some(e);
                dt *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(state)
}

/// Predictor for new boundary data: a Newton step from the current iterate
/// with the boundary change included in the linearization.
fn predict(disc: &Discrete, state: &NewtonState, dir: &[(usize, f64)], bvals: &[f64]) -> Result<Vec<f64>> {
    let mut full = vec![0.0; state.u.len()];
    let mut u = state.u.clone();
    for &(i, v) in dir {
        full[i] = v - state.u[i];
        u[i] = v;
    }
    let db: Vec<f64> = bvals.iter().zip(&state.bvals).map(|(a, b)| a - b).collect();
    let sens = disc.apply_full(state, &full, &db)?;
    let jac = disc.jacobian(state)?;
    let rhs: Vec<f64> = sens.iter().zip(&state.residual).map(|(x, r)| -(x + r)).collect();
    let (du, _) = bicgstab(&jac, &rhs, KRYLOV_TOL, KRYLOV_MAX);
    for (k, &idx) in disc.layout.nodes.iter().enumerate() {
        u[idx] += du[k];
    }
    Ok(u)
}

/// Solves with boundary data `phi`, starting from an admissible bowl
/// matched to its own boundary values and continued to `phi`.
pub fn solve(problem: &GridProblem, layout: &Layout, phi: &(dyn Fn(&[f64; 3]) -> f64 + Sync), opts: &NewtonOptions) -> Result<FdSolution> {
    let disc = Discrete::new(problem, layout)?;
    let b = disc.admissible_bowl()?;
    let bowl = |x: &[f64; 3]| 0.5 * b * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
    let shift = {
        let pts = &layout.boundary_points;
        if pts.is_empty() {
            0.0
        } else {
            pts.iter().map(|p| phi(p) - bowl(p)).sum::<f64>() / pts.len() as f64
        }
    };
    let start = move |x: &[f64; 3]| bowl(x) + shift;
    let (u, bvals) = disc.state_vector(&start, &start);
    let state = disc.state(u, bvals)?;
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let state = continue_boundary(&disc, state, &start, phi, opts, &mut history, &mut steps)?;
    Ok(FdSolution {
        state,
        history,
        continuation: steps,
        bowl_curvature: Some(b),
    })
}

/// Continues an existing solution to new boundary data.
pub fn resolve(
    problem: &GridProblem,
    layout: &Layout,
    previous: &FdSolution,
    from: &(dyn Fn(&[f64; 3]) -> f64 + Sync),
    to: &(dyn Fn(&[f64; 3]) -> f64 + Sync),
    opts: &NewtonOptions,
) -> Result<FdSolution> {
    let disc = Discrete::new(problem, layout)?;
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let state = continue_boundary(&disc, previous.state.clone(), from, to, opts, &mut history, &mut steps)?;
    Ok(FdSolution {
        state,
        history,
        continuation: steps,
        bowl_curvature: None,
    })
}

// ---------------------------------------------------------------------------
// Increasing family and the obstruction experiment

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelOutcome {
    pub k: u64,
    pub converged: bool,
    pub newton_iterations: usize,
    pub continuation_steps: usize,
    pub residual: Option<f64>,
    pub min_margin: Option<f64>,
    pub interior_min: Option<f64>,
    pub interior_max: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub levels: Vec<LevelOutcome>,
    /// `min (u^{(2k)} − u^{(k)})` over solved pairs.
    pub min_increment: Option<f64>,
    /// Largest change between consecutive levels on nodes with
    /// `σ ≥ interior`.
    pub interior_increments: Vec<f64>,
    /// Remaining change after the last level, extrapolated geometrically
    /// from the last two increments.
    pub tail_estimate: Option<f64>,
    pub interior: f64,
    pub settled: bool,
}

/// Solves `k = 1, 2, …, 2^K` with boundary values `log k`, stopping at the
/// first failure. Settled means the interior increments decrease over the
/// last three levels and the last one is below `settle_tol`.
pub fn solve_family(problem: &GridProblem, levels: u32, opts: &NewtonOptions, settle_tol: f64) -> Result<(FamilyReport, Option<FdSolution>)> {
    let layout = Layout::new(problem)?;
    let g = &problem.grid;
    let depth_max = layout
        .nodes
        .iter()
        .map(|&i| problem.domain.sigma(&g.position(i)))
        .fold(0.0, f64::max);
    let interior = 0.5 * depth_max;
    let deep: Vec<usize> = layout
        .nodes
        .iter()
        .copied()
        .filter(|&i| problem.domain.sigma(&g.position(i)) >= interior)
        .collect();
    let mut outcomes = Vec::new();
    let mut fields: Vec<Vec<f64>> = Vec::new();
    let mut last: Option<FdSolution> = None;
    for j in 0..=levels {
        let k = 1u64 << j;
        let value = (k as f64).ln();
        let phi = move |_: &[f64; 3]| value;
        let attempt = match &last {
            None => solve(problem, &layout, &phi, opts),
            Some(prev) => {
                let before = (k as f64 / 2.0).ln();
                resolve(problem, &layout, prev, &move |_: &[f64; 3]| before, &phi, opts)
            }
        };
        match attempt {
            Ok(sol) => {
                let vals: Vec<f64> = deep.iter().map(|&i| sol.state.u[i]).collect();
                outcomes.push(LevelOutcome {
                    k,
                    converged: true,
                    newton_iterations: sol.history.len(),
                    continuation_steps: sol.continuation.len(),
                    residual: Some(sol.residual()),
                    min_margin: Some(sol.state.min_margin()),
                    interior_min: vals.iter().copied().reduce(f64::min),
                    interior_max: vals.iter().copied().reduce(f64::max),
                    error: None,
                });
                fields.push(layout.nodes.iter().map(|&i| sol.state.u[i]).collect());
                last = Some(sol);
            }
            Err(e) if e.is_input_error() => return Err(e),
            Err(e) => {
                outcomes.push(LevelOutcome {
                    k,
                    converged: false,
                    newton_iterations: 0,
                    continuation_steps: 0,
                    residual: None,
                    min_margin: None,
                    interior_min: None,
                    interior_max: None,
                    error: Some(e.to_string()),
                });
                break;
            }
        }
    }
    let min_increment = fields
        .windows(2)
        .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| b - a).collect::<Vec<_>>())
        .reduce(f64::min);
    let deep_pos: Vec<usize> = deep.iter().filter_map(|&i| layout.unknown[i]).collect();
    let increments: Vec<f64> = fields
        .windows(2)
        .map(|w| deep_pos.iter().map(|&i| (w[1][i] - w[0][i]).abs()).fold(0.0, f64::max))
        .collect();
    let complete = fields.len() == (levels + 1) as usize;
    let settled = complete
        && increments.len() >= 3
        && increments.windows(2).rev().take(2).all(|w| w[1] < w[0])
        && increments.last().is_some_and(|&d| d < settle_tol);
    let tail = match increments.as_slice() {
        [.., a, b] if complete && b < a => Some(b * (b / a) / (1.0 - b / a)),
        _ => None,
    };
    Ok((
        FamilyReport {
            levels: outcomes,
            min_increment,
            interior_increments: increments,
            tail_estimate: tail,
            interior,
            settled,
        },
        last,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstructionArm {
    pub label: String,
    pub cone: String,
    /// Outcome of the `(α, τ)` condition for this cone.
    pub parameter_check: std::result::Result<(), String>,
    pub family: Option<FamilyReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstructionReport {
    pub exploratory: bool,
    pub domain: DomainSpec,
    pub points: usize,
    pub levels: u32,
    pub arms: Vec<ObstructionArm>,
}

/// Interior increment below which the obstruction family counts as settled.
pub const OBSTRUCTION_SETTLE_TOL: f64 = 5e-2;

/// Runs the increasing family for each `(label, operator)` arm with
/// `n = 3`, `τ = 2`, `α = 1`, `ψ ≡ 1`. No outcome is asserted; failures
/// are recorded.
pub fn obstruction_experiment(
    domain: &DomainSpec,
    arms: &[(String, Arc<dyn Operator>)],
    points: usize,
    levels: u32,
    opts: &NewtonOptions,
) -> Result<ObstructionReport> {
    let (alpha, tau) = (1.0, 2.0);
    let mut out = Vec::new();
    for (label, op) in arms {
        let cone = op.cone();
        let constants = crate::cone::ConeConstants::compute(&cone, crate::cone::DEFAULT_VARTHETA_BUDGET, opts.seed)?;
        let parameter_check = ConformalParams::new(alpha, tau, 3, &constants, op.homogeneity())
            .map(|_| ())
            .map_err(|e| e.to_string());
        let params = ConformalParams::unchecked(alpha, tau, 3, op.homogeneity())?;
        let run = GridProblem::new(domain.clone(), points, params, op.clone(), Arc::new(|_| 1.0))
            .and_then(|p| solve_family(&p, levels, opts, OBSTRUCTION_SETTLE_TOL));
        let (family, error) = match run {
            Ok((f, _)) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        out.push(ObstructionArm {
            label: label.clone(),
            cone: cone.label(),
            parameter_check,
            family,
            error,
        });
    }
    Ok(ObstructionReport {
        exploratory: true,
        domain: domain.clone(),
        points,
        levels,
        arms: out,
    })
}

// ---------------------------------------------------------------------------
// Manufactured solution

/// `u*(x) = a|x|² + b·sin(cx₀)·sin(cx₁) + b·cos(cx₂)` with exact derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveBowl {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for WaveBowl {
    fn default() -> Self {
        Self { a: 0.3, b: 0.05, c: 2.0 }
    }
}

impl WaveBowl {
    pub fn value(&self, x: &[f64; 3]) -> f64 {
        let (a, b, c) = (self.a, self.b, self.c);
        a * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) + b * (c * x[0]).sin() * (c * x[1]).sin() + b * (c * x[2]).cos()
    }

    /// `[D₀, D₁, D₂, D₀₀, D₁₁, D₂₂, D₀₁, D₀₂, D₁₂]`.
    pub fn derivatives(&self, x: &[f64; 3]) -> [f64; 9] {
        let (a, b, c) = (self.a, self.b, self.c);
        let (s0, c0) = (c * x[0]).sin_cos();
        let (s1, c1) = (c * x[1]).sin_cos();
        let (s2, c2) = (c * x[2]).sin_cos();
        [
            2.0 * a * x[0] + b * c * c0 * s1,
            2.0 * a * x[1] + b * c * s0 * c1,
            2.0 * a * x[2] - b * c * s2,
            2.0 * a - b * c * c * s0 * s1,
            2.0 * a - b * c * c * s0 * s1,
            2.0 * a - b * c * c * c2,
            b * c * c * c0 * c1,
            0.0,
            0.0,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub points: Vec<usize>,
    pub spacing: Vec<f64>,
    pub max_error: Vec<f64>,
    /// `log₂` of successive error ratios.
    pub orders: Vec<f64>,
    pub newton_iterations: Vec<usize>,
    pub continuation_steps: Vec<usize>,
    pub max_krylov_iterations: Vec<usize>,
}

impl ConvergenceReport {
    pub fn min_order(&self) -> f64 {
        self.orders.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Right-hand side making `exact` a solution of the problem's equation.
pub fn manufactured_psi(params: &ConformalParams, operator: &Arc<Transformed>, exact: WaveBowl) -> PointFn {
    let params = params.clone();
    let op = operator.clone();
    Arc::new(move |x: &[f64; 3]| {
        let d = exact.derivatives(x);
        let m = u_matrix_of(&d);
        let lam = eigen_sym3(&m).0;
        let f = op.value(&lam).unwrap_or(f64::NAN);
        f / (params.rhs_const * (2.0 * params.varsigma * exact.value(x)).exp())
    })
}

fn u_matrix_of(d: &[f64; 9]) -> [[f64; 3]; 3] {
    let du = [d[0], d[1], d[2]];
    let q = 0.5 * (du[0] * du[0] + du[1] * du[1] + du[2] * du[2]);
    let mut m = [[0.0; 3]; 3];
    for a in 0..3 {
        m[a][a] = d[3 + a] + q - du[a] * du[a];
    }
    for (k, &(a, b)) in PAIRS.iter().enumerate() {
        m[a][b] = d[6 + k] - du[a] * du[b];
        m[b][a] = m[a][b];
    }
    m
}

/// Solves the manufactured problem on `domain` for each grid size and
/// records the maximum nodal error.
pub fn manufactured_convergence(
    domain: &DomainSpec,
    params: &ConformalParams,
    base: Arc<dyn Operator>,
    exact: WaveBowl,
    points: &[usize],
    opts: &NewtonOptions,
) -> Result<ConvergenceReport> {
    let mut report = ConvergenceReport {
        points: points.to_vec(),
        spacing: Vec::new(),
        max_error: Vec::new(),
        orders: Vec::new(),
        newton_iterations: Vec::new(),
        continuation_steps: Vec::new(),
        max_krylov_iterations: Vec::new(),
    };
    for &np in points {
        let probe = GridProblem::new(domain.clone(), np, params.clone(), base.clone(), Arc::new(|_| 1.0))?;
        let psi = manufactured_psi(params, &probe.operator, exact);
        let problem = GridProblem { psi, ..probe };
        let layout = Layout::new(&problem)?;
        let sol = solve(&problem, &layout, &move |x: &[f64; 3]| exact.value(x), opts)?;
        let err = layout
            .nodes
            .iter()
            .map(|&i| (sol.state.u[i] - exact.value(&problem.grid.position(i))).abs())
            .fold(0.0, f64::max);
        report.spacing.push(problem.grid.spacing);
        report.max_error.push(err);
        report.newton_iterations.push(sol.history.len());
        report.continuation_steps.push(sol.continuation.len());
        report
            .max_krylov_iterations
            .push(sol.history.iter().map(|s| s.krylov_iterations).max().unwrap_or(0));
    }
    report.orders = report.max_error.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    Ok(report)
}

/// Largest `|u(x) − profile(|x|)|` over unknown nodes with `|x| ≤ radius`.
pub fn radial_difference(problem: &GridProblem, layout: &Layout, u: &[f64], profile: &dyn Fn(f64) -> f64, radius: f64) -> f64 {
    layout
        .nodes
        .iter()
        .filter_map(|&i| {
            let x = problem.grid.position(i);
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            (r <= radius).then(|| (u[i] - profile(r)).abs())
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Output

/// Legacy VTK structured points, ASCII: the solution `u` (zero outside the
/// domain) and a `class` field (0 outside, 1 boundary, 2 equation,
/// 3 interpolated).
pub fn vtk_ascii(grid: &Grid3, layout: &Layout, u: &[f64]) -> Vec<u8> {
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "conelab fd solution");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} {}", grid.shape[0], grid.shape[1], grid.shape[2]);
    let _ = writeln!(s, "ORIGIN {:?} {:?} {:?}", grid.origin[0], grid.origin[1], grid.origin[2]);
    let _ = writeln!(s, "SPACING {:?} {:?} {:?}", grid.spacing, grid.spacing, grid.spacing);
    let _ = writeln!(s, "POINT_DATA {}", grid.len());
    let _ = writeln!(s, "SCALARS u double 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for (i, c) in layout.classes.iter().enumerate() {
        let v = if *c == NodeClass::Outside { 0.0 } else { u[i] };
        let _ = writeln!(s, "{v:?}");
    }
    let _ = writeln!(s, "SCALARS class int 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for c in &layout.classes {
        let code = match c {
            NodeClass::Outside => 0,
            NodeClass::Dirichlet => 1,
            NodeClass::Equation => 2,
            NodeClass::Interpolated => 3,
        };
        let _ = writeln!(s, "{code}");
    }
    s.into_bytes()
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Registry entry for the three-dimensional backend.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdSolver;

impl Solver for FdSolver {
    fn name(&self) -> &'static str {
        "fd"
    }

    fn solve(&self, problem: &ProblemFile, options: &SolveOptions) -> Result<SolveOutcome> {
        let mut file = options.apply(problem);
        if let Some(g) = options.grid {
            file.grid.points = g;
        }
        if file.metric != MetricSpec::Euclidean {
            return Err(Error::Unsupported("the grid solver uses the Euclidean base metric".into()));
        }
        let prepared = file.prepare(&OperatorRegistry::default())?;
        let psi_r = prepared.psi.clone();
        let psi: PointFn = Arc::new(move |x| psi_r((x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()));
        let gp = GridProblem::new(file.domain.clone(), file.grid.points, prepared.params.clone(), prepared.operator.clone(), psi)?;
        let opts = NewtonOptions {
            tol: file.tol,
            max_iter: MAX_NEWTON,
            check_linearization: true,
            seed: file.seed,
        };
        let mut report = serde_json::json!({
            "solver": self.name(),
            "inputs": to_value(&file),
            "derived": to_value(&prepared.derived()),
            "krylov": {"rel_tol": KRYLOV_TOL, "max_iter": KRYLOV_MAX},
        });
        let layout = Layout::new(&gp)?;
        report["layout"] = to_value(&layout.stats());
        let sol = match file.boundary {
            BoundarySpec::Finite(phi) => {
                let sol = solve(&gp, &layout, &move |_: &[f64; 3]| phi, &opts)?;
                report["newton"] = to_value(&sol.history);
                report["continuation"] = to_value(&sol.continuation);
                report["residual"] = to_value(&sol.residual());
                report["min_margin"] = to_value(&sol.state.min_margin());
                sol
            }
            BoundarySpec::Infinite(ref cfg) => {
                let (family, last) = solve_family(&gp, cfg.levels, &opts, OBSTRUCTION_SETTLE_TOL)?;
                report["family"] = to_value(&family);
                last.ok_or_else(|| Error::Scheme("no member of the family converged".into()))?
            }
        };
        let header = FieldHeader {
            field: "u".into(),
            domain: file.domain.clone(),
            shape: gp.grid.shape.to_vec(),
            origin: gp.grid.origin.to_vec(),
            spacing: gp.grid.spacing,
        };
        let mut bin = Vec::new();
        write_field(&mut bin, &header, &sol.state.u).map_err(|e| Error::Internal(e.to_string()))?;
        let artifacts = vec![
            Artifact {
                name: "solution.vtk".into(),
                bytes: vtk_ascii(&gp.grid, &layout, &sol.state.u),
            },
            Artifact {
                name: "u.field".into(),
                bytes: bin,
            },
        ];
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
    use crate::geometry::Hole;
    use crate::symfunc::SigmaQuotient;

    fn params() -> ConformalParams {
        ConformalParams::new(1.0, 3.0, 3, &ConeConstants::with_values(3, 1, 1.0 / 12.0), 1.0).unwrap()
    }

    fn holed_box() -> DomainSpec {
        DomainSpec::BoxMinusBalls {
            half_width: 0.5,
            holes: vec![Hole {
                center: vec![0.0; 3],
                radius: 0.25,
            }],
        }
    }

    fn problem(domain: DomainSpec, points: usize) -> GridProblem {
        GridProblem::new(
            domain,
            points,
            params(),
            Arc::new(SigmaQuotient::sigma_root(3, 2).unwrap()),
            Arc::new(|_| 1.0),
        )
        .unwrap()
    }

    #[test]
    fn ghost_weights_reproduce_quadratics() {
        for (a, b) in [(-1.0, 0.3), (-0.4, 0.7), (-1.0, 1.0)] {
            let w = ghost_weights(a, b);
            let q = |x: f64| 0.3 - 1.2 * x + 0.7 * x * x;
            assert!((w[0] * q(a) + w[1] * q(0.0) + w[2] * q(b) - q(1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_classifies_nodes() {
        let p = problem(holed_box(), 21);
        let l = Layout::new(&p).unwrap();
        let s = l.stats();
        assert_eq!(s.nodes, 21 * 21 * 21);
        assert!(s.equation > 0 && s.interpolated > 0 && s.dirichlet > 0 && s.irregular > 0);
        assert_eq!(s.unknowns, s.equation + s.interpolated);
        let centre = p.grid.index(10, 10, 10);
        assert_eq!(l.classes[centre], NodeClass::Outside);
        assert_eq!(l.classes[0], NodeClass::Dirichlet);
    }

    #[test]
    fn rejects_under_resolved_holes() {
        let r = GridProblem::new(holed_box(), 9, params(), Arc::new(SigmaQuotient::sigma_root(3, 2).unwrap()), Arc::new(|_| 1.0));
        assert!(matches!(r, Err(Error::Resolution(_))));
    }

    fn quadratic_state(p: &GridProblem, l: &Layout) -> NewtonState {
        let d = Discrete::new(p, l).unwrap();
        let f = |x: &[f64; 3]| 0.3 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) + 0.1 * x[0] * x[1];
        let (u, b) = d.state_vector(&f, &f);
        d.state(u, b).unwrap()
    }

    #[test]
    fn stencils_are_exact_on_quadratics() {
        let p = problem(holed_box(), 21);
        let l = Layout::new(&p).unwrap();
        let d = Discrete::new(&p, &l).unwrap();
        let st = quadratic_state(&p, &l);
        for (k, &idx) in l.nodes.iter().enumerate() {
            if l.interp[idx].is_some() {
                assert!(st.residual[k].abs() < 1e-12);
                continue;
            }
            let x = p.grid.position(idx);
            let want = [
                0.6 * x[0] + 0.1 * x[1],
                0.6 * x[1] + 0.1 * x[0],
                0.6 * x[2],
                0.6,
                0.6,
                0.6,
                0.1,
                0.0,
                0.0,
            ];
            let got = d.derivatives(&st.u, &st.bvals, idx);
            for j in 0..9 {
                assert!((got[j] - want[j]).abs() < 1e-9, "node {idx} entry {j}: {got:?}");
            }
        }
    }

    #[test]
    fn jacobian_matches_literal_linearization() {
        let p = problem(holed_box(), 21);
        let l = Layout::new(&p).unwrap();
        let d = Discrete::new(&p, &l).unwrap();
        let st = quadratic_state(&p, &l);
        let jac = d.jacobian(&st).unwrap();
        let v: Vec<f64> = (0..l.unknowns()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let a = jac.mul_vec(&v);
        let b = d.linearize_apply(&st, &v).unwrap();
        let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10 * scale);
        }
        assert!(d.linearize_apply(&st, &vec![0.0; l.unknowns()]).unwrap().iter().all(|x| *x == 0.0));
        let err = d.gateaux_check(&st, 1e-6, 3).unwrap();
        assert!(err < 1e-4, "{err}");
        let mut stale = st.clone();
        stale.touch();
        assert!(matches!(d.linearize_apply(&stale, &v), Err(Error::Internal(_))));
    }

    #[test]
    fn linear_operator_linearization_is_exact() {
        let p = GridProblem::new(
            holed_box(),
            21,
            params(),
            Arc::new(SigmaQuotient::sigma(3, 1).unwrap().with_cone_margin(1e-12)),
            Arc::new(|_| 1.0),
        )
        .unwrap();
        let l = Layout::new(&p).unwrap();
        let d = Discrete::new(&p, &l).unwrap();
        let st = quadratic_state(&p, &l);
        let v: Vec<f64> = (0..l.unknowns()).map(|i| ((i * 31) % 7) as f64 * 1e-5).collect();
        let lv = d.linearize_apply(&st, &v).unwrap();
        let mut u = st.u.clone();
        for (k, &idx) in l.nodes.iter().enumerate() {
            u[idx] += v[k];
        }
        let moved = d.residual(&u, &st.bvals).unwrap();
        // Linear in D²u; the remainder is quadratic in Dv and v.
        let scale = lv.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in 0..lv.len() {
            let diff = moved[k] - st.residual[k];
            assert!((diff - lv[k]).abs() < 1e-4 * scale, "{k}: {diff} vs {}", lv[k]);
        }
    }

    #[test]
    fn forced_violation_names_node() {
        let p = problem(holed_box(), 21);
        let l = Layout::new(&p).unwrap();
        let d = Discrete::new(&p, &l).unwrap();
        let mut st = quadratic_state(&p, &l);
        let idx = l.nodes.iter().copied().find(|&i| l.interp[i].is_none()).unwrap();
        st.u[idx] += 10.0;
        match d.state(st.u.clone(), st.bvals.clone()) {
            Err(Error::InfeasibleNode { .. }) => {}
            other => panic!("{:?}", other.map(|s| s.scaled_norm())),
        }
    }

    #[test]
    fn solves_ball_problem_and_comparison() {
        let p = problem(DomainSpec::Ball { radius: 1.0 }, 17);
        let l = Layout::new(&p).unwrap();
        let opts = NewtonOptions {
            check_linearization: true,
            ..NewtonOptions::default()
        };
        let sol = solve(&p, &l, &|_| 0.0, &opts).unwrap();
        assert!(sol.residual() < 1e-10);
        assert!(sol.state.min_margin() > 0.0);
        for s in &sol.history {
            if let Some(e) = s.gateaux_error {
                assert!(e < 1e-4, "{e}");
            }
        }
        let big = p.scaled_psi(1.1);
        let sol2 = solve(&big, &l, &|_| 0.0, &opts).unwrap();
        for &i in &l.nodes {
            assert!(sol2.state.u[i] <= sol.state.u[i] + 1e-8);
        }
    }

    #[test]
    fn vtk_layout() {
        let p = problem(DomainSpec::Ball { radius: 1.0 }, 9);
        let l = Layout::new(&p).unwrap();
        let u = vec![1.5; p.grid.len()];
        let text = String::from_utf8(vtk_ascii(&p.grid, &l, &u)).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
        assert!(text.contains("DIMENSIONS 9 9 9"));
        assert_eq!(text.lines().count(), 10 + 2 * 729 + 2);
    }

    #[test]
    fn manufactured_solution_second_order() {
        let domain = DomainSpec::BoxMinusBalls {
            half_width: 1.0,
            holes: vec![Hole {
                center: vec![0.0; 3],
                radius: 0.5,
            }],
        };
        let op: Arc<dyn Operator> = Arc::new(SigmaQuotient::sigma_root(3, 2).unwrap());
        let r = manufactured_convergence(&domain, &params(), op, WaveBowl::default(), &[17, 33], &NewtonOptions::default()).unwrap();
        assert!(r.min_order() > 1.8, "{r:?}");
        assert!(r.max_error[1] < 1e-4);
    }

    #[test]
    fn agrees_with_radial_solver() {
        use crate::geometry::MetricSpec;
        use crate::solver_radial::{solve_finite, RadialDomain, RadialGrid, RadialProblem};
        let op: Arc<dyn Operator> = Arc::new(SigmaQuotient::sigma_root(3, 2).unwrap());
        let rp = RadialProblem::new(op.clone(), params(), RadialDomain::Ball { radius: 1.0 }, MetricSpec::Euclidean, Arc::new(|_| 1.0)).unwrap();
        let grid = RadialGrid::uniform(RadialDomain::Ball { radius: 1.0 }, 400).unwrap();
        let rs = solve_finite(&rp, &grid, 0.0, 1e-11).unwrap();
        let p = GridProblem::new(DomainSpec::Ball { radius: 1.0 }, 17, params(), op, Arc::new(|_| 1.0)).unwrap();
        let l = Layout::new(&p).unwrap();
        let sol = solve(&p, &l, &|_| 0.0, &NewtonOptions::default()).unwrap();
        let diff = radial_difference(&p, &l, &sol.state.u, &|r| rs.at(r), 0.9);
        assert!(diff < 2e-2, "{diff}");
    }

    #[test]
    fn obstruction_arms_behave_as_recorded() {
        let dom = DomainSpec::BallMinusBalls {
            radius: 1.0,
            holes: vec![
                Hole {
                    center: vec![0.45, 0.0, 0.0],
                    radius: 0.25,
                },
                Hole {
                    center: vec![-0.45, 0.0, 0.0],
                    radius: 0.25,
                },
            ],
        };
        let arms: Vec<(String, Arc<dyn Operator>)> = vec![
            ("gamma-1".into(), Arc::new(SigmaQuotient::sigma(3, 1).unwrap())),
            ("gamma-n".into(), Arc::new(SigmaQuotient::sigma_root(3, 3).unwrap())),
        ];
        let r = obstruction_experiment(&dom, &arms, 33, 10, &NewtonOptions::default()).unwrap();
        assert!(r.exploratory);
        let g1 = r.arms[0].family.as_ref().unwrap();
        assert!(r.arms[0].parameter_check.is_ok());
        assert!(g1.levels.iter().all(|l| l.converged) && g1.settled);
        assert!(g1.min_increment.unwrap() > -1e-9);
        assert!(r.arms[1].parameter_check.is_err());
    }
}
