//! Symmetric convex cones: membership, the constants κ and ϑ, type
//! classification, sampling, and sampled partial-uniform-ellipticity checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symfunc::{elementary_symmetric, max_abs, p_map, LambdaVec, Operator};
use crate::transform::mu_from_slice;

/// Default strictness margin for membership: `σ_j > margin·|λ|∞^j`.
pub const DEFAULT_MARGIN: f64 = 1e-12;

/// Seed used when callers do not supply one.
pub const DEFAULT_SEED: u64 = 0x5eed_c0de;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConeKind {
    /// `{σ_j > 0, j = 1..k}`.
    Garding { k: usize },
    /// `{λ : (Σλ)1 − λ ∈ Γ_k}`.
    PCone { k: usize },
    /// `{λ : μ(λ) ∈ base}` for the linear map with parameter `rho`.
    Transformed { base: Box<ConeSpec>, rho: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    #[serde(flatten)]
    pub kind: ConeKind,
    pub n: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

impl ConeSpec {
    pub fn garding(n: usize, k: usize) -> Result<Self> {
        if n < 2 || k < 1 || k > n {
            return Err(Error::Domain(format!(
                "Gårding cone needs n >= 2 and 1 <= k <= n, got n = {n}, k = {k}"
            )));
        }
        Ok(Self {
            kind: ConeKind::Garding { k },
            n,
            margin: DEFAULT_MARGIN,
        })
    }

    /// The positive cone `Γ_n`.
    pub fn positive(n: usize) -> Result<Self> {
        Self::garding(n, n)
    }

    pub fn p_cone(n: usize, k: usize) -> Result<Self> {
        let g = Self::garding(n, k)?;
        Ok(Self {
            kind: ConeKind::PCone { k },
            ..g
        })
    }

    /// Pull-back of `base` under `λ ↦ μ`. Only the algebraic requirements
    /// `ρ ≠ 0`, `ρ < n` are checked here; the ellipticity bound lives in
    /// [`crate::transform::TransformParams`].
    pub fn transformed(base: ConeSpec, rho: f64) -> Result<Self> {
        let n = base.n;
        if !rho.is_finite() || rho == 0.0 || rho >= n as f64 {
            return Err(Error::Parameter(format!(
                "transform parameter ρ = {rho} must be nonzero and below n = {n}"
            )));
        }
        let margin = base.margin;
        Ok(Self {
            kind: ConeKind::Transformed {
                base: Box::new(base),
                rho,
            },
            n,
            margin,
        })
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        if let ConeKind::Transformed { base, .. } = &mut self.kind {
            base.margin = margin;
        }
        self
    }

    pub fn label(&self) -> String {
        match &self.kind {
            ConeKind::Garding { k } => format!("Γ{k}(n={})", self.n),
            ConeKind::PCone { k } => format!("P{k}(n={})", self.n),
            ConeKind::Transformed { base, rho } => format!("T[{}; ρ={rho}]", base.label()),
        }
    }

    /// Membership with the violated inequality on failure.
    pub fn check(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.n {
            return Err(Error::Domain(format!(
                "cone has n = {}, input has n = {}",
                self.n,
                lambda.len()
            )));
        }
        match &self.kind {
            ConeKind::Garding { k } => garding_check(lambda, *k, self.margin, ""),
            ConeKind::PCone { k } => garding_check(&p_map(lambda), *k, self.margin, "of Pλ "),
            ConeKind::Transformed { base, rho } => {
                base.check(&mu_from_slice(lambda, *rho)).map_err(|e| match e {
                    Error::Feasibility { inequality, value } => Error::Feasibility {
                        inequality: format!("{inequality} for μ(λ)"),
                        value,
                    },
                    other => other,
                })
            }
        }
    }

    pub fn contains(&self, lambda: &[f64]) -> bool {
        self.check(lambda).is_ok()
    }

    /// Scale-free interior margin: `min_j σ_j/|x|∞^j` over the defining
    /// inequalities, evaluated on the mapped vector for derived kinds.
    /// Positive inside, nonpositive outside.
    pub fn depth(&self, lambda: &[f64]) -> f64 {
        let (x, k) = match &self.kind {
            ConeKind::Garding { k } => (lambda.to_vec(), *k),
            ConeKind::PCone { k } => (p_map(lambda), *k),
            ConeKind::Transformed { base, rho } => {
                return base.depth(&mu_from_slice(lambda, *rho));
            }
        };
        let s = elementary_symmetric(&x);
        let scale = max_abs(&x);
        if scale == 0.0 {
            return 0.0;
        }
        (1..=k)
            .map(|j| s[j] / scale.powi(j as i32))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest `c` (to bisection accuracy) with `x + c·1` on the boundary;
    /// any larger shift is interior.
    pub fn boundary_shift(&self, x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let scale = 1.0 + max_abs(x);
        let mut lo = -x.iter().sum::<f64>() / n;
        let min = x.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let mut step = scale * 1e-6;
        let mut hi = (-min).max(lo) + step;
        let shifted = |c: f64| x.iter().map(|v| v + c).collect::<Vec<_>>();
        while !self.contains(&shifted(hi)) {
            step *= 2.0;
            hi = (-min).max(lo) + step;
            if step > 1e12 * scale {
                break;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.contains(&shifted(mid)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

fn garding_check(lambda: &[f64], k: usize, margin: f64, what: &str) -> Result<()> {
    let s = elementary_symmetric(lambda);
    let scale = max_abs(lambda);
    for (j, &sj) in s.iter().enumerate().take(k + 1).skip(1) {
        if !(sj > margin * scale.powi(j as i32)) {
            return Err(Error::Feasibility {
                inequality: format!("σ{j} {what}> 0"),
                value: sj,
            });
        }
    }
    Ok(())
}

/// `(0,…,0,1,…,1)` with `zeros` leading zeros.
fn test_vector(n: usize, zeros: usize) -> Vec<f64> {
    (0..n).map(|i| if i < zeros { 0.0 } else { 1.0 }).collect()
}

/// Largest `k` such that `k` zeros followed by ones lie in the cone.
pub fn kappa(cone: &ConeSpec) -> Result<usize> {
    (0..cone.n)
        .rev()
        .find(|&k| cone.contains(&test_vector(cone.n, k)))
        .ok_or_else(|| Error::Parameter(format!("{} does not contain (1,…,1)", cone.label())))
}

/// Largest number of strictly negative entries observed among random
/// vectors found in the cone.
pub fn kappa_tilde(cone: &ConeSpec, trials: usize, seed: u64) -> Result<usize> {
    if trials < 1 {
        return Err(Error::Domain("kappa_tilde needs at least one trial".into()));
    }
    let n = cone.n;
    for count in (1..n).rev() {
        let found = (0..trials).any(|t| {
            let mut rng = stream_rng(seed, (count * trials + t) as u64);
            let neg_scale = 10f64.powf(-rng.random_range(0.0..8.0));
            let v: Vec<f64> = (0..n)
                .map(|i| {
                    if i < count {
                        -neg_scale * rng.random_range(0.1..1.0)
                    } else {
                        rng.random_range(0.5..2.0)
                    }
                })
                .collect();
            cone.contains(&v)
        });
        if found {
            return Ok(count);
        }
    }
    Ok(0)
}

pub fn is_type2(cone: &ConeSpec) -> bool {
    cone.contains(&test_vector(cone.n, cone.n - 1))
}

/// Finds `c > 0` with `(λ′, c, …, c) ∈ Γ` by doubling, up to `limit`.
pub fn type2_embedding(cone: &ConeSpec, prefix: &[f64], limit: f64) -> Option<f64> {
    let n = cone.n;
    if prefix.len() >= n {
        return None;
    }
    let mut c = 1.0;
    while c <= limit {
        let v: Vec<f64> = (0..n)
            .map(|i| if i < prefix.len() { prefix[i] } else { c })
            .collect();
        if cone.contains(&v) {
            return Some(c);
        }
        c *= 2.0;
    }
    None
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Lower bound for ϑ_Γ from a multi-start search, with bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarthetaEstimate {
    /// Best objective found; a certified lower bound.
    pub value: f64,
    /// `1/n`, which bounds ϑ from above.
    pub upper_bound: f64,
    /// Range of the per-start optima; small when starts agree.
    pub spread: f64,
    /// True when the value is known in closed form (κ = 0).
    pub exact: bool,
    pub starts: usize,
    pub evaluations: usize,
    pub seed: u64,
    /// Maximizing α, negatives first.
    pub witness: Vec<f64>,
}

const VARTHETA_SWEEPS: usize = 150;

/// Multi-start coordinate ascent on the ϑ objective, projecting each trial
/// onto the cone boundary by scaling the positive part.
pub fn vartheta(cone: &ConeSpec, budget: usize, seed: u64) -> Result<VarthetaEstimate> {
    if budget < 1 {
        return Err(Error::Domain("vartheta needs a budget of at least one start".into()));
    }
    let n = cone.n;
    let k = kappa(cone)?;
    if k == 0 {
        return Ok(VarthetaEstimate {
            value: 1.0 / n as f64,
            upper_bound: 1.0 / n as f64,
            spread: 0.0,
            exact: true,
            starts: 0,
            evaluations: 0,
            seed,
            witness: vec![1.0; n],
        });
    }
    let runs: Vec<(f64, Vec<f64>, usize)> = (0..budget)
        .into_par_iter()
        .map(|s| vartheta_start(cone, k, &mut stream_rng(seed, s as u64)))
        .collect();
    let mut best = 0usize;
    for (i, r) in runs.iter().enumerate() {
        if r.0 > runs[best].0 {
            best = i;
        }
    }
    let lo = runs.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    Ok(VarthetaEstimate {
        value: runs[best].0,
        upper_bound: 1.0 / n as f64,
        spread: runs[best].0 - lo,
        exact: false,
        starts: budget,
        evaluations: runs.iter().map(|r| r.2).sum(),
        seed,
        witness: runs[best].1.clone(),
    })
}

/// Objective at the boundary projection of `(−exp x, t·exp y)`; returns
/// the value and the projected α.
fn vartheta_eval(cone: &ConeSpec, k: usize, logs: &[f64]) -> Option<(f64, Vec<f64>)> {
    let n = cone.n;
    let mut neg: Vec<f64> = logs[..k].iter().map(|x| x.exp()).collect();
    neg.sort_by(|a, b| b.total_cmp(a));
    let pos: Vec<f64> = logs[k..].iter().map(|x| x.exp()).collect();
    let point = |t: f64| -> Vec<f64> {
        neg.iter()
            .map(|a| -a)
            .chain(pos.iter().map(|b| t * b))
            .collect()
    };
    let mut hi = 1.0;
    let mut tries = 0;
    while !cone.contains(&point(hi)) {
        hi *= 2.0;
        tries += 1;
        if tries > 200 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cone.contains(&point(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let pos_sum: f64 = pos.iter().sum::<f64>() * hi;
    let denom = pos_sum - neg[1..].iter().sum::<f64>();
    if !(denom > 0.0) {
        return None;
    }
    let alpha = neg.iter().copied().chain(pos.iter().map(|b| hi * b)).collect();
    Some((neg[0] / (n as f64 * denom), alpha))
}

fn vartheta_start(cone: &ConeSpec, k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>, usize) {
    let n = cone.n;
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut evals = 1;
    let (mut best, mut alpha) = vartheta_eval(cone, k, &x).unwrap_or((0.0, vec![0.0; n]));
    let mut step = 1.0;
    for _ in 0..VARTHETA_SWEEPS {
        let mut improved = false;
        for i in 0..n {
            for dir in [1.0, -1.0] {
                let old = x[i];
                x[i] = old + dir * step;
                evals += 1;
                match vartheta_eval(cone, k, &x) {
                    Some((v, a)) if v > best => {
                        best = v;
                        alpha = a;
                        improved = true;
                    }
                    _ => x[i] = old,
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-7 {
                break;
            }
        }
    }
    (best, alpha, evals)
}

/// κ, ϑ and type of a cone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeConstants {
    pub kappa: usize,
    pub vartheta: VarthetaEstimate,
    pub is_type2: bool,
}

pub const DEFAULT_VARTHETA_BUDGET: usize = 24;

impl ConeConstants {
    pub fn compute(cone: &ConeSpec, budget: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            kappa: kappa(cone)?,
            vartheta: vartheta(cone, budget, seed)?,
            is_type2: is_type2(cone),
        })
    }

    /// Constants with a given ϑ value, for closed-form use.
    pub fn with_values(n: usize, kappa: usize, vartheta: f64) -> Self {
        Self {
            kappa,
            vartheta: VarthetaEstimate {
                value: vartheta,
                upper_bound: 1.0 / n as f64,
                spread: 0.0,
                exact: true,
                starts: 0,
                evaluations: 0,
                seed: 0,
                witness: Vec::new(),
            },
            is_type2: kappa + 1 == n,
        }
    }

    pub fn kappa_vartheta(&self) -> f64 {
        self.kappa as f64 * self.vartheta.value
    }
}

/// How a sample is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Gaussian direction shifted along `1` into the interior.
    Uniform,
    /// Gaussian direction shifted to just inside the boundary.
    NearBoundary,
    /// A few tiny entries and the rest large: `(0⁺,…,0⁺,t,…,t)`, `t ≤ 1e6`.
    Anisotropic,
}

/// Deterministic sampler of interior points; sample `i` depends only on
/// `(seed, i)`.
#[derive(Clone, Debug)]
pub struct ConeSampler {
    cone: ConeSpec,
    seed: u64,
}

impl ConeSampler {
    pub fn new(cone: ConeSpec, seed: u64) -> Self {
        Self { cone, seed }
    }

    pub fn for_cone(&self, cone: ConeSpec) -> Self {
        Self {
            cone,
            seed: self.seed,
        }
    }

    pub fn cone(&self) -> &ConeSpec {
        &self.cone
    }

    pub fn mode_of(index: usize) -> SampleMode {
        match index % 3 {
            0 => SampleMode::Uniform,
            1 => SampleMode::NearBoundary,
            _ => SampleMode::Anisotropic,
        }
    }

    pub fn sample(&self, index: usize) -> Result<LambdaVec> {
        self.sample_mode(index, Self::mode_of(index))
    }

    pub fn sample_mode(&self, index: usize, mode: SampleMode) -> Result<LambdaVec> {
        let n = self.cone.n;
        let mut rng = stream_rng(self.seed, index as u64);
        let v = match mode {
            SampleMode::Uniform | SampleMode::NearBoundary => {
                let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let scale = 1.0 + max_abs(&x);
                let c0 = self.cone.boundary_shift(&x);
                let mut extra = if mode == SampleMode::Uniform {
                    scale * (0.05 + rng.sample::<f64, _>(StandardNormal).abs())
                } else {
                    scale * 10f64.powf(-rng.random_range(2.0..8.0))
                };
                let mut v: Vec<f64> = x.iter().map(|xi| xi + c0 + extra).collect();
                let mut tries = 0;
                while !self.cone.contains(&v) {
                    extra *= 10.0;
                    v = x.iter().map(|xi| xi + c0 + extra).collect();
                    tries += 1;
                    if tries > 20 {
                        return Err(Error::Sampling(format!(
                            "could not place sample {index} inside {}",
                            self.cone.label()
                        )));
                    }
                }
                v
            }
            SampleMode::Anisotropic => {
                let small = rng.random_range(1..n);
                let t = 10f64.powf(rng.random_range(0.0..6.0));
                let negative = rng.random_bool(0.5);
                let mut v: Vec<f64> = (0..n)
                    .map(|i| {
                        if i < small {
                            10f64.powf(-rng.random_range(2.0..8.0))
                        } else {
                            t * rng.random_range(1.0..1.0 + 1e-3)
                        }
                    })
                    .collect();
                if negative {
                    let flipped: Vec<f64> = v
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| if i < small { -x } else { x })
                        .collect();
                    if self.cone.contains(&flipped) {
                        v = flipped;
                    }
                }
                v.shuffle(&mut rng);
                if !self.cone.contains(&v) {
                    let c0 = self.cone.boundary_shift(&v);
                    let lift = c0.max(0.0) * 1.5 + 1e-9 * (1.0 + max_abs(&v));
                    v.iter_mut().for_each(|x| *x += lift);
                }
                if !self.cone.contains(&v) {
                    return Err(Error::Sampling(format!(
                        "could not place sample {index} inside {}",
                        self.cone.label()
                    )));
                }
                v
            }
        };
        LambdaVec::new(v)
    }
}

/// Result of a sampled ellipticity check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PueReport {
    pub operator: String,
    pub cone: String,
    pub m: usize,
    pub samples: usize,
    pub seed: u64,
    /// Minimum of `f_(m)/Σf_j` over samples (λ ascending).
    pub min_ratio: f64,
    /// Per index `i = 1..n`, the minimum of `f_(i)/Σf_j`.
    pub min_ratio_by_index: Vec<f64>,
    /// Sorted sample attaining `min_ratio`.
    pub witness: Vec<f64>,
    pub witness_index: usize,
}

const SAMPLE_CHUNK: usize = 256;

/// Min over samples of each normalized gradient component of `op`, taken on
/// the ascending ordering of the sample.
pub fn pue_check(
    op: &dyn Operator,
    cone: &ConeSpec,
    m: usize,
    samples: usize,
    seed: u64,
) -> Result<PueReport> {
    let n = cone.n;
    if op.dim() != n {
        return Err(Error::Domain(format!(
            "operator n = {} differs from cone n = {n}",
            op.dim()
        )));
    }
    if m < 1 || m > n {
        return Err(Error::Domain(format!("index m = {m} outside 1..={n}")));
    }
    if samples == 0 {
        return Err(Error::Sampling("no samples requested".into()));
    }
    let sampler = ConeSampler::new(cone.clone(), seed);
    let chunks: Vec<Result<(Vec<f64>, Vec<usize>)>> = (0..samples.div_ceil(SAMPLE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut mins = vec![f64::INFINITY; n];
            let mut arg = vec![usize::MAX; n];
            for idx in c * SAMPLE_CHUNK..((c + 1) * SAMPLE_CHUNK).min(samples) {
                let (sorted, _) = sampler.sample(idx)?.sorted();
                let g = op.gradient(&sorted)?;
                let total: f64 = g.iter().sum();
                for i in 0..n {
                    let r = g[i] / total;
                    if r < mins[i] {
                        mins[i] = r;
                        arg[i] = idx;
                    }
                }
            }
            Ok((mins, arg))
        })
        .collect();
    let mut mins = vec![f64::INFINITY; n];
    let mut arg = vec![usize::MAX; n];
    for chunk in chunks {
        let (cm, ca) = chunk?;
        for i in 0..n {
            if cm[i] < mins[i] {
                mins[i] = cm[i];
                arg[i] = ca[i];
            }
        }
    }
    let witness_index = arg[m - 1];
    if witness_index == usize::MAX {
        return Err(Error::Sampling("no feasible samples".into()));
    }
    let witness = sampler.sample(witness_index)?.sorted().0.into_inner();
    Ok(PueReport {
        operator: op.describe(),
        cone: cone.label(),
        m,
        samples,
        seed,
        min_ratio: mins[m - 1],
        min_ratio_by_index: mins,
        witness,
        witness_index,
    })
}

/// Sharpness witness along `(ε,…,ε,1,…,1)` with `zeros` small entries:
/// the ratio `f_(zeros+1)/Σf_j` as ε decreases through `eps`.
pub fn sharpness_sequence(op: &dyn Operator, zeros: usize, eps: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = op.dim();
    if zeros == 0 || zeros >= n {
        return Err(Error::Domain(format!("zero count {zeros} outside 1..{n}")));
    }
    eps.iter()
        .map(|&e| {
            let lam: Vec<f64> = (0..n).map(|i| if i < zeros { e } else { 1.0 }).collect();
            let g = op.gradient(&lam)?;
            let total: f64 = g.iter().sum();
            Ok((e, g[zeros] / total))
        })
        .collect()
}
