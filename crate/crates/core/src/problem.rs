//! Problem files: the JSON description shared by the solver backends, and
//! its validated, derived form.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cone::{ConeConstants, ConeSpec, DEFAULT_SEED, DEFAULT_VARTHETA_BUDGET};
use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, MetricSpec};
use crate::registry::{OperatorConfig, OperatorRegistry};
use crate::symfunc::Operator;
use crate::transform::ConformalParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeConfig {
    /// `garding`, `positive` or `p-cone`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl ConeConfig {
    pub fn build(&self, n: usize) -> Result<ConeSpec> {
        let k = || {
            self.k
                .ok_or_else(|| Error::Parameter(format!("cone kind `{}` needs `k`", self.kind)))
        };
        match self.kind.as_str() {
            "garding" => ConeSpec::garding(n, k()?),
            "positive" => ConeSpec::positive(n),
            "p-cone" => ConeSpec::p_cone(n, k()?),
            other => Err(Error::Unsupported(format!(
                "unknown cone kind `{other}` (known: garding, positive, p-cone)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformalConfig {
    pub alpha: f64,
    pub tau: f64,
    pub n: usize,
    #[serde(default = "one")]
    pub varsigma: f64,
}

fn one() -> f64 {
    1.0
}

/// Right-hand side weight `ψ`, as a function of the radius `|x|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PsiSpec {
    Constant { value: f64 },
    /// `Σ c_i r^i`.
    RadialPolynomial { coefficients: Vec<f64> },
    /// Piecewise-linear interpolation of `(r, value)` pairs, clamped at the
    /// ends.
    ExpressionTable { r: Vec<f64>, values: Vec<f64> },
}

pub type RadialFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

impl PsiSpec {
    pub fn build(&self) -> Result<RadialFn> {
        match self {
            PsiSpec::Constant { value } => {
                let v = *value;
                Ok(Arc::new(move |_| v))
            }
            PsiSpec::RadialPolynomial { coefficients } => {
                if coefficients.is_empty() {
                    return Err(Error::Parameter("radial polynomial needs coefficients".into()));
                }
                let c = coefficients.clone();
                Ok(Arc::new(move |r| c.iter().rev().fold(0.0, |acc, ci| acc * r + ci)))
            }
            PsiSpec::ExpressionTable { r, values } => {
                if r.len() != values.len() || r.is_empty() {
                    return Err(Error::Parameter(
                        "expression table needs equally long, nonempty `r` and `values`".into(),
                    ));
                }
                if r.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Parameter("expression table `r` must increase".into()));
                }
                let (r, v) = (r.clone(), values.clone());
                Ok(Arc::new(move |x| interpolate(&r, &v, x)))
            }
        }
    }
}

/// Piecewise-linear interpolation on increasing abscissae, clamped.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let j = xs.partition_point(|&v| v <= x);
    let t = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
    ys[j - 1] + t * (ys[j] - ys[j - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfiniteConfig {
    #[serde(rename = "K")]
    pub levels: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum BoundarySpec {
    /// Constant Dirichlet value.
    Finite(f64),
    /// Boundary values `log k` for `k = 1, 2, 4, …, 2^K`.
    Infinite(InfiniteConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Radial nodes.
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Points per axis of the three-dimensional grid.
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_nodes() -> usize {
    2000
}

fn default_points() -> usize {
    33
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nodes: default_nodes(),
            points: default_points(),
        }
    }
}

fn default_tol() -> f64 {
    1e-11
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

/// A problem file as read from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub operator: OperatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cone: Option<ConeConfig>,
    pub conformal: ConformalConfig,
    pub domain: DomainSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    pub psi: PsiSpec,
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

/// Derived constants echoed into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub cone: String,
    pub kappa: usize,
    pub vartheta: f64,
    pub vartheta_exact: bool,
    pub is_type2: bool,
    pub rho: f64,
    pub gamma: f64,
    pub gamma_plus_rho: f64,
    pub theta: Option<f64>,
    pub rhs_const: f64,
    pub v_rhs_const: f64,
    pub rate_const: f64,
}

/// A validated problem ready for a backend.
#[derive(Clone)]
pub struct Prepared {
    pub file: ProblemFile,
    pub operator: Arc<dyn Operator>,
    pub cone: ConeSpec,
    pub constants: ConeConstants,
    pub params: ConformalParams,
    pub psi: RadialFn,
}

impl ProblemFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parameter(format!("problem file: {e}")))
    }

    /// Builds the operator and cone, computes κ and ϑ with the file's seed,
    /// and applies the `(α, τ)` admissibility condition.
    pub fn prepare(&self, registry: &OperatorRegistry) -> Result<Prepared> {
        let n = self.conformal.n;
        if self.operator.kind == "transformed" {
            return Err(Error::Unsupported(
                "give the untransformed operator; the transform follows from (α, τ)".into(),
            ));
        }
        let operator = registry.build(&self.operator, n)?;
        let cone = operator.cone();
        if let Some(c) = &self.cone {
            let given = c.build(n)?;
            if given.kind != cone.kind {
                return Err(Error::Parameter(format!(
                    "cone {} does not match the operator's cone {}",
                    given.label(),
                    cone.label()
                )));
            }
        }
        let varsigma = operator.homogeneity();
        if (self.conformal.varsigma - varsigma).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "varsigma = {} but the operator has homogeneity {varsigma}",
                self.conformal.varsigma
            )));
        }
        self.domain.validate(n)?;
        if !(self.tol > 0.0) {
            return Err(Error::Parameter(format!("tol must be positive, got {}", self.tol)));
        }
        let constants = ConeConstants::compute(&cone, DEFAULT_VARTHETA_BUDGET, self.seed)?;
        let params = ConformalParams::new(self.conformal.alpha, self.conformal.tau, n, &constants, varsigma)?;
        let psi = self.psi.build()?;
        let extent = self.domain.extent();
        for i in 0..=256 {
            let r = extent * i as f64 / 256.0;
            let v = psi(r);
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("ψ must be positive; ψ({r}) = {v}")));
            }
        }
        Ok(Prepared {
            file: self.clone(),
            operator,
            cone,
            constants,
            params,
            psi,
        })
    }
}

impl Prepared {
    pub fn derived(&self) -> DerivedConstants {
        derived_constants(&self.cone, &self.constants, &self.params)
    }
}

pub fn derived_constants(cone: &ConeSpec, constants: &ConeConstants, p: &ConformalParams) -> DerivedConstants {
    DerivedConstants {
        cone: cone.label(),
        kappa: constants.kappa,
        vartheta: constants.vartheta.value,
        vartheta_exact: constants.vartheta.exact,
        is_type2: constants.is_type2,
        rho: p.rho,
        gamma: p.gamma,
        gamma_plus_rho: p.gamma_plus_rho,
        theta: p.theta,
        rhs_const: p.rhs_const,
        v_rhs_const: p.v_rhs_const,
        rate_const: p.rate_const,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN: &str = r#"{
        "operator": {"kind": "sigma", "k": 1, "normalized": true},
        "cone": {"kind": "garding", "k": 1},
        "conformal": {"alpha": 1, "tau": 3, "n": 3, "varsigma": 1},
        "domain": {"kind": "ball", "radius": 1.0},
        "psi": {"kind": "constant", "value": 0.4166666666666667},
        "boundary": {"infinite": {"K": 10}},
        "grid": {"nodes": 2000},
        "tol": 1e-12,
        "seed": 7
    }"#;

    #[test]
    fn parses_and_prepares() {
        let p = ProblemFile::from_json(LN).unwrap();
        assert_eq!(p.boundary, BoundarySpec::Infinite(InfiniteConfig { levels: 10 }));
        let prep = p.prepare(&OperatorRegistry::default()).unwrap();
        let d = prep.derived();
        assert_eq!(d.kappa, 2);
        assert_eq!(d.rho, 0.5);
        assert_eq!(d.gamma, 0.25);
        assert!((d.rhs_const - 0.2).abs() < 1e-15);
        let back = serde_json::to_string(&p).unwrap();
        assert_eq!(ProblemFile::from_json(&back).unwrap(), p);
    }

    #[test]
    fn finite_boundary_and_defaults() {
        let text = LN
            .replace(r#"{"infinite": {"K": 10}}"#, r#"{"finite": 0.5}"#)
            .replace(r#""grid": {"nodes": 2000},"#, "");
        let p = ProblemFile::from_json(&text).unwrap();
        assert_eq!(p.boundary, BoundarySpec::Finite(0.5));
        assert_eq!(p.grid, GridConfig::default());
    }

    #[test]
    fn rejects_bad_inputs() {
        let reg = OperatorRegistry::default();
        assert!(ProblemFile::from_json(&LN.replace("\"seed\"", "\"sede\"")).is_err());
        let wrong_cone = LN.replace(r#""k": 1},"#, r#""k": 2},"#);
        let p = ProblemFile::from_json(&wrong_cone).unwrap();
        assert!(matches!(p.prepare(&reg), Err(Error::Parameter(_))));
        let s2 = LN
            .replace(r#""k": 1, "normalized""#, r#""k": 2, "root": true, "normalized""#)
            .replace(r#""k": 1},"#, r#""k": 2},"#)
            .replace("\"tau\": 3", "\"tau\": 1.5");
        let bad_tau = ProblemFile::from_json(&s2).unwrap();
        match bad_tau.prepare(&reg) {
            Err(Error::Parameter(m)) => assert!(m.contains("α = 1"), "{m}"),
            other => panic!("{:?}", other.err()),
        }
        let neg = LN.replace(r#""kind": "constant", "value": 0.4166666666666667"#, r#""kind": "radial-polynomial", "coefficients": [1.0, -2.0]"#);
        let p = ProblemFile::from_json(&neg).unwrap();
        assert!(matches!(p.prepare(&reg), Err(Error::Parameter(_))));
    }

    #[test]
    fn psi_kinds() {
        let poly = PsiSpec::RadialPolynomial {
            coefficients: vec![1.0, 0.0, 2.0],
        }
        .build()
        .unwrap();
        assert_eq!(poly(0.5), 1.5);
        let table = PsiSpec::ExpressionTable {
            r: vec![0.0, 1.0],
            values: vec![1.0, 3.0],
        }
        .build()
        .unwrap();
        assert_eq!(table(0.25), 1.5);
        assert_eq!(table(2.0), 3.0);
    }
}
