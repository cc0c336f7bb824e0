//! Name-keyed registries: operator kinds and solver backends are looked up
//! by string at run time, so problem files and the command line can pick
//! among them without the caller matching on types.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::Solver;
use crate::symfunc::{Operator, PComposed, SigmaQuotient};
use crate::transform::{TransformParams, Transformed};

/// Serializable description of an operator.
///
/// `kind` selects the registry entry. `exponent` defaults to 1; `root`
/// sets it to `1/(k−l)` instead. `transformed` and `p-composed` wrap `base`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub root: bool,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Box<OperatorConfig>>,
}

impl OperatorConfig {
    pub fn sigma_root(k: usize) -> Self {
        Self {
            kind: "sigma".into(),
            k: Some(k),
            root: true,
            normalized: true,
            ..Self::default()
        }
    }

    fn exponent_for(&self, k: usize, l: usize) -> Result<f64> {
        match (self.root, self.exponent) {
            (true, Some(_)) => Err(Error::Parameter(
                "give either `root` or `exponent`, not both".into(),
            )),
            (true, None) => Ok(1.0 / (k - l) as f64),
            (false, Some(p)) => Ok(p),
            (false, None) => Ok(1.0),
        }
    }

    fn require_k(&self) -> Result<usize> {
        self.k
            .ok_or_else(|| Error::Parameter(format!("operator kind `{}` needs `k`", self.kind)))
    }

    fn require_base(&self) -> Result<&OperatorConfig> {
        self.base
            .as_deref()
            .ok_or_else(|| Error::Parameter(format!("operator kind `{}` needs `base`", self.kind)))
    }
}

pub type OperatorBuilder = fn(&OperatorConfig, usize, &OperatorRegistry) -> Result<Arc<dyn Operator>>;

/// Operator kinds by name.
pub struct OperatorRegistry {
    builders: BTreeMap<&'static str, OperatorBuilder>,
}

impl Default for OperatorRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register("sigma", build_sigma);
        r.register("sigma-ratio", build_sigma_ratio);
        r.register("p-composed", build_p_composed);
        r.register("transformed", build_transformed);
        r
    }
}

impl OperatorRegistry {
    pub fn register(&mut self, name: &'static str, builder: OperatorBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    /// Builds `cfg` in dimension `n` (a dimension inside `cfg` must agree).
    pub fn build(&self, cfg: &OperatorConfig, n: usize) -> Result<Arc<dyn Operator>> {
        if let Some(m) = cfg.n {
            if m != n {
                return Err(Error::Parameter(format!(
                    "operator dimension {m} differs from problem dimension {n}"
                )));
            }
        }
        let builder = self.builders.get(cfg.kind.as_str()).ok_or_else(|| {
            Error::Unsupported(format!(
                "unknown operator kind `{}` (known: {})",
                cfg.kind,
                self.names().join(", ")
            ))
        })?;
        builder(cfg, n, self)
    }
}

fn quotient(cfg: &OperatorConfig, n: usize, l: usize) -> Result<SigmaQuotient> {
    let k = cfg.require_k()?;
    if l >= k {
        return Err(Error::Domain(format!("need l < k, got k = {k}, l = {l}")));
    }
    SigmaQuotient::new(n, k, l, cfg.exponent_for(k, l)?, cfg.normalized)
}

fn build_sigma(cfg: &OperatorConfig, n: usize, _: &OperatorRegistry) -> Result<Arc<dyn Operator>> {
    if cfg.l.is_some_and(|l| l != 0) {
        return Err(Error::Parameter("kind `sigma` takes no `l`; use `sigma-ratio`".into()));
    }
    Ok(Arc::new(quotient(cfg, n, 0)?))
}

fn build_sigma_ratio(cfg: &OperatorConfig, n: usize, _: &OperatorRegistry) -> Result<Arc<dyn Operator>> {
    let l = cfg
        .l
        .ok_or_else(|| Error::Parameter("kind `sigma-ratio` needs `l`".into()))?;
    Ok(Arc::new(quotient(cfg, n, l)?))
}

fn build_p_composed(cfg: &OperatorConfig, n: usize, _: &OperatorRegistry) -> Result<Arc<dyn Operator>> {
    let base = cfg.require_base()?;
    let inner = quotient(base, n, base.l.unwrap_or(0))?;
    Ok(Arc::new(PComposed::new(inner, cfg.normalized)?))
}

fn build_transformed(cfg: &OperatorConfig, n: usize, reg: &OperatorRegistry) -> Result<Arc<dyn Operator>> {
    let base = reg.build(cfg.require_base()?, n)?;
    let rho = cfg
        .rho
        .ok_or_else(|| Error::Parameter("kind `transformed` needs `rho`".into()))?;
    Ok(Arc::new(Transformed::new(base, TransformParams::unchecked(n, rho)?)?))
}

/// Solver backends by name.
pub struct SolverRegistry {
    solvers: BTreeMap<&'static str, Arc<dyn Solver>>,
}

impl Default for SolverRegistry {
    fn default() -> Self {
        let mut r = Self {
            solvers: BTreeMap::new(),
        };
        r.register(Arc::new(crate::solver_radial::RadialSolver));
        r.register(Arc::new(crate::solver_fd::FdSolver));
        r
    }
}

impl SolverRegistry {
    pub fn register(&mut self, solver: Arc<dyn Solver>) {
        self.solvers.insert(solver.name(), solver);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.solvers.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Solver>> {
        self.solvers.get(name).cloned().ok_or_else(|| {
            Error::Unsupported(format!(
                "unknown solver `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }
}
