//! The backend interface shared by the radial and three-dimensional solvers.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::problem::ProblemFile;

/// Command-line overrides of the problem file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    #[serde(rename = "K")]
    pub levels: Option<u32>,
    pub grid: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
}

impl SolveOptions {
    /// The problem with overrides applied, so reports echo what actually ran.
    pub fn apply(&self, file: &ProblemFile) -> ProblemFile {
        let mut f = file.clone();
        if let Some(k) = self.levels {
            if let crate::problem::BoundarySpec::Infinite(c) = &mut f.boundary {
                c.levels = k;
            }
        }
        if let Some(t) = self.tol {
            f.tol = t;
        }
        if let Some(s) = self.seed {
            f.seed = s;
        }
        f
    }
}

/// A file produced by a solve, kept in memory until the caller writes it.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub report: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

pub trait Solver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, problem: &ProblemFile, options: &SolveOptions) -> Result<SolveOutcome>;
}
