//! Hierarchical prior model: problem data, solver configuration, and the
//! per-index Gamma rate schedule that encodes prior support knowledge.
//!
//! The signal model is `y = A x + w` with `x` sparse and `w` zero-mean
//! Gaussian. Each coefficient `x_i` carries a zero-mean Gaussian prior with
//! precision `alpha_i`, and each `alpha_i` a Gamma(a, b_i) hyperprior. The
//! per-index rate `b_i` is where prior support knowledge enters:
//!
//! * `Sbl`  — every `b_i` is the small sparsity-encouraging value.
//! * `Nsl`  — indices claimed in the support get a large fixed `b_i`
//!   (non-sparsity-encouraging); the rest stay small.
//! * `Sl`   — claimed indices get a latent `b_i` with a Gamma(p, q)
//!   hyperprior, learned by the variational engine; the rest stay small.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Solver variants, selected by how the `b_i` schedule is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    /// Conventional sparse Bayesian learning; prior support is ignored.
    Sbl,
    /// Support-aided, no support learning: fixed large `b_i` on the claimed set.
    Nsl,
    /// Support-aided with support learning: latent `b_i` on the claimed set.
    Sl,
}

impl SolverMode {
    pub const ALL: [SolverMode; 3] = [SolverMode::Sbl, SolverMode::Nsl, SolverMode::Sl];

    pub fn as_str(&self) -> &'static str {
        match self {
            SolverMode::Sbl => "sbl",
            SolverMode::Nsl => "nsl",
            SolverMode::Sl => "sl",
        }
    }
}

impl std::fmt::Display for SolverMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SolverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sbl" => Ok(SolverMode::Sbl),
            "nsl" => Ok(SolverMode::Nsl),
            "sl" => Ok(SolverMode::Sl),
            other => Err(Error::invalid(
                "mode",
                format!("expected one of sbl|nsl|sl, got {other:?}"),
            )),
        }
    }
}

/// Ground truth attached to a synthetic problem, used only for scoring.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// True signal, length n.
    pub x: DVector<f64>,
    /// True support: 0-based indices of the nonzeros of `x`.
    pub support: BTreeSet<usize>,
    /// Noise standard deviation; 0 denotes the noiseless case.
    pub noise_std: f64,
}

impl GroundTruth {
    /// Builds the ground truth from a signal, deriving the support from its
    /// nonzero pattern.
    pub fn from_signal(x: DVector<f64>, noise_std: f64) -> Result<Self> {
        if !noise_std.is_finite() || noise_std < 0.0 {
            return Err(Error::invalid("noise_std", "must be finite and >= 0"));
        }
        let support = x
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        Ok(GroundTruth {
            x,
            support,
            noise_std,
        })
    }
}

/// A linear measurement instance: matrix `A` (m x n), observation `y`
/// (length m), and optional ground truth for scoring.
#[derive(Debug, Clone)]
pub struct SensingProblem {
    a: DMatrix<f64>,
    y: DVector<f64>,
    truth: Option<GroundTruth>,
}

impl SensingProblem {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>, truth: Option<GroundTruth>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::invalid("A", "matrix must have m >= 1 and n >= 1"));
        }
        if y.len() != a.nrows() {
            return Err(Error::invalid(
                "y",
                format!("length {} does not match m = {}", y.len(), a.nrows()),
            ));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("A", "matrix contains non-finite entries"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("y", "vector contains non-finite entries"));
        }
        if let Some(t) = &truth {
            if t.x.len() != a.ncols() {
                return Err(Error::invalid(
                    "truth.x",
                    format!("length {} does not match n = {}", t.x.len(), a.ncols()),
                ));
            }
            let derived: BTreeSet<usize> = t
                .x
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i)
                .collect();
            if derived != t.support {
                return Err(Error::invalid(
                    "truth.support",
                    "support does not equal the nonzero index set of truth.x",
                ));
            }
        }
        Ok(SensingProblem { a, y, truth })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn observation(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    /// Number of measurements m.
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    /// Signal dimension n.
    pub fn n(&self) -> usize {
        self.a.ncols()
    }
}

/// Hidden split of the claimed support into its correct part (inside the true
/// support) and its erroneous part (outside). Scoring only; no solver reads it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenPartition {
    pub correct: BTreeSet<usize>,
    pub erroneous: BTreeSet<usize>,
}

/// The claimed support set handed to a solver. Indices are 0-based
/// internally; file formats and documentation use 1-based indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorSupport {
    indices: BTreeSet<usize>,
    hidden_partition: Option<HiddenPartition>,
}

impl PriorSupport {
    /// An empty claimed support; every mode degenerates to conventional
    /// behavior with this prior.
    pub fn empty() -> Self {
        PriorSupport {
            indices: BTreeSet::new(),
            hidden_partition: None,
        }
    }

    pub fn new(indices: BTreeSet<usize>) -> Self {
        PriorSupport {
            indices,
            hidden_partition: None,
        }
    }

    /// Builds a claimed support from its hidden split. The partition must be
    /// disjoint; their union becomes the claimed set.
    pub fn with_partition(
        correct: BTreeSet<usize>,
        erroneous: BTreeSet<usize>,
    ) -> Result<Self> {
        if !correct.is_disjoint(&erroneous) {
            return Err(Error::invalid(
                "hidden_partition",
                "correct and erroneous subsets must be disjoint",
            ));
        }
        let indices = correct.union(&erroneous).copied().collect();
        Ok(PriorSupport {
            indices,
            hidden_partition: Some(HiddenPartition { correct, erroneous }),
        })
    }

    /// Builds from 1-based indices as used in prior-support files.
    pub fn from_one_based<I: IntoIterator<Item = usize>>(indices: I) -> Result<Self> {
        let mut set = BTreeSet::new();
        for idx in indices {
            if idx == 0 {
                return Err(Error::invalid("prior", "1-based index 0 is out of range"));
            }
            set.insert(idx - 1);
        }
        Ok(PriorSupport::new(set))
    }

    /// Claimed indices (0-based).
    pub fn indices(&self) -> &BTreeSet<usize> {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.contains(&index)
    }

    /// The hidden split, if recorded at generation time. Scoring only.
    pub fn hidden_partition(&self) -> Option<&HiddenPartition> {
        self.hidden_partition.as_ref()
    }

    /// Checks all claimed indices lie in `0..n`.
    pub fn validate_range(&self, n: usize) -> Result<()> {
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "prior",
                format!("index {} (1-based {}) out of range for n = {}", bad, bad + 1, n),
            ));
        }
        Ok(())
    }
}

/// Hyperparameters and run controls shared by all three solver modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub mode: SolverMode,
    /// Gamma shape for every precision hyperprior.
    pub a: f64,
    /// Gamma rate on indices outside the claimed support (sparsity-encouraging).
    pub b_small: f64,
    /// Fixed Gamma rate on claimed indices in `Nsl` mode (non-sparsity-encouraging).
    pub b_large: f64,
    /// Gamma shape for the noise-precision hyperprior.
    pub c: f64,
    /// Gamma rate for the noise-precision hyperprior.
    pub d: f64,
    /// Gamma shape for the latent `b_i` hyperprior (`Sl` mode).
    pub p: f64,
    /// Gamma rate for the latent `b_i` hyperprior (`Sl` mode).
    pub q: f64,
    /// Convergence tolerance on the l2 change of the posterior mean.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Upper bound applied to every posterior precision mean.
    pub alpha_cap: f64,
    /// Upper bound applied to the noise-precision mean.
    pub gamma_cap: f64,
    /// Use `||dmu|| <= epsilon * (1 + ||mu||)` instead of the absolute rule.
    pub relative_tolerance: bool,
    /// Scale the columns of `A` to unit l2 norm before solving and map the
    /// estimate back afterwards.
    pub normalize_columns: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mode: SolverMode::Sbl,
            a: 1e-4,
            b_small: 1e-4,
            b_large: 0.5,
            c: 1e-4,
            d: 1e-4,
            p: 0.1,
            q: 0.1,
            epsilon: 1e-6,
            max_iter: 2000,
            alpha_cap: 1e12,
            gamma_cap: 1e12,
            relative_tolerance: false,
            normalize_columns: false,
        }
    }
}

impl SolverConfig {
    /// Default configuration for a given mode.
    pub fn for_mode(mode: SolverMode) -> Self {
        SolverConfig {
            mode,
            ..SolverConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a", self.a),
            ("b_small", self.b_small),
            ("b_large", self.b_large),
            ("c", self.c),
            ("d", self.d),
            ("p", self.p),
            ("q", self.q),
            ("epsilon", self.epsilon),
            ("alpha_cap", self.alpha_cap),
            ("gamma_cap", self.gamma_cap),
        ];
        for (name, value) in positive {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::invalid(name, "must be finite and > 0"));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-index Gamma rate schedule. `values[i]` is the rate `b_i` (for
/// learnable indices, its initial posterior mean); `learnable[i]` marks the
/// indices whose `b_i` is a latent variable.
#[derive(Debug, Clone, PartialEq)]
pub struct BSchedule {
    pub values: DVector<f64>,
    pub learnable: Vec<bool>,
}

impl BSchedule {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn any_learnable(&self) -> bool {
        self.learnable.iter().any(|&l| l)
    }
}

/// Builds the rate schedule for a mode and claimed support.
///
/// `Sbl` ignores the claimed set entirely; `Nsl` pins claimed indices at
/// `b_large`; `Sl` marks claimed indices learnable with initial mean `p / q`.
/// An empty claimed set is legal in every mode and reduces all three to the
/// conventional schedule.
pub fn build_b_schedule(
    config: &SolverConfig,
    prior: &PriorSupport,
    n: usize,
) -> Result<BSchedule> {
    if n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    prior.validate_range(n)?;
    let mut values = DVector::from_element(n, config.b_small);
    let mut learnable = vec![false; n];
    match config.mode {
        SolverMode::Sbl => {}
        SolverMode::Nsl => {
            for &i in prior.indices() {
                values[i] = config.b_large;
            }
        }
        SolverMode::Sl => {
            for &i in prior.indices() {
                values[i] = config.p / config.q;
                learnable[i] = true;
            }
        }
    }
    Ok(BSchedule { values, learnable })
}
