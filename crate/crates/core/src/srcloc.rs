//! Intensity-based source localization on a virtual grid.
//!
//! A rectangular field is discretized into grid points; randomly placed
//! sensors observe a superposition of source intensities attenuated by
//! `distance^-alpha`. Slowly moving sources make their previous positions
//! useful: the claimed support for time t+1 is the union of each slow
//! source's previous position and its two linear-index neighbors, which is
//! partly erroneous by construction.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{GroundTruth, PriorSupport, SensingProblem, SolverMode};
use crate::synth::{
    add_noise, aggregate, derive_trial_rng, run_trial_mode, SweepAxis, SweepResult, SynthSpec,
    TrialRecord, SRCLOC_DOMAIN,
};

/// Minimum sensor-to-grid-point distance; closer placements are re-drawn.
pub const D_MIN: f64 = 1e-2;

/// Condition-number bound above which a sensing matrix is re-drawn.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Energy-decay exponent of the sensing model.
pub const DEFAULT_DECAY_ALPHA: f64 = 2.0;

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// Rectangular grid of candidate source locations, row-major and 0-based
/// internally (1-based in file formats and documentation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridField {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
}

impl Default for GridField {
    fn default() -> Self {
        GridField {
            rows: 11,
            cols: 11,
            spacing: 1.0,
        }
    }
}

impl GridField {
    pub fn new(rows: usize, cols: usize, spacing: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("grid", "rows and cols must be >= 1"));
        }
        if !spacing.is_finite() || spacing <= 0.0 {
            return Err(Error::invalid("spacing", "must be finite and > 0"));
        }
        Ok(GridField {
            rows,
            cols,
            spacing,
        })
    }

    /// Number of grid points.
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    /// Coordinates of a 0-based, row-major grid index.
    pub fn coord(&self, index: usize) -> (f64, f64) {
        let row = index / self.cols;
        let col = index % self.cols;
        (col as f64 * self.spacing, row as f64 * self.spacing)
    }

    /// Width and height of the field.
    pub fn extent(&self) -> (f64, f64) {
        (
            (self.cols - 1) as f64 * self.spacing,
            (self.rows - 1) as f64 * self.spacing,
        )
    }
}

/// Sensor coordinates inside the field extent.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLayout {
    pub positions: Vec<(f64, f64)>,
}

impl SensorLayout {
    pub fn m(&self) -> usize {
        self.positions.len()
    }
}

/// Source placement for one time instant.
#[derive(Debug, Clone)]
pub struct SourceScenario {
    /// Grid indices of the slowly moving sources.
    pub slow_sources: Vec<usize>,
    /// Grid indices of the remaining, freely placed sources.
    pub fast_sources: Vec<usize>,
    /// Intensity per source: slow sources first, then fast.
    pub intensities: Vec<f64>,
    pub k: usize,
    pub k1: usize,
}

impl SourceScenario {
    /// All source positions as a set.
    pub fn positions(&self) -> BTreeSet<usize> {
        self.slow_sources
            .iter()
            .chain(&self.fast_sources)
            .copied()
            .collect()
    }

    /// The sparse intensity vector over the grid.
    pub fn signal(&self, n: usize) -> DVector<f64> {
        let mut x = DVector::zeros(n);
        for (j, &s) in self.slow_sources.iter().enumerate() {
            x[s] = self.intensities[j];
        }
        for (j, &s) in self.fast_sources.iter().enumerate() {
            x[s] = self.intensities[self.k1 + j];
        }
        x
    }
}

/// Draws `m` sensors uniformly over the field extent.
pub fn draw_sensors(grid: &GridField, m: usize, rng: &mut ChaCha8Rng) -> SensorLayout {
    let (width, height) = grid.extent();
    let positions = (0..m)
        .map(|_| {
            (
                rng.random_range(0.0..=width),
                rng.random_range(0.0..=height),
            )
        })
        .collect();
    SensorLayout { positions }
}

/// Builds the m x n sensing matrix with entries `d_ij^-decay_alpha`, where
/// `d_ij` is the distance from sensor j (row) to grid point i (column).
/// A sensor closer than [`D_MIN`] to any grid point is a placement error and
/// the caller must re-draw.
pub fn build_sensing_matrix(
    grid: &GridField,
    sensors: &SensorLayout,
    decay_alpha: f64,
) -> Result<DMatrix<f64>> {
    let n = grid.n();
    let m = sensors.m();
    let mut a = DMatrix::zeros(m, n);
    for (j, &(sx, sy)) in sensors.positions.iter().enumerate() {
        for i in 0..n {
            let (gx, gy) = grid.coord(i);
            let d = ((sx - gx).powi(2) + (sy - gy).powi(2)).sqrt();
            if d < D_MIN {
                return Err(Error::Placement(format!(
                    "sensor {j} is within {D_MIN} of grid point {}",
                    i + 1
                )));
            }
            a[(j, i)] = d.powf(-decay_alpha);
        }
    }
    Ok(a)
}

fn feasible_moves(s: usize, n: usize) -> Vec<usize> {
    let mut moves = Vec::with_capacity(3);
    if s > 0 {
        moves.push(s - 1);
    }
    moves.push(s);
    if s + 1 < n {
        moves.push(s + 1);
    }
    moves
}

/// Moves each slow source to a uniform draw among its feasible linear-index
/// neighbors `{s-1, s, s+1}` clamped to the grid. Collisions are resolved by
/// re-drawing the later source's move; if a pass gets stuck the whole
/// transition is re-drawn (staying put is always collision-free, so this
/// terminates).
pub fn evolve_sources(current_slow: &[usize], grid: &GridField, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = grid.n();
    'restart: for _ in 0..1000 {
        let mut next = Vec::with_capacity(current_slow.len());
        for &s in current_slow {
            let moves = feasible_moves(s, n);
            let mut chosen = None;
            for _ in 0..64 {
                let candidate = moves[rng.random_range(0..moves.len())];
                if !next.contains(&candidate) {
                    chosen = Some(candidate);
                    break;
                }
            }
            match chosen {
                Some(c) => next.push(c),
                None => continue 'restart,
            }
        }
        return next;
    }
    // Unreachable in practice; identity moves preserve distinctness.
    current_slow.to_vec()
}

/// The claimed support for the next instant: the union of `{s-1, s, s+1}`
/// (clamped to the grid) over the previous slow-source positions. No hidden
/// partition is recorded; the split is unknown by construction.
pub fn prior_from_previous(prev_slow: &[usize], n: usize) -> PriorSupport {
    let indices: BTreeSet<usize> = prev_slow
        .iter()
        .flat_map(|&s| feasible_moves(s, n))
        .collect();
    PriorSupport::new(indices)
}

/// True iff the K largest-magnitude entries of `x_hat` sit exactly on the
/// true positions. Ties are broken toward the smaller index.
pub fn localization_success(
    x_hat: &DVector<f64>,
    true_positions: &BTreeSet<usize>,
    k: usize,
) -> bool {
    debug_assert_eq!(true_positions.len(), k);
    let top = top_k_indices(x_hat, k);
    top == *true_positions
}

fn top_k_indices(x: &DVector<f64>, k: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| {
        x[j].abs()
            .partial_cmp(&x[i].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.into_iter().take(k).collect()
}

struct SrclocInstance {
    problem: SensingProblem,
    prior: PriorSupport,
    positions: BTreeSet<usize>,
}

fn generate_srcloc_trial(
    grid: &GridField,
    k: usize,
    k1: usize,
    m: usize,
    snr_db: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SrclocInstance> {
    let n = grid.n();

    // Sensor placement with bounded re-draws against the distance and
    // conditioning guards.
    let mut a = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let sensors = draw_sensors(grid, m, rng);
        let candidate = match build_sensing_matrix(grid, &sensors, DEFAULT_DECAY_ALPHA) {
            Ok(matrix) => matrix,
            Err(Error::Placement(_)) => continue,
            Err(e) => return Err(e),
        };
        let singular = candidate.clone().svd(false, false).singular_values;
        let smallest = singular[singular.len() - 1];
        if smallest <= 0.0 || singular[0] / smallest > CONDITION_LIMIT {
            continue;
        }
        a = Some(candidate);
        break;
    }
    let a = a.ok_or_else(|| {
        Error::Placement(format!(
            "no valid sensor layout within {MAX_PLACEMENT_ATTEMPTS} attempts"
        ))
    })?;

    // Slow sources at time t, their move to t+1, and the claimed support
    // built from the t positions.
    let slow_prev: Vec<usize> = rand::seq::index::sample(rng, n, k1).into_vec();
    let slow_next = evolve_sources(&slow_prev, grid, rng);
    let prior = prior_from_previous(&slow_prev, n);

    // Remaining sources live outside the claimed set.
    let outside: Vec<usize> = (0..n).filter(|i| !prior.contains(*i)).collect();
    let fast: Vec<usize> = rand::seq::index::sample(rng, outside.len(), k - k1)
        .into_iter()
        .map(|i| outside[i])
        .collect();

    let intensities: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..=1.5)).collect();
    let scenario = SourceScenario {
        slow_sources: slow_next,
        fast_sources: fast,
        intensities,
        k,
        k1,
    };
    let x = scenario.signal(n);
    let positions = scenario.positions();
    let ax = &a * &x;
    let (y, sigma) = add_noise(&ax, snr_db, rng)?;
    let truth = GroundTruth {
        x,
        support: positions.clone(),
        noise_std: sigma,
    };
    Ok(SrclocInstance {
        problem: SensingProblem::new(a, y, Some(truth))?,
        prior,
        positions,
    })
}

/// Runs the localization experiment over a grid of measurement ratios
/// `m_grid` (each `m = round(ratio * n)`). Noiseless trials are scored by
/// the normalized-error rule, noisy trials by exact top-K localization.
/// Deterministic for a given seed at any `parallelism` (0 = rayon default).
#[allow(clippy::too_many_arguments)]
pub fn run_srcloc_experiment(
    grid: &GridField,
    k: usize,
    k1: usize,
    m_grid: &[f64],
    snr_db: Option<f64>,
    trials: usize,
    seed: u64,
    modes: &[SolverMode],
    parallelism: usize,
) -> Result<SweepResult> {
    let n = grid.n();
    if k == 0 || k > n {
        return Err(Error::invalid("K", "must satisfy 1 <= K <= n"));
    }
    if k1 > k {
        return Err(Error::invalid("K1", "must satisfy K1 <= K"));
    }
    if m_grid.is_empty() {
        return Err(Error::invalid("m_grid", "must be nonempty"));
    }
    if trials == 0 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    if modes.is_empty() {
        return Err(Error::invalid("modes", "must be nonempty"));
    }
    // The claimed set can cover up to 3*K1 points; the rest must fit outside.
    if k - k1 > n.saturating_sub(3 * k1) {
        return Err(Error::invalid(
            "K",
            "too many free sources for the grid size",
        ));
    }
    let ms: Vec<usize> = m_grid
        .iter()
        .map(|&r| {
            let m = (r * n as f64).round() as i64;
            if m < 1 {
                Err(Error::invalid(
                    "m_grid",
                    format!("ratio {r} resolves to m < 1"),
                ))
            } else {
                Ok(m as usize)
            }
        })
        .collect::<Result<_>>()?;

    let tasks: Vec<(usize, usize)> = (0..ms.len())
        .flat_map(|gi| (0..trials).map(move |t| (gi, t)))
        .collect();
    let run_task = |&(gi, t): &(usize, usize)| -> Vec<TrialRecord> {
        let m = ms[gi];
        let spec = SynthSpec {
            n,
            k,
            m: m.min(n),
            size_s: 0,
            size_e: 0,
            snr_db,
            seed,
        };
        let mut rng = derive_trial_rng(seed, SRCLOC_DOMAIN, gi as u64, t as u64);
        match generate_srcloc_trial(grid, k, k1, m, snr_db, &mut rng) {
            Ok(instance) => modes
                .iter()
                .map(|&mode| {
                    let outcome = run_trial_mode(&instance.problem, &instance.prior, mode);
                    // Noiseless trials use the normalized-error rule; noisy
                    // trials count exact top-K localization.
                    let success = if snr_db.is_none() {
                        outcome.success
                    } else {
                        outcome
                            .x_hat
                            .as_ref()
                            .map(|x| localization_success(x, &instance.positions, k))
                            .unwrap_or(false)
                    };
                    TrialRecord {
                        spec,
                        mode,
                        nmse: outcome.nmse,
                        success,
                        iterations: outcome.iterations,
                        wall_ms: outcome.wall_ms,
                    }
                })
                .collect(),
            Err(_) => modes
                .iter()
                .map(|&mode| TrialRecord {
                    spec,
                    mode,
                    nmse: 1.0,
                    success: false,
                    iterations: 0,
                    wall_ms: 0.0,
                })
                .collect(),
        }
    };
    let records_nested = if parallelism == 0 {
        use rayon::prelude::*;
        tasks.par_iter().map(run_task).collect::<Vec<_>>()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::invalid("parallelism", e.to_string()))?;
        use rayon::prelude::*;
        pool.install(|| tasks.par_iter().map(run_task).collect::<Vec<_>>())
    };
    let records: Vec<TrialRecord> = records_nested.into_iter().flatten().collect();
    Ok(aggregate(SweepAxis::MOverN, m_grid, modes, trials, records))
}
