//! Synthetic recovery experiments: seeded problem generation, partly
//! erroneous prior-support injection, and paired Monte Carlo sweeps.
//!
//! Every trial derives its own counter-based RNG from
//! `(seed, domain, grid index, trial index)`, so results are independent of
//! the worker count and reproducible from the config alone. All modes at a
//! given (grid point, trial) see the identical problem and prior.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroundTruth, PriorSupport, SensingProblem, SolverConfig, SolverMode};

/// Success threshold on the normalized squared error.
pub const SUCCESS_NMSE_THRESHOLD: f64 = 1e-6;

/// Domain tag for synthetic-sweep RNG streams.
pub const SYNTH_DOMAIN: u64 = 1;
/// Domain tag for source-localization RNG streams.
pub const SRCLOC_DOMAIN: u64 = 2;

/// Derives the independent RNG stream for one trial. Distinct
/// `(seed, domain, grid_index, trial)` tuples give unrelated streams.
pub fn derive_trial_rng(seed: u64, domain: u64, grid_index: u64, trial: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&grid_index.to_le_bytes());
    key[24..32].copy_from_slice(&trial.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// One synthetic problem configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    /// True support size.
    pub k: usize,
    /// Measurement count.
    pub m: usize,
    /// Correct claimed indices (drawn from the true support).
    pub size_s: usize,
    /// Erroneous claimed indices (drawn from the complement).
    pub size_e: usize,
    /// Signal-to-noise ratio in dB; `None` is the noiseless case.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n", "must be >= 1"));
        }
        if self.k > self.n {
            return Err(Error::invalid("K", "must satisfy K <= n"));
        }
        if self.size_s > self.k {
            return Err(Error::invalid("size_S", "must satisfy size_S <= K"));
        }
        if self.size_e > self.n - self.k {
            return Err(Error::invalid("size_E", "must satisfy size_E <= n - K"));
        }
        if self.m == 0 || self.m > self.n {
            return Err(Error::invalid("m", "must satisfy 1 <= m <= n"));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::invalid("snr_db", "must be finite when present"));
            }
        }
        Ok(())
    }
}

/// Outcome of one (spec, mode) solve.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub spec: SynthSpec,
    pub mode: SolverMode,
    pub nmse: f64,
    pub success: bool,
    pub iterations: usize,
    pub wall_ms: f64,
}

/// Sweep axes for the synthetic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "m_over_n")]
    MOverN,
    #[serde(rename = "E_size")]
    ESize,
    #[serde(rename = "snr_db")]
    SnrDb,
}

/// Aggregates for one (grid point, mode) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis_value: f64,
    pub mode: SolverMode,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_nmse: f64,
    pub mean_iters: f64,
}

/// Full sweep output: aggregates in (grid point, mode) order plus the
/// per-trial records they were computed from.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub records: Vec<TrialRecord>,
}

/// Draws a K-sparse signal: support uniform over K-subsets, nonzeros
/// standard normal (assigned in ascending index order).
pub fn gen_sparse_signal(
    n: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(DVector<f64>, BTreeSet<usize>)> {
    if k > n {
        return Err(Error::invalid("K", "must satisfy K <= n"));
    }
    let support: BTreeSet<usize> = rand::seq::index::sample(rng, n, k).into_iter().collect();
    let mut x = DVector::zeros(n);
    for &i in &support {
        let mut v: f64 = rng.sample(StandardNormal);
        while v == 0.0 {
            v = rng.sample(StandardNormal);
        }
        x[i] = v;
    }
    Ok((x, support))
}

/// Draws an m x n matrix with i.i.d. standard normal entries
/// (column-major draw order).
pub fn gen_gaussian_matrix(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_iterator(m, n, (0..m * n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws the claimed support: `size_s` correct indices uniformly from the
/// true support and `size_e` erroneous ones uniformly from its complement.
/// The hidden split is recorded for scoring.
pub fn gen_prior_support(
    support: &BTreeSet<usize>,
    complement: &BTreeSet<usize>,
    size_s: usize,
    size_e: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PriorSupport> {
    if size_s > support.len() {
        return Err(Error::invalid("size_S", "exceeds the true support size"));
    }
    if size_e > complement.len() {
        return Err(Error::invalid("size_E", "exceeds the complement size"));
    }
    let support_vec: Vec<usize> = support.iter().copied().collect();
    let complement_vec: Vec<usize> = complement.iter().copied().collect();
    let correct: BTreeSet<usize> = rand::seq::index::sample(rng, support_vec.len(), size_s)
        .into_iter()
        .map(|i| support_vec[i])
        .collect();
    let erroneous: BTreeSet<usize> = rand::seq::index::sample(rng, complement_vec.len(), size_e)
        .into_iter()
        .map(|i| complement_vec[i])
        .collect();
    PriorSupport::with_partition(correct, erroneous)
}

/// Adds white Gaussian noise at the requested SNR. The noise scale satisfies
/// the SNR definition in expectation: `sigma = ||Ax|| 10^(-snr/20) / sqrt(m)`.
/// `None` means noiseless (`y = Ax`, `sigma = 0`).
pub fn add_noise(
    ax: &DVector<f64>,
    snr_db: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(DVector<f64>, f64)> {
    let snr_db = match snr_db {
        None => return Ok((ax.clone(), 0.0)),
        Some(v) if v.is_infinite() && v > 0.0 => return Ok((ax.clone(), 0.0)),
        Some(v) => v,
    };
    let signal_norm = ax.norm();
    if signal_norm == 0.0 {
        return Err(Error::invalid(
            "snr_db",
            "finite SNR requires a nonzero signal",
        ));
    }
    let m = ax.len();
    let sigma = signal_norm * 10f64.powf(-snr_db / 20.0) / (m as f64).sqrt();
    let noise = DVector::from_iterator(
        m,
        (0..m).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)),
    );
    Ok((ax + noise, sigma))
}

/// Normalized squared error `||x - x_hat||^2 / ||x||^2`.
pub fn nmse(x_true: &DVector<f64>, x_hat: &DVector<f64>) -> Result<f64> {
    if x_true.len() != x_hat.len() {
        return Err(Error::invalid("x_hat", "length mismatch with x_true"));
    }
    let denom = x_true.norm_squared();
    if denom == 0.0 {
        return Err(Error::invalid("x_true", "must be nonzero"));
    }
    Ok((x_true - x_hat).norm_squared() / denom)
}

/// Generates one trial instance from a spec: sparse signal, Gaussian matrix,
/// claimed support, then noise, in that fixed draw order.
pub fn generate_trial(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(SensingProblem, PriorSupport)> {
    spec.validate()?;
    let (x, support) = gen_sparse_signal(spec.n, spec.k, rng)?;
    let a = gen_gaussian_matrix(spec.m, spec.n, rng);
    let complement: BTreeSet<usize> = (0..spec.n).filter(|i| !support.contains(i)).collect();
    let prior = gen_prior_support(&support, &complement, spec.size_s, spec.size_e, rng)?;
    let ax = &a * &x;
    let (y, sigma) = add_noise(&ax, spec.snr_db, rng)?;
    let truth = GroundTruth {
        x,
        support,
        noise_std: sigma,
    };
    let problem = SensingProblem::new(a, y, Some(truth))?;
    Ok((problem, prior))
}

fn resolve_spec(base: &SynthSpec, axis: SweepAxis, value: f64) -> Result<SynthSpec> {
    let mut spec = *base;
    match axis {
        SweepAxis::MOverN => {
            let m = (value * base.n as f64).round() as i64;
            if m < 1 || m as usize > base.n {
                return Err(Error::invalid(
                    "grid",
                    format!("m/n value {value} resolves outside 1..=n"),
                ));
            }
            spec.m = m as usize;
        }
        SweepAxis::ESize => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::invalid(
                    "grid",
                    format!("|E| value {value} is not a nonnegative integer"),
                ));
            }
            spec.size_e = value as usize;
        }
        SweepAxis::SnrDb => {
            spec.snr_db = Some(value);
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Scored outcome of one (problem, mode) solve.
#[derive(Debug, Clone)]
pub struct ModeOutcome {
    pub nmse: f64,
    /// Normalized-error success (`nmse <= 1e-6`).
    pub success: bool,
    pub iterations: usize,
    pub wall_ms: f64,
    /// The estimate; absent when the solver broke down.
    pub x_hat: Option<DVector<f64>>,
}

/// Runs one mode on a problem and scores it against the ground truth.
/// Solver breakdowns are recorded as failures with unit error, matching the
/// zero estimate.
pub fn run_trial_mode(
    problem: &SensingProblem,
    prior: &PriorSupport,
    mode: SolverMode,
) -> ModeOutcome {
    let config = SolverConfig::for_mode(mode);
    let started = std::time::Instant::now();
    let outcome = crate::engine::solve(problem, prior, &config);
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let truth = problem.truth().expect("synthetic trials carry ground truth");
    match outcome {
        Ok(result) => {
            let err = nmse(&truth.x, &result.x_hat).unwrap_or(1.0);
            ModeOutcome {
                nmse: err,
                success: err <= SUCCESS_NMSE_THRESHOLD,
                iterations: result.iterations,
                wall_ms,
                x_hat: Some(result.x_hat),
            }
        }
        Err(_) => ModeOutcome {
            nmse: 1.0,
            success: false,
            iterations: 0,
            wall_ms,
            x_hat: None,
        },
    }
}

fn run_tasks<T, F>(tasks: Vec<T>, parallelism: usize, f: F) -> Result<Vec<Vec<TrialRecord>>>
where
    T: Send,
    F: Fn(&T) -> Vec<TrialRecord> + Send + Sync,
{
    if parallelism == 0 {
        return Ok(tasks.par_iter().map(&f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::invalid("parallelism", e.to_string()))?;
    Ok(pool.install(|| tasks.par_iter().map(&f).collect()))
}

pub(crate) fn aggregate(
    axis: SweepAxis,
    grid: &[f64],
    modes: &[SolverMode],
    trials: usize,
    records: Vec<TrialRecord>,
) -> SweepResult {
    let mut points = Vec::with_capacity(grid.len() * modes.len());
    for (gi, &axis_value) in grid.iter().enumerate() {
        for (mi, &mode) in modes.iter().enumerate() {
            let mut successes = 0usize;
            let mut nmse_sum = 0.0;
            let mut iter_sum = 0.0;
            for t in 0..trials {
                let record = &records[(gi * trials + t) * modes.len() + mi];
                debug_assert_eq!(record.mode, mode);
                if record.success {
                    successes += 1;
                }
                nmse_sum += record.nmse;
                iter_sum += record.iterations as f64;
            }
            points.push(SweepPoint {
                axis_value,
                mode,
                trials,
                success_rate: successes as f64 / trials as f64,
                mean_nmse: nmse_sum / trials as f64,
                mean_iters: iter_sum / trials as f64,
            });
        }
    }
    SweepResult {
        axis,
        grid: grid.to_vec(),
        points,
        records,
    }
}

/// Runs a paired Monte Carlo sweep. Each (grid point, trial) derives its own
/// RNG from the base seed, generates one instance, and scores every mode on
/// it. Aggregation order is fixed, so results do not depend on
/// `parallelism` (0 = rayon default).
pub fn run_sweep(
    base: &SynthSpec,
    axis: SweepAxis,
    grid: &[f64],
    modes: &[SolverMode],
    trials: usize,
    parallelism: usize,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("grid", "must be nonempty"));
    }
    if trials == 0 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    if modes.is_empty() {
        return Err(Error::invalid("modes", "must be nonempty"));
    }
    // Validate every resolved grid point before any computation.
    let specs: Vec<SynthSpec> = grid
        .iter()
        .map(|&v| resolve_spec(base, axis, v))
        .collect::<Result<_>>()?;

    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|gi| (0..trials).map(move |t| (gi, t)))
        .collect();
    let records_nested = run_tasks(tasks, parallelism, |&(gi, t)| {
        let spec = specs[gi];
        let mut rng = derive_trial_rng(base.seed, SYNTH_DOMAIN, gi as u64, t as u64);
        match generate_trial(&spec, &mut rng) {
            Ok((problem, prior)) => modes
                .iter()
                .map(|&mode| {
                    let outcome = run_trial_mode(&problem, &prior, mode);
                    TrialRecord {
                        spec,
                        mode,
                        nmse: outcome.nmse,
                        success: outcome.success,
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
    })?;
    let records: Vec<TrialRecord> = records_nested.into_iter().flatten().collect();
    Ok(aggregate(axis, grid, modes, trials, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        derive_trial_rng(seed, 99, 0, 0)
    }

    #[test]
    fn sparse_signal_edge_cases() {
        let (x, support) = gen_sparse_signal(5, 0, &mut rng(1)).unwrap();
        assert_eq!(x, DVector::zeros(5));
        assert!(support.is_empty());

        let (x, support) = gen_sparse_signal(5, 5, &mut rng(2)).unwrap();
        assert_eq!(support.len(), 5);
        assert!(x.iter().all(|v| *v != 0.0));

        assert!(gen_sparse_signal(3, 4, &mut rng(3)).is_err());
    }

    #[test]
    fn sparse_signal_support_is_uniform() {
        let n = 50;
        let k = 16;
        let mut counts = vec![0usize; n];
        let draws = 10_000;
        for s in 0..draws {
            let (_, support) = gen_sparse_signal(n, k, &mut rng(s)).unwrap();
            assert_eq!(support.len(), k);
            for &i in &support {
                counts[i] += 1;
            }
        }
        let expected = k as f64 / n as f64;
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - expected).abs() <= 0.015,
                "index frequency {freq} deviates from {expected}"
            );
        }
    }

    #[test]
    fn gaussian_matrix_shape_and_mean() {
        let a = gen_gaussian_matrix(25, 50, &mut rng(7));
        assert_eq!((a.nrows(), a.ncols()), (25, 50));
        let mean = a.iter().sum::<f64>() / 1250.0;
        assert!(mean.abs() <= 0.06, "sample mean {mean}");

        let single = gen_gaussian_matrix(1, 1, &mut rng(8));
        assert!(single[(0, 0)].is_finite());

        let first = gen_gaussian_matrix(4, 3, &mut rng(9));
        let second = gen_gaussian_matrix(4, 3, &mut rng(9));
        assert_eq!(first, second);
    }

    #[test]
    fn prior_support_partition_sizes() {
        let support: BTreeSet<usize> = (0..16).collect();
        let complement: BTreeSet<usize> = (16..50).collect();

        let full = gen_prior_support(&support, &complement, 16, 0, &mut rng(10)).unwrap();
        assert_eq!(full.indices(), &support);

        let empty = gen_prior_support(&support, &complement, 0, 0, &mut rng(11)).unwrap();
        assert!(empty.is_empty());

        let mixed = gen_prior_support(&support, &complement, 12, 8, &mut rng(12)).unwrap();
        assert_eq!(mixed.len(), 20);
        let overlap = mixed.indices().intersection(&support).count();
        assert_eq!(overlap, 12);
        let partition = mixed.hidden_partition().unwrap();
        assert_eq!(partition.correct.len(), 12);
        assert_eq!(partition.erroneous.len(), 8);

        assert!(gen_prior_support(&support, &complement, 17, 0, &mut rng(13)).is_err());
    }

    #[test]
    fn noise_sigma_matches_definition() {
        // Noiseless flag.
        let ax = DVector::from_vec(vec![3.0, 0.0]);
        let (y, sigma) = add_noise(&ax, None, &mut rng(20)).unwrap();
        assert_eq!(y, ax);
        assert_eq!(sigma, 0.0);
        let (y, sigma) = add_noise(&ax, Some(f64::INFINITY), &mut rng(20)).unwrap();
        assert_eq!(y, ax);
        assert_eq!(sigma, 0.0);

        // snr 0 dB with ||Ax|| = 3, m = 9 gives sigma = 1.
        let ax = DVector::from_element(9, 1.0);
        let (_, sigma) = add_noise(&ax, Some(0.0), &mut rng(21)).unwrap();
        assert!((sigma - 1.0).abs() < 1e-12);

        // Zero signal with finite SNR rejected.
        let zero = DVector::zeros(4);
        assert!(add_noise(&zero, Some(10.0), &mut rng(22)).is_err());
    }

    #[test]
    fn realized_snr_concentrates() {
        let m = 25;
        let snr = 20.0;
        let mut within = 0usize;
        let draws = 1000;
        for s in 0..draws {
            let mut r = rng(1000 + s);
            let ax = DVector::from_iterator(
                m,
                (0..m).map(|_| r.sample::<f64, _>(StandardNormal)),
            );
            let (y, _) = add_noise(&ax, Some(snr), &mut r).unwrap();
            let w = &y - &ax;
            let realized = 20.0 * (ax.norm() / w.norm()).log10();
            if (17.0..=23.0).contains(&realized) {
                within += 1;
            }
        }
        assert!(
            within as f64 / draws as f64 >= 0.99,
            "only {within}/{draws} draws within 3 dB"
        );
    }

    #[test]
    fn nmse_reference_values() {
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(nmse(&x, &x).unwrap(), 0.0);
        assert_eq!(nmse(&x, &DVector::zeros(2)).unwrap(), 1.0);
        let swapped = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(nmse(&x, &swapped).unwrap(), 2.0);
        assert!(nmse(&DVector::zeros(2), &x).is_err());
    }

    #[test]
    fn single_trial_sweep_shape() {
        let base = SynthSpec {
            n: 16,
            k: 3,
            m: 12,
            size_s: 2,
            size_e: 1,
            snr_db: None,
            seed: 42,
        };
        let result = run_sweep(
            &base,
            SweepAxis::MOverN,
            &[0.75],
            &[SolverMode::Sbl],
            1,
            1,
        )
        .unwrap();
        assert_eq!(result.records.len(), 1);
        assert_eq!(result.points.len(), 1);
        assert_eq!(result.points[0].trials, 1);
    }

    #[test]
    fn sweep_independent_of_parallelism() {
        let base = SynthSpec {
            n: 20,
            k: 4,
            m: 14,
            size_s: 3,
            size_e: 2,
            snr_db: Some(20.0),
            seed: 7,
        };
        let grid = [0.5, 0.7];
        let modes = [SolverMode::Sbl, SolverMode::Nsl, SolverMode::Sl];
        let serial = run_sweep(&base, SweepAxis::MOverN, &grid, &modes, 4, 1).unwrap();
        let parallel = run_sweep(&base, SweepAxis::MOverN, &grid, &modes, 4, 8).unwrap();
        assert_eq!(serial.points, parallel.points);
        for (a, b) in serial.records.iter().zip(&parallel.records) {
            assert_eq!(a.nmse.to_bits(), b.nmse.to_bits());
            assert_eq!(a.iterations, b.iterations);
        }
    }

    #[test]
    fn trials_share_instances_across_modes() {
        let spec = SynthSpec {
            n: 12,
            k: 2,
            m: 8,
            size_s: 1,
            size_e: 1,
            snr_db: None,
            seed: 5,
        };
        let mut rng_a = derive_trial_rng(spec.seed, SYNTH_DOMAIN, 0, 3);
        let mut rng_b = derive_trial_rng(spec.seed, SYNTH_DOMAIN, 0, 3);
        let (problem_a, prior_a) = generate_trial(&spec, &mut rng_a).unwrap();
        let (problem_b, prior_b) = generate_trial(&spec, &mut rng_b).unwrap();
        assert_eq!(problem_a.matrix(), problem_b.matrix());
        assert_eq!(problem_a.observation(), problem_b.observation());
        assert_eq!(prior_a, prior_b);
    }

    #[test]
    fn invalid_grid_rejected_before_running() {
        let base = SynthSpec {
            n: 10,
            k: 2,
            m: 5,
            size_s: 0,
            size_e: 0,
            snr_db: None,
            seed: 1,
        };
        assert!(run_sweep(
            &base,
            SweepAxis::MOverN,
            &[1.5],
            &[SolverMode::Sbl],
            1,
            1
        )
        .is_err());
        assert!(run_sweep(
            &base,
            SweepAxis::ESize,
            &[2.5],
            &[SolverMode::Sbl],
            1,
            1
        )
        .is_err());
    }
}
