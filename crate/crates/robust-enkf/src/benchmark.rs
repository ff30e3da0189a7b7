//! Benchmark systems, Monte Carlo harness, and MSE/timing metrics.
//!
//! Two built-in systems exercise the engines under heavy-tailed
//! observation noise: a linear rotation observed through a row sum, and a
//! mildly contracting nonlinear map observed through `x + sin(x)`. In
//! both, the filters are handed the *nominal* observation covariance while
//! the simulator draws from a Gaussian mixture with a 10% outlier
//! component — the mismatch the robust engine is designed for.
//!
//! Runs are embarrassingly parallel: run `r` derives everything from seed
//! `base_seed + r`, so results are identical whether runs execute serially
//! or on a rayon pool.

use std::time::Instant;

use nalgebra::{dmatrix, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::correntropy::KernelBandwidth;
use crate::error::{Error, Result};
use crate::filter::{enkf_gain, FilterConfig, FilterEngine};
use crate::model::{simulate, NoiseModel, ObservationJacobian, StateSpaceModel};

/// A labeled engine configuration. The seed inside the config is
/// overwritten per run by the harness.
#[derive(Clone, Debug)]
pub struct EngineSpec {
    pub label: String,
    pub config: FilterConfig,
}

impl EngineSpec {
    pub fn enkf(label: impl Into<String>, ensemble_size: usize) -> Self {
        EngineSpec {
            label: label.into(),
            config: FilterConfig::enkf(ensemble_size),
        }
    }

    pub fn mc(
        label: impl Into<String>,
        ensemble_size: usize,
        bandwidth: KernelBandwidth,
    ) -> Self {
        EngineSpec {
            label: label.into(),
            config: FilterConfig::mc_enkf(ensemble_size, bandwidth),
        }
    }
}

/// Full experiment description: system, true noise sources, Monte Carlo
/// dimensions, and the engine grid to compare.
pub struct BenchmarkSpec {
    pub model: StateSpaceModel,
    pub proc_noise: NoiseModel,
    pub obs_noise: NoiseModel,
    pub x0_cov: DMatrix<f64>,
    pub steps: usize,
    pub runs: usize,
    pub engines: Vec<EngineSpec>,
}

/// Number of ensemble members used by the built-in benchmarks.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 100;
/// Steps per run in the built-in benchmarks.
pub const DEFAULT_STEPS: usize = 1000;
/// Monte Carlo runs in the built-in benchmarks.
pub const DEFAULT_RUNS: usize = 100;

/// The standard engine grid: the plain engine, the adaptive robust
/// engine, and fixed bandwidths spanning four orders of magnitude.
pub fn table_engines(ensemble_size: usize) -> Vec<EngineSpec> {
    let mut engines = vec![
        EngineSpec::enkf("enkf", ensemble_size),
        EngineSpec::mc("mc:adaptive", ensemble_size, KernelBandwidth::Adaptive),
    ];
    for sigma in [0.1, 0.5, 2.0, 5.0, 10.0, 10000.0] {
        engines.push(EngineSpec::mc(
            format!("mc:{sigma}"),
            ensemble_size,
            KernelBandwidth::Fixed(sigma),
        ));
    }
    engines
}

/// Linear benchmark: rotation by pi/18 with `H = [1 1]`,
/// `Q = 0.01 I`, nominal `R = 0.01`, and true observation noise
/// `0.9 N(0, 0.01) + 0.1 N(0, 1)`.
pub fn linear_benchmark() -> BenchmarkSpec {
    let alpha = std::f64::consts::PI / 18.0;
    let rotation = dmatrix![alpha.cos(), alpha.sin(); -alpha.sin(), alpha.cos()];
    let h = dmatrix![1.0, 1.0];
    let h_jac = h.clone();
    let q = DMatrix::identity(2, 2) * 0.01;
    let r = dmatrix![0.01];
    let model = StateSpaceModel::new(
        2,
        1,
        Box::new(move |_, x| &rotation * x),
        Box::new(move |_, x| &h * x),
        &q,
        &r,
        ObservationJacobian::Analytic(Box::new(move |_, _| h_jac.clone())),
    )
    .expect("linear benchmark model is well-formed");
    BenchmarkSpec {
        model,
        proc_noise: NoiseModel::gaussian(&q).expect("SPD"),
        obs_noise: NoiseModel::gaussian_mixture(&r, &(100.0 * &r), 0.1).expect("SPD"),
        x0_cov: DMatrix::identity(2, 2),
        steps: DEFAULT_STEPS,
        runs: DEFAULT_RUNS,
        engines: table_engines(DEFAULT_ENSEMBLE_SIZE),
    }
}

/// Nonlinear benchmark: `x <- (I + 0.1 [[-1, 0.2], [0.2, -1]]) x
/// + 0.1 cos(x)` observed through `y = x + sin(x)`, `Q = I`, nominal
/// `R = I`, true observation noise `0.9 N(0, I) + 0.1 N(0, 1000 I)`.
pub fn nonlinear_benchmark() -> BenchmarkSpec {
    let drift = DMatrix::identity(2, 2) + 0.1 * dmatrix![-1.0, 0.2; 0.2, -1.0];
    let q = DMatrix::identity(2, 2);
    let r = DMatrix::identity(2, 2);
    let model = StateSpaceModel::new(
        2,
        2,
        Box::new(move |_, x| &drift * x + 0.1 * x.map(f64::cos)),
        Box::new(|_, x| x + x.map(f64::sin)),
        &q,
        &r,
        ObservationJacobian::Analytic(Box::new(|_, x| {
            DMatrix::from_diagonal(&x.map(|v| 1.0 + v.cos()))
        })),
    )
    .expect("nonlinear benchmark model is well-formed");
    BenchmarkSpec {
        model,
        proc_noise: NoiseModel::gaussian(&q).expect("SPD"),
        obs_noise: NoiseModel::gaussian_mixture(&r, &(1000.0 * &r), 0.1).expect("SPD"),
        x0_cov: DMatrix::identity(2, 2),
        steps: DEFAULT_STEPS,
        runs: DEFAULT_RUNS,
        engines: table_engines(DEFAULT_ENSEMBLE_SIZE),
    }
}

/// Time-averaged squared Euclidean state error,
/// `(1/N) sum_k ||estimate_k - truth_k||^2`, summed over state dimensions.
pub fn mse(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "estimate/truth length mismatch: {} vs {}",
            estimates.len(),
            truth.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::Config("MSE needs at least one step".into()));
    }
    let mut total = 0.0;
    for (k, (estimate, target)) in estimates.iter().zip(truth).enumerate() {
        if estimate.len() != target.len() {
            return Err(Error::Dimension(format!(
                "estimate/truth dimension mismatch at step {k}"
            )));
        }
        total += (estimate - target).norm_squared();
    }
    Ok(total / estimates.len() as f64)
}

/// Aggregate outcome of one engine across all runs.
#[derive(Clone, Debug)]
pub struct EngineResult {
    pub label: String,
    /// Mean per-run MSE.
    pub mse: f64,
    /// Mean per-run wall-clock seconds of the filtering loop, excluding
    /// the simulation.
    pub cpu_seconds: f64,
    pub per_run_mse: Vec<f64>,
    pub per_run_seconds: Vec<f64>,
}

/// Truth and per-engine estimates of the first run, for plotting.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    /// Truth at steps `1..=N`, matching the estimate sequences.
    pub truth: Vec<DVector<f64>>,
    pub estimates: Vec<(String, Vec<DVector<f64>>)>,
}

/// Result of a full Monte Carlo comparison.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub engines: Vec<EngineResult>,
    pub base_seed: u64,
    pub trajectories: Option<TrajectoryRecord>,
}

impl RunResult {
    pub fn engine(&self, label: &str) -> Option<&EngineResult> {
        self.engines.iter().find(|e| e.label == label)
    }
}

struct SingleRun {
    mses: Vec<f64>,
    seconds: Vec<f64>,
    capture: Option<TrajectoryRecord>,
}

fn execute_run(
    spec: &BenchmarkSpec,
    init: &NoiseModel,
    seed: u64,
    capture: bool,
) -> Result<SingleRun> {
    let mut sim_rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectory = simulate(
        &spec.model,
        &spec.proc_noise,
        &spec.obs_noise,
        init,
        spec.steps,
        &mut sim_rng,
    )?;

    let mut mses = Vec::with_capacity(spec.engines.len());
    let mut seconds = Vec::with_capacity(spec.engines.len());
    let mut estimates_by_engine = Vec::new();
    for engine in &spec.engines {
        // every engine in a run shares the same seed so engines are
        // comparable draw-for-draw
        let config = engine.config.clone().with_seed(seed);
        let mut filter = FilterEngine::new(&spec.model, config, &spec.x0_cov)?;
        let start = Instant::now();
        let mut estimates = Vec::with_capacity(spec.steps);
        for y in &trajectory.observations {
            filter.step(y)?;
            estimates.push(filter.estimate());
        }
        seconds.push(start.elapsed().as_secs_f64());
        mses.push(mse(&estimates, &trajectory.states[1..])?);
        if capture {
            estimates_by_engine.push((engine.label.clone(), estimates));
        }
    }
    let capture = capture.then(|| TrajectoryRecord {
        truth: trajectory.states[1..].to_vec(),
        estimates: estimates_by_engine,
    });
    Ok(SingleRun {
        mses,
        seconds,
        capture,
    })
}

fn validate_spec(spec: &BenchmarkSpec) -> Result<()> {
    if spec.steps == 0 {
        return Err(Error::Config("benchmark needs at least one step".into()));
    }
    if spec.runs == 0 {
        return Err(Error::Config("benchmark needs at least one run".into()));
    }
    if spec.engines.is_empty() {
        return Err(Error::Config("benchmark needs at least one engine".into()));
    }
    for engine in &spec.engines {
        engine.config.validate()?;
    }
    Ok(())
}

/// Runs `spec.runs` independent Monte Carlo runs. Run `r` simulates truth
/// and observations from seed `base_seed + r` and feeds the *same*
/// observation sequence to every engine; per-engine MSE and wall time are
/// averaged across runs. Results are identical for serial and parallel
/// execution (timings aside).
pub fn run_benchmark(spec: &BenchmarkSpec, base_seed: u64, parallel: bool) -> Result<RunResult> {
    validate_spec(spec)?;
    let init = NoiseModel::gaussian(&spec.x0_cov)?;
    let run_one = |r: usize| {
        execute_run(spec, &init, base_seed + r as u64, r == 0).map_err(Error::at_run(r))
    };

    #[cfg(feature = "parallel")]
    let singles: Vec<SingleRun> = if parallel {
        (0..spec.runs)
            .into_par_iter()
            .map(run_one)
            .collect::<Result<_>>()?
    } else {
        (0..spec.runs).map(run_one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let singles: Vec<SingleRun> = {
        let _ = parallel; // sequential build: flag has no effect
        (0..spec.runs).map(run_one).collect::<Result<_>>()?
    };

    let runs = spec.runs as f64;
    let mut engines = Vec::with_capacity(spec.engines.len());
    for (i, engine) in spec.engines.iter().enumerate() {
        let per_run_mse: Vec<f64> = singles.iter().map(|s| s.mses[i]).collect();
        let per_run_seconds: Vec<f64> = singles.iter().map(|s| s.seconds[i]).collect();
        engines.push(EngineResult {
            label: engine.label.clone(),
            mse: per_run_mse.iter().sum::<f64>() / runs,
            cpu_seconds: per_run_seconds.iter().sum::<f64>() / runs,
            per_run_mse,
            per_run_seconds,
        });
    }
    let trajectories = singles.into_iter().next().and_then(|s| s.capture);
    Ok(RunResult {
        engines,
        base_seed,
        trajectories,
    })
}

/// One row of a bandwidth sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    /// `"{sigma}"`, `"adaptive"`, or `"enkf"`.
    pub sigma: String,
    pub mse: f64,
    /// Mean per-step relative gain gap `||K_mc - K_enkf||_F / ||K_enkf||_F`
    /// against the plain gain built from the same step's moments; zero for
    /// the plain engine row.
    pub gain_gap: f64,
}

fn sweep_engines(spec: &BenchmarkSpec, sigmas: &[f64]) -> Vec<EngineSpec> {
    let size = spec
        .engines
        .first()
        .map(|e| e.config.ensemble_size)
        .unwrap_or(DEFAULT_ENSEMBLE_SIZE);
    let mut engines: Vec<EngineSpec> = sigmas
        .iter()
        .map(|&s| EngineSpec::mc(format!("{s}"), size, KernelBandwidth::Fixed(s)))
        .collect();
    engines.push(EngineSpec::mc("adaptive", size, KernelBandwidth::Adaptive));
    engines.push(EngineSpec::enkf("enkf", size));
    engines
}

/// Sweeps the robust engine across `sigmas` (plus the adaptive policy and
/// the plain engine) on the given benchmark, reporting MSE and the mean
/// relative gain gap per row.
pub fn run_sweep(
    spec: &BenchmarkSpec,
    sigmas: &[f64],
    base_seed: u64,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    if sigmas.is_empty() {
        return Err(Error::Config("bandwidth sweep grid is empty".into()));
    }
    for sigma in sigmas {
        if !(sigma.is_finite() && *sigma > 0.0) {
            return Err(Error::Config(format!(
                "sweep bandwidths must be positive, got {sigma}"
            )));
        }
    }
    validate_spec(spec)?;
    let engines = sweep_engines(spec, sigmas);
    let init = NoiseModel::gaussian(&spec.x0_cov)?;

    let run_one = |r: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let seed = base_seed + r as u64;
        let mut sim_rng = ChaCha8Rng::seed_from_u64(seed);
        let trajectory = simulate(
            &spec.model,
            &spec.proc_noise,
            &spec.obs_noise,
            &init,
            spec.steps,
            &mut sim_rng,
        )
        .map_err(Error::at_run(r))?;
        let mut mses = Vec::with_capacity(engines.len());
        let mut gaps = Vec::with_capacity(engines.len());
        for engine in &engines {
            let config = engine.config.clone().with_seed(seed);
            let jitter = config.jitter;
            let is_robust = config.engine == crate::filter::EngineKind::McEnkf;
            let mut filter =
                FilterEngine::new(&spec.model, config, &spec.x0_cov).map_err(Error::at_run(r))?;
            let mut estimates = Vec::with_capacity(spec.steps);
            let mut gap_sum = 0.0;
            for y in &trajectory.observations {
                let diag = filter.step(y).map_err(Error::at_run(r))?;
                if is_robust {
                    let plain =
                        enkf_gain(&diag.c_hat, &diag.h, spec.model.obs_cov_nominal(), jitter)
                            .map_err(Error::at_run(r))?;
                    let denom = plain.norm();
                    if denom > 0.0 {
                        gap_sum += (&diag.gain - &plain).norm() / denom;
                    }
                }
                estimates.push(filter.estimate());
            }
            mses.push(mse(&estimates, &trajectory.states[1..]).map_err(Error::at_run(r))?);
            gaps.push(gap_sum / spec.steps as f64);
        }
        Ok((mses, gaps))
    };

    #[cfg(feature = "parallel")]
    let singles: Vec<(Vec<f64>, Vec<f64>)> = if parallel {
        (0..spec.runs)
            .into_par_iter()
            .map(run_one)
            .collect::<Result<_>>()?
    } else {
        (0..spec.runs).map(run_one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let singles: Vec<(Vec<f64>, Vec<f64>)> = {
        let _ = parallel;
        (0..spec.runs).map(run_one).collect::<Result<_>>()?
    };

    let runs = spec.runs as f64;
    Ok(engines
        .iter()
        .enumerate()
        .map(|(i, engine)| SweepRow {
            sigma: engine.label.clone(),
            mse: singles.iter().map(|s| s.0[i]).sum::<f64>() / runs,
            gain_gap: singles.iter().map(|s| s.1[i]).sum::<f64>() / runs,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn tiny(spec: &mut BenchmarkSpec, engines: Vec<EngineSpec>) {
        spec.runs = 3;
        spec.steps = 25;
        spec.engines = engines;
    }

    fn small_engines() -> Vec<EngineSpec> {
        vec![
            EngineSpec::enkf("enkf", 10),
            EngineSpec::mc("mc:5", 10, KernelBandwidth::Fixed(5.0)),
        ]
    }

    #[test]
    fn linear_benchmark_constants() {
        let spec = linear_benchmark();
        let alpha = std::f64::consts::PI / 18.0;
        let moved = spec.model.transition(1, &dvector![1.0, 0.0]);
        assert!((moved[0] - alpha.cos()).abs() < 1e-15);
        assert!((moved[1] + alpha.sin()).abs() < 1e-15);
        assert_eq!(spec.model.observe(1, &dvector![1.0, 1.0])[0], 2.0);
        assert_eq!(spec.model.obs_cov_nominal()[(0, 0)], 0.01);
        // true mixture variance: 0.9 * 0.01 + 0.1 * 1.0
        assert!((spec.obs_noise.covariance()[(0, 0)] - 0.109).abs() < 1e-12);
        assert_eq!(spec.steps, 1000);
        assert_eq!(spec.runs, 100);
    }

    #[test]
    fn nonlinear_benchmark_constants() {
        let spec = nonlinear_benchmark();
        let at_zero = spec.model.transition(1, &DVector::zeros(2));
        assert!((at_zero - dvector![0.1, 0.1]).amax() < 1e-15);
        assert_eq!(spec.model.observe(1, &DVector::zeros(2)), DVector::zeros(2));
        // Jacobian of x + sin x at (pi, pi) is the zero matrix
        let x = dvector![std::f64::consts::PI, std::f64::consts::PI];
        let jac = spec.model.jacobian_h(1, &x).unwrap();
        assert!(jac.amax() < 1e-12);
        let fd = crate::model::central_difference(
            |v| spec.model.observe(1, v),
            &x,
            2,
            1e-6,
        );
        assert!((jac - fd).amax() < 1e-6);
        assert!((spec.obs_noise.covariance()[(0, 0)] - 100.9).abs() < 1e-9);
    }

    #[test]
    fn mse_examples() {
        let truth = vec![dvector![1.0, 2.0], dvector![-1.0, 0.5]];
        assert_eq!(mse(&truth, &truth).unwrap(), 0.0);

        let estimates: Vec<_> = (0..5).map(|_| dvector![2.0]).collect();
        let target: Vec<_> = (0..5).map(|_| dvector![0.0]).collect();
        assert_eq!(mse(&estimates, &target).unwrap(), 4.0);

        assert!(matches!(
            mse(&estimates, &target[..3]),
            Err(Error::Dimension(_))
        ));

        // brute-force two-pass sum
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(4);
        let est: Vec<DVector<f64>> = (0..20)
            .map(|_| DVector::from_fn(2, |_, _| rand::Rng::random::<f64>(&mut rng)))
            .collect();
        let tru: Vec<DVector<f64>> = (0..20)
            .map(|_| DVector::from_fn(2, |_, _| rand::Rng::random::<f64>(&mut rng)))
            .collect();
        let mut oracle = 0.0;
        for (e, t) in est.iter().zip(&tru) {
            for d in 0..2 {
                oracle += (e[d] - t[d]) * (e[d] - t[d]);
            }
        }
        oracle /= est.len() as f64;
        assert!((mse(&est, &tru).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn harness_is_deterministic() {
        let mut spec = linear_benchmark();
        tiny(&mut spec, small_engines());
        let a = run_benchmark(&spec, 7, true).unwrap();
        let b = run_benchmark(&spec, 7, true).unwrap();
        for (x, y) in a.engines.iter().zip(&b.engines) {
            assert_eq!(x.mse.to_bits(), y.mse.to_bits());
            for (p, q) in x.per_run_mse.iter().zip(&y.per_run_mse) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn parallel_and_serial_execution_agree() {
        let mut spec = linear_benchmark();
        tiny(&mut spec, small_engines());
        let par = run_benchmark(&spec, 11, true).unwrap();
        let ser = run_benchmark(&spec, 11, false).unwrap();
        for (x, y) in par.engines.iter().zip(&ser.engines) {
            assert_eq!(x.mse.to_bits(), y.mse.to_bits());
        }
    }

    #[test]
    fn duplicated_engines_produce_identical_results() {
        let mut spec = linear_benchmark();
        tiny(
            &mut spec,
            vec![
                EngineSpec::mc("first", 10, KernelBandwidth::Fixed(5.0)),
                EngineSpec::mc("second", 10, KernelBandwidth::Fixed(5.0)),
            ],
        );
        let result = run_benchmark(&spec, 3, true).unwrap();
        assert_eq!(
            result.engines[0].mse.to_bits(),
            result.engines[1].mse.to_bits()
        );
    }

    #[test]
    fn gaussian_noise_with_infinite_bandwidth_matches_plain_engine_exactly() {
        let mut spec = linear_benchmark();
        // replace the heavy-tailed truth with the nominal Gaussian
        spec.obs_noise = NoiseModel::gaussian(spec.model.obs_cov_nominal()).unwrap();
        tiny(
            &mut spec,
            vec![
                EngineSpec::enkf("enkf", 10),
                EngineSpec::mc("mc:inf", 10, KernelBandwidth::Infinite),
            ],
        );
        let result = run_benchmark(&spec, 19, true).unwrap();
        assert_eq!(
            result.engines[0].mse.to_bits(),
            result.engines[1].mse.to_bits()
        );
    }

    #[test]
    fn captured_trajectories_cover_every_engine() {
        let mut spec = linear_benchmark();
        tiny(&mut spec, small_engines());
        let result = run_benchmark(&spec, 5, false).unwrap();
        let record = result.trajectories.expect("first run is captured");
        assert_eq!(record.truth.len(), spec.steps);
        assert_eq!(record.estimates.len(), spec.engines.len());
        for (_, estimates) in &record.estimates {
            assert_eq!(estimates.len(), spec.steps);
        }
    }

    #[test]
    fn sweep_reports_rows_in_grid_order() {
        let mut spec = linear_benchmark();
        tiny(&mut spec, small_engines());
        let rows = run_sweep(&spec, &[2.0, 5.0], 13, true).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.sigma.as_str()).collect();
        assert_eq!(labels, ["2", "5", "adaptive", "enkf"]);
        assert_eq!(rows[3].gain_gap, 0.0);
        for row in &rows {
            assert!(row.mse.is_finite() && row.mse > 0.0);
            assert!(row.gain_gap.is_finite() && row.gain_gap >= 0.0);
        }
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let spec = linear_benchmark();
        assert!(matches!(run_sweep(&spec, &[], 0, false), Err(Error::Config(_))));
        assert!(matches!(
            run_sweep(&spec, &[-1.0], 0, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_engine_list_is_rejected() {
        let mut spec = linear_benchmark();
        spec.engines.clear();
        assert!(matches!(
            run_benchmark(&spec, 0, false),
            Err(Error::Config(_))
        ));
    }
}
