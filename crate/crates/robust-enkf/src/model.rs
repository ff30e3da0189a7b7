//! State-space models, noise samplers, and ground-truth simulation.
//!
//! A [`StateSpaceModel`] bundles the transition and observation maps of
//!
//! ```text
//! x_k = f_k(x_{k-1}) + w_k
//! y_k = h_k(x_k)     + v_k
//! ```
//!
//! together with the process covariance `Q` and the *nominal* observation
//! covariance `R` the filter is told about. [`NoiseModel`] generates the
//! actual noise sequences, including the heavy-tailed two-component
//! Gaussian mixture whose true covariance differs from `R`; that mismatch
//! is what the robust filter engine is built to survive.
//!
//! All types are immutable after construction and safe to share across
//! threads; every Monte Carlo run owns its own generator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative step used by the central-difference observation Jacobian.
const FD_REL_STEP: f64 = 1e-6;

pub type TransitionFn = Box<dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ObservationFn = Box<dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianFn = Box<dyn Fn(usize, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// How the observation Jacobian `H_k = dh_k/dx` is evaluated.
pub enum ObservationJacobian {
    /// Closed-form Jacobian supplied with the model.
    Analytic(JacobianFn),
    /// Central finite differences with per-coordinate step
    /// `1e-6 * (1 + |x_j|)`.
    FiniteDifference,
}

/// Validates symmetry, then returns the lower Cholesky factor of `cov`.
///
/// Zero or indefinite matrices are rejected here rather than silently
/// regularized; the filter layer owns its own jitter policy.
fn cholesky_lower(name: &str, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::Dimension(format!(
            "{name} must be square, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.nrows() == 0 {
        return Err(Error::Dimension(format!("{name} must be non-empty")));
    }
    let scale = cov.amax().max(1.0);
    for i in 0..cov.nrows() {
        for j in (i + 1)..cov.ncols() {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::NotPositiveDefinite(format!(
                    "{name} is not symmetric"
                )));
            }
        }
    }
    nalgebra::linalg::Cholesky::new(cov.clone())
        .map(|chol| chol.l())
        .ok_or_else(|| {
            Error::NotPositiveDefinite(format!("{name} failed its Cholesky factorization"))
        })
}

fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Draws a standard-normal vector, consuming one variate per coordinate in
/// index order so traces are replayable.
fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    let mut u = DVector::zeros(dim);
    for i in 0..dim {
        u[i] = rng.sample(StandardNormal);
    }
    u
}

fn sample_with_factor<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    factor * standard_normal(factor.nrows(), rng)
}

/// Draws `z = L u` where `L` is the lower Cholesky factor of `cov` and `u`
/// is standard normal. Deterministic given the generator state.
pub fn sample_gaussian<R: Rng + ?Sized>(
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let factor = cholesky_lower("noise covariance", cov)?;
    Ok(sample_with_factor(&factor, rng))
}

/// Zero-mean noise source: plain Gaussian, a two-component Gaussian
/// mixture, or no noise at all (useful for deterministic simulations).
#[derive(Clone, Debug)]
pub struct NoiseModel {
    dim: usize,
    kind: NoiseKind,
}

#[derive(Clone, Debug)]
enum NoiseKind {
    None,
    Gaussian {
        cov: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
    Mixture {
        primary_cov: DMatrix<f64>,
        primary_chol: DMatrix<f64>,
        outlier_cov: DMatrix<f64>,
        outlier_chol: DMatrix<f64>,
        outlier_prob: f64,
    },
}

impl NoiseModel {
    /// A noise source that always returns zero and consumes no variates.
    pub fn none(dim: usize) -> Self {
        NoiseModel {
            dim,
            kind: NoiseKind::None,
        }
    }

    /// Zero-mean Gaussian noise with the given SPD covariance.
    pub fn gaussian(cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky_lower("Gaussian noise covariance", cov)?;
        Ok(NoiseModel {
            dim: cov.nrows(),
            kind: NoiseKind::Gaussian {
                cov: cov.clone(),
                chol,
            },
        })
    }

    /// Two-component mixture: with probability `outlier_prob` a draw comes
    /// from `N(0, outlier_cov)`, otherwise from `N(0, primary_cov)`.
    ///
    /// `outlier_prob = 0` degenerates exactly to [`NoiseModel::gaussian`]
    /// over the primary covariance (no component indicator is consumed),
    /// so the zero-probability mixture is draw-for-draw identical to the
    /// plain Gaussian under a shared seed.
    pub fn gaussian_mixture(
        primary_cov: &DMatrix<f64>,
        outlier_cov: &DMatrix<f64>,
        outlier_prob: f64,
    ) -> Result<Self> {
        if !outlier_prob.is_finite() || !(0.0..=1.0).contains(&outlier_prob) {
            return Err(Error::Domain(format!(
                "mixture outlier probability must lie in [0, 1], got {outlier_prob}"
            )));
        }
        if primary_cov.shape() != outlier_cov.shape() {
            return Err(Error::Dimension(format!(
                "mixture component covariances disagree: {}x{} vs {}x{}",
                primary_cov.nrows(),
                primary_cov.ncols(),
                outlier_cov.nrows(),
                outlier_cov.ncols()
            )));
        }
        if outlier_prob == 0.0 {
            return Self::gaussian(primary_cov);
        }
        let primary_chol = cholesky_lower("mixture primary covariance", primary_cov)?;
        let outlier_chol = cholesky_lower("mixture outlier covariance", outlier_cov)?;
        Ok(NoiseModel {
            dim: primary_cov.nrows(),
            kind: NoiseKind::Mixture {
                primary_cov: primary_cov.clone(),
                primary_chol,
                outlier_cov: outlier_cov.clone(),
                outlier_chol,
                outlier_prob,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_mixture(&self) -> bool {
        matches!(self.kind, NoiseKind::Mixture { .. })
    }

    pub fn outlier_prob(&self) -> f64 {
        match &self.kind {
            NoiseKind::Mixture { outlier_prob, .. } => *outlier_prob,
            _ => 0.0,
        }
    }

    /// Marginal covariance of a draw: `eps * S + (1 - eps) * R` for the
    /// mixture, the plain covariance for the Gaussian, zero for none.
    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.kind {
            NoiseKind::None => DMatrix::zeros(self.dim, self.dim),
            NoiseKind::Gaussian { cov, .. } => cov.clone(),
            NoiseKind::Mixture {
                primary_cov,
                outlier_cov,
                outlier_prob,
                ..
            } => primary_cov * (1.0 - outlier_prob) + outlier_cov * *outlier_prob,
        }
    }

    /// Draws one noise vector.
    ///
    /// The mixture consumes exactly one uniform variate for the component
    /// indicator before the Gaussian draw; the consumption order is fixed
    /// so generator traces are replayable.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match &self.kind {
            NoiseKind::None => DVector::zeros(self.dim),
            NoiseKind::Gaussian { chol, .. } => sample_with_factor(chol, rng),
            NoiseKind::Mixture {
                primary_chol,
                outlier_chol,
                outlier_prob,
                ..
            } => {
                let indicator: f64 = rng.random();
                if indicator < *outlier_prob {
                    sample_with_factor(outlier_chol, rng)
                } else {
                    sample_with_factor(primary_chol, rng)
                }
            }
        }
    }
}

/// Nonlinear state-space model with nominal noise covariances.
pub struct StateSpaceModel {
    state_dim: usize,
    obs_dim: usize,
    transition: TransitionFn,
    observation: ObservationFn,
    process_cov: DMatrix<f64>,
    obs_cov_nominal: DMatrix<f64>,
    process_chol: DMatrix<f64>,
    obs_chol: DMatrix<f64>,
    jacobian: ObservationJacobian,
}

impl StateSpaceModel {
    /// Builds a model, checking that both covariances are SPD and that the
    /// transition/observation maps produce vectors of the declared
    /// dimensions.
    pub fn new(
        state_dim: usize,
        obs_dim: usize,
        transition: TransitionFn,
        observation: ObservationFn,
        process_cov: &DMatrix<f64>,
        obs_cov_nominal: &DMatrix<f64>,
        jacobian: ObservationJacobian,
    ) -> Result<Self> {
        if state_dim == 0 || obs_dim == 0 {
            return Err(Error::Config(
                "state and observation dimensions must be positive".into(),
            ));
        }
        if process_cov.shape() != (state_dim, state_dim) {
            return Err(Error::Dimension(format!(
                "process covariance must be {state_dim}x{state_dim}, got {}x{}",
                process_cov.nrows(),
                process_cov.ncols()
            )));
        }
        if obs_cov_nominal.shape() != (obs_dim, obs_dim) {
            return Err(Error::Dimension(format!(
                "observation covariance must be {obs_dim}x{obs_dim}, got {}x{}",
                obs_cov_nominal.nrows(),
                obs_cov_nominal.ncols()
            )));
        }
        let process_chol = cholesky_lower("process covariance", process_cov)?;
        let obs_chol = cholesky_lower("nominal observation covariance", obs_cov_nominal)?;

        let probe = DVector::zeros(state_dim);
        if transition(0, &probe).len() != state_dim {
            return Err(Error::Dimension(
                "transition map does not produce a state-dimension vector".into(),
            ));
        }
        if observation(0, &probe).len() != obs_dim {
            return Err(Error::Dimension(
                "observation map does not produce an observation-dimension vector".into(),
            ));
        }

        Ok(StateSpaceModel {
            state_dim,
            obs_dim,
            transition,
            observation,
            process_cov: process_cov.clone(),
            obs_cov_nominal: obs_cov_nominal.clone(),
            process_chol,
            obs_chol,
            jacobian,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn process_cov(&self) -> &DMatrix<f64> {
        &self.process_cov
    }

    pub fn obs_cov_nominal(&self) -> &DMatrix<f64> {
        &self.obs_cov_nominal
    }

    /// Deterministic part of the state equation, `f_k(x)`.
    pub fn transition(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        (self.transition)(k, x)
    }

    /// Deterministic part of the observation equation, `h_k(x)`.
    pub fn observe(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        (self.observation)(k, x)
    }

    pub(crate) fn sample_process_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        sample_with_factor(&self.process_chol, rng)
    }

    pub(crate) fn sample_obs_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        sample_with_factor(&self.obs_chol, rng)
    }

    /// Observation Jacobian `H_k` at `x`: the analytic form when provided,
    /// otherwise central finite differences.
    pub fn jacobian_h(&self, k: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if x.len() != self.state_dim {
            return Err(Error::Dimension(format!(
                "Jacobian evaluation point has dimension {}, expected {}",
                x.len(),
                self.state_dim
            )));
        }
        if !all_finite_vec(x) {
            return Err(Error::NonFinite(
                "Jacobian evaluation point has non-finite entries".into(),
            ));
        }
        let jac = match &self.jacobian {
            ObservationJacobian::Analytic(f) => f(k, x),
            ObservationJacobian::FiniteDifference => {
                central_difference(|v| (self.observation)(k, v), x, self.obs_dim, FD_REL_STEP)
            }
        };
        if jac.shape() != (self.obs_dim, self.state_dim) {
            return Err(Error::Dimension(format!(
                "observation Jacobian must be {}x{}, got {}x{}",
                self.obs_dim,
                self.state_dim,
                jac.nrows(),
                jac.ncols()
            )));
        }
        if !all_finite_mat(&jac) {
            return Err(Error::NonFinite(format!(
                "observation Jacobian at step {k} has non-finite entries"
            )));
        }
        Ok(jac)
    }
}

/// Central-difference Jacobian with per-coordinate step
/// `rel_step * (1 + |x_j|)`.
pub(crate) fn central_difference<F>(
    h: F,
    x: &DVector<f64>,
    obs_dim: usize,
    rel_step: f64,
) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(obs_dim, n);
    let mut forward = x.clone();
    let mut backward = x.clone();
    for j in 0..n {
        let delta = rel_step * (1.0 + x[j].abs());
        forward[j] = x[j] + delta;
        backward[j] = x[j] - delta;
        let column = (h(&forward) - h(&backward)) / (2.0 * delta);
        jac.set_column(j, &column);
        forward[j] = x[j];
        backward[j] = x[j];
    }
    jac
}

/// Ground-truth states `x_0..x_N` and observations `y_1..y_N`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Number of simulated steps `N`.
    pub fn steps(&self) -> usize {
        self.observations.len()
    }
}

/// Simulates the model forward: `x_k = f_k(x_{k-1}) + w_k`,
/// `y_k = h_k(x_k) + v_k`, with `x_0` drawn from `init`.
///
/// Draw order is fixed (`x_0`, then per step `w_k` followed by `v_k`), so
/// trajectories are deterministic under a seeded generator.
pub fn simulate<R: Rng + ?Sized>(
    model: &StateSpaceModel,
    process_noise: &NoiseModel,
    obs_noise: &NoiseModel,
    init: &NoiseModel,
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Config("simulation needs at least one step".into()));
    }
    for (name, noise, dim) in [
        ("process", process_noise, model.state_dim()),
        ("observation", obs_noise, model.obs_dim()),
        ("initial-state", init, model.state_dim()),
    ] {
        if noise.dim() != dim {
            return Err(Error::Dimension(format!(
                "{name} noise has dimension {}, expected {dim}",
                noise.dim()
            )));
        }
    }

    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    states.push(init.sample(rng));
    for k in 1..=steps {
        let previous = states.last().expect("states is never empty");
        let drift = model.transition(k, previous);
        if drift.len() != model.state_dim() {
            return Err(Error::Dimension(format!(
                "transition output has dimension {} at step {k}",
                drift.len()
            )));
        }
        let x = drift + process_noise.sample(rng);
        if !all_finite_vec(&x) {
            return Err(Error::NonFinite(format!(
                "simulated state is non-finite at step {k}"
            )));
        }
        let measured = model.observe(k, &x);
        if measured.len() != model.obs_dim() {
            return Err(Error::Dimension(format!(
                "observation output has dimension {} at step {k}",
                measured.len()
            )));
        }
        let y = measured + obs_noise.sample(rng);
        if !all_finite_vec(&y) {
            return Err(Error::NonFinite(format!(
                "simulated observation is non-finite at step {k}"
            )));
        }
        states.push(x);
        observations.push(y);
    }
    Ok(Trajectory {
        states,
        observations,
    })
}
