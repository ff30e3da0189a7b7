//! Ensemble Kalman filtering engines.
//!
//! Two engines share one pipeline: propagate every member through the
//! state equation with fresh process noise, form the empirical prediction
//! mean and covariance, linearize the observation map at the mean, build a
//! gain, and apply a perturbed-observation update to every member.
//!
//! The plain engine uses the standard gain
//! `K = C H^T (H C H^T + R)^-1`. The robust engine rescales the prior and
//! observation covariances by the correntropy weight pair before running
//! the exact same algebra, which shrinks the gain smoothly to zero as the
//! innovation grows and recovers the plain gain bit-for-bit when both
//! weights are one.
//!
//! Draw order per step is fixed — members in index order, process noise in
//! the prediction, observation perturbations in the update — so engines
//! sharing a seed are directly comparable.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correntropy::{self, KernelBandwidth, WeightPair};
use crate::error::{Error, Result};
use crate::model::StateSpaceModel;

/// Ordered collection of state vectors approximating the filtering
/// distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<DVector<f64>>,
}

impl Ensemble {
    pub fn new(members: Vec<DVector<f64>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Config("ensemble members must be non-empty".into()));
        }
        for (i, member) in members.iter().enumerate() {
            if member.len() != dim {
                return Err(Error::Dimension(format!(
                    "ensemble member {i} has dimension {}, expected {dim}",
                    member.len()
                )));
            }
            if !member.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "ensemble member {i} has non-finite entries"
                )));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn state_dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }
}

/// Which gain the engine uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineKind {
    Enkf,
    McEnkf,
}

/// Engine configuration.
#[derive(Clone, Debug)]
pub struct FilterConfig {
    pub engine: EngineKind,
    /// Bandwidth policy; present exactly when `engine` is the robust one.
    pub bandwidth: Option<KernelBandwidth>,
    pub ensemble_size: usize,
    /// Relative diagonal jitter added to matrices before linear solves.
    pub jitter: f64,
    /// Upper clamp for the adaptive bandwidth when the residual vanishes.
    pub sigma_cap: f64,
    pub seed: u64,
}

pub const DEFAULT_JITTER: f64 = 1e-9;
pub const DEFAULT_SIGMA_CAP: f64 = 1e6;

impl FilterConfig {
    pub fn enkf(ensemble_size: usize) -> Self {
        FilterConfig {
            engine: EngineKind::Enkf,
            bandwidth: None,
            ensemble_size,
            jitter: DEFAULT_JITTER,
            sigma_cap: DEFAULT_SIGMA_CAP,
            seed: 0,
        }
    }

    pub fn mc_enkf(ensemble_size: usize, bandwidth: KernelBandwidth) -> Self {
        FilterConfig {
            engine: EngineKind::McEnkf,
            bandwidth: Some(bandwidth),
            ensemble_size,
            jitter: DEFAULT_JITTER,
            sigma_cap: DEFAULT_SIGMA_CAP,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::Config(format!(
                "ensemble size must be at least 2, got {}",
                self.ensemble_size
            )));
        }
        match (self.engine, &self.bandwidth) {
            (EngineKind::Enkf, None) => {}
            (EngineKind::McEnkf, Some(bandwidth)) => bandwidth.validate()?,
            (EngineKind::Enkf, Some(_)) => {
                return Err(Error::Config(
                    "bandwidth is only meaningful for the robust engine".into(),
                ))
            }
            (EngineKind::McEnkf, None) => {
                return Err(Error::Config(
                    "the robust engine needs a bandwidth policy".into(),
                ))
            }
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::Config(format!(
                "jitter must be nonnegative, got {}",
                self.jitter
            )));
        }
        if !(self.sigma_cap.is_finite() && self.sigma_cap > 0.0) {
            return Err(Error::Config(format!(
                "sigma cap must be positive, got {}",
                self.sigma_cap
            )));
        }
        Ok(())
    }
}

/// Per-step diagnostics: prediction moments, linearization, gain, weights,
/// and the bandwidth actually used.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub m_hat: DVector<f64>,
    pub c_hat: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// Correntropy weights; `None` for the plain engine.
    pub weights: Option<WeightPair>,
    /// Bandwidth used this step; infinity for the plain engine and the
    /// infinite policy.
    pub sigma_used: f64,
    /// Euclidean norm of `y - h(m_hat)`.
    pub innovation_norm: f64,
}

/// Adds `jitter * (trace / dim)` to the diagonal; a zero-trace matrix
/// falls back to an absolute `jitter` so degenerate ensembles still solve.
pub(crate) fn regularized(matrix: &DMatrix<f64>, jitter: f64) -> DMatrix<f64> {
    let mut out = matrix.clone();
    regularize_in_place(&mut out, jitter);
    out
}

fn regularize_in_place(matrix: &mut DMatrix<f64>, jitter: f64) {
    if jitter == 0.0 {
        return;
    }
    let dim = matrix.nrows() as f64;
    let scale = matrix.trace() / dim;
    let bump = jitter * if scale > 0.0 { scale } else { 1.0 };
    for i in 0..matrix.nrows() {
        matrix[(i, i)] += bump;
    }
}

/// Propagates every member through the state equation and adds fresh
/// process noise: `x_i <- f_k(x_i) + w_i`, `w_i ~ N(0, Q)`.
pub fn predict<R: Rng + ?Sized>(
    model: &StateSpaceModel,
    ensemble: &Ensemble,
    k: usize,
    rng: &mut R,
) -> Result<Ensemble> {
    predict_inner(model, ensemble, k, Some(rng))
}

fn predict_inner<R: Rng + ?Sized>(
    model: &StateSpaceModel,
    ensemble: &Ensemble,
    k: usize,
    mut rng: Option<&mut R>,
) -> Result<Ensemble> {
    let mut members = Vec::with_capacity(ensemble.size());
    for (i, member) in ensemble.members().iter().enumerate() {
        let mut next = model.transition(k, member);
        if next.len() != model.state_dim() {
            return Err(Error::Dimension(format!(
                "transition output for member {i} has dimension {}",
                next.len()
            )));
        }
        if let Some(generator) = rng.as_deref_mut() {
            next += model.sample_process_noise(generator);
        }
        if !next.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "predicted member {i} is non-finite at step {k}"
            )));
        }
        members.push(next);
    }
    Ensemble::new(members)
}

/// Arithmetic mean of the members.
pub fn empirical_mean(ensemble: &Ensemble) -> DVector<f64> {
    let mut sum = DVector::zeros(ensemble.state_dim());
    for member in ensemble.members() {
        sum += member;
    }
    sum / ensemble.size() as f64
}

/// Sample covariance with divisor `N - 1`, symmetrized as
/// `(C + C^T) / 2`.
pub fn empirical_cov(ensemble: &Ensemble, mean: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = ensemble.size();
    if n < 2 {
        return Err(Error::Config(
            "empirical covariance needs at least two members".into(),
        ));
    }
    if mean.len() != ensemble.state_dim() {
        return Err(Error::Dimension(format!(
            "mean has dimension {}, ensemble has {}",
            mean.len(),
            ensemble.state_dim()
        )));
    }
    let dim = ensemble.state_dim();
    let mut cov = DMatrix::zeros(dim, dim);
    for member in ensemble.members() {
        let centered = member - mean;
        cov.ger(1.0, &centered, &centered, 1.0);
    }
    cov /= (n - 1) as f64;
    let symmetrized = (&cov + cov.transpose()) * 0.5;
    Ok(symmetrized)
}

/// Shared gain algebra.
///
/// The weighted gain is evaluated as
/// `K = l_r * C' H^T (l_r * H C' H^T + R + jitter)^-1` with `C' = C / l_c`,
/// which equals feeding `C / l_c` and `R / l_r` through the plain-gain
/// formula but stays finite even when `l_r` underflows to zero for extreme
/// outliers. With unit weights every operation multiplies or divides by
/// exactly 1.0, so the result is bit-identical to the plain gain.
fn gain_with_weights(
    c_hat: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    weights: WeightPair,
    jitter: f64,
) -> Result<DMatrix<f64>> {
    let n = c_hat.nrows();
    let m = h.nrows();
    if c_hat.ncols() != n {
        return Err(Error::Dimension("prior covariance must be square".into()));
    }
    if h.ncols() != n {
        return Err(Error::Dimension(format!(
            "H must be {m}x{n}, got {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    if r.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "R must be {m}x{m}, got {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    let prior = c_hat / weights.l_c;
    let cross = &prior * h.transpose(); // C' H^T, n x m
    let mut innovation_cov = (h * &cross) * weights.l_r + r;
    regularize_in_place(&mut innovation_cov, jitter);
    let chol = nalgebra::linalg::Cholesky::new(innovation_cov).ok_or_else(|| {
        Error::NotPositiveDefinite("innovation covariance failed its factorization".into())
    })?;
    // K = l_r C' H^T S^-1; S is symmetric, so solve S K^T = l_r (C' H^T)^T
    let gain_t = chol.solve(&(cross * weights.l_r).transpose());
    Ok(gain_t.transpose())
}

/// Plain ensemble Kalman gain `K = C H^T (H C H^T + R)^-1`, computed via a
/// linear solve against the jittered innovation covariance.
pub fn enkf_gain(
    c_hat: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    jitter: f64,
) -> Result<DMatrix<f64>> {
    gain_with_weights(c_hat, h, r, WeightPair::unit(), jitter)
}

/// Correntropy-weighted gain: the plain algebra applied to the effective
/// covariances `C / l_c` and `R / l_r`. Unit weights reproduce
/// [`enkf_gain`] exactly.
pub fn mc_gain(
    c_hat: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    weights: WeightPair,
    jitter: f64,
) -> Result<DMatrix<f64>> {
    weights.validate()?;
    gain_with_weights(c_hat, h, r, weights, jitter)
}

fn update_inner<R: Rng + ?Sized>(
    ensemble: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    k: usize,
    gain: &DMatrix<f64>,
    mut rng: Option<&mut R>,
) -> Result<Ensemble> {
    if y.len() != model.obs_dim() {
        return Err(Error::Dimension(format!(
            "observation has dimension {}, expected {}",
            y.len(),
            model.obs_dim()
        )));
    }
    let mut members = Vec::with_capacity(ensemble.size());
    for (i, member) in ensemble.members().iter().enumerate() {
        let predicted_obs = model.observe(k, member);
        if predicted_obs.len() != model.obs_dim() {
            return Err(Error::Dimension(format!(
                "observation output for member {i} has dimension {}",
                predicted_obs.len()
            )));
        }
        // perturbed observation: y + v_i - h(x_i)
        let mut perturbed = y.clone();
        if let Some(generator) = rng.as_deref_mut() {
            perturbed += model.sample_obs_noise(generator);
        }
        let next = member + gain * (perturbed - predicted_obs);
        if !next.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "updated member {i} is non-finite at step {k}"
            )));
        }
        members.push(next);
    }
    Ensemble::new(members)
}

/// Perturbed-observation update with the plain gain from `diag`:
/// `x_i <- x_i + K (y + v_i - h_k(x_i))`, `v_i ~ N(0, R)`.
pub fn update_enkf<R: Rng + ?Sized>(
    ensemble: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    k: usize,
    diag: &StepDiagnostics,
    rng: &mut R,
) -> Result<Ensemble> {
    update_inner(ensemble, y, model, k, &diag.gain, Some(rng))
}

/// Same stochastic update driven by the weighted gain in `diag`; the
/// perturbations still come from the nominal `R`.
pub fn update_mc<R: Rng + ?Sized>(
    ensemble: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    k: usize,
    diag: &StepDiagnostics,
    rng: &mut R,
) -> Result<Ensemble> {
    update_inner(ensemble, y, model, k, &diag.gain, Some(rng))
}

/// Per-step bandwidth `sigma_k = 1 / ||y - h_k(m_hat)||`, clamped to `cap`
/// when the residual norm drops below `1 / cap` (including exactly zero).
pub fn adaptive_sigma(
    y: &DVector<f64>,
    m_hat: &DVector<f64>,
    model: &StateSpaceModel,
    k: usize,
    cap: f64,
) -> f64 {
    let residual = y - model.observe(k, m_hat);
    (1.0 / residual.norm()).min(cap)
}

/// A single-writer filtering engine: owns its ensemble and generator,
/// advances one observation at a time. Distinct instances share nothing
/// and may run concurrently.
pub struct FilterEngine<'m> {
    model: &'m StateSpaceModel,
    config: FilterConfig,
    ensemble: Ensemble,
    rng: ChaCha8Rng,
    step_index: usize,
}

impl<'m> FilterEngine<'m> {
    /// Draws the initial ensemble i.i.d. from `N(0, x0_cov)` — the same
    /// prior the benchmarks draw the true initial state from.
    pub fn new(
        model: &'m StateSpaceModel,
        config: FilterConfig,
        x0_cov: &DMatrix<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if x0_cov.shape() != (model.state_dim(), model.state_dim()) {
            return Err(Error::Dimension(format!(
                "initial covariance must be {n}x{n}, got {}x{}",
                x0_cov.nrows(),
                x0_cov.ncols(),
                n = model.state_dim()
            )));
        }
        let init = crate::model::NoiseModel::gaussian(x0_cov)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let members = (0..config.ensemble_size)
            .map(|_| init.sample(&mut rng))
            .collect();
        Ok(FilterEngine {
            model,
            config,
            ensemble: Ensemble::new(members)?,
            rng,
            step_index: 0,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    /// Point estimate: the mean of the current (updated) ensemble.
    pub fn estimate(&self) -> DVector<f64> {
        empirical_mean(&self.ensemble)
    }

    /// Assimilates one observation: predict, form moments, linearize,
    /// resolve the bandwidth policy, build the gain, update.
    pub fn step(&mut self, y: &DVector<f64>) -> Result<StepDiagnostics> {
        let k = self.step_index + 1;
        let wrap = Error::at_step(k);
        let diag = self.step_impl(y, k).map_err(wrap)?;
        self.step_index = k;
        Ok(diag)
    }

    fn step_impl(&mut self, y: &DVector<f64>, k: usize) -> Result<StepDiagnostics> {
        let predicted = predict(self.model, &self.ensemble, k, &mut self.rng)?;
        let m_hat = empirical_mean(&predicted);
        let c_hat = empirical_cov(&predicted, &m_hat)?;
        let h = self.model.jacobian_h(k, &m_hat)?;
        let innovation_norm = (y - self.model.observe(k, &m_hat)).norm();
        let r = self.model.obs_cov_nominal();

        let (gain, pair, sigma_used) = match self.config.engine {
            EngineKind::Enkf => {
                let gain = enkf_gain(&c_hat, &h, r, self.config.jitter)?;
                (gain, None, f64::INFINITY)
            }
            EngineKind::McEnkf => {
                let policy = self
                    .config
                    .bandwidth
                    .as_ref()
                    .expect("validated: robust engine carries a bandwidth");
                let sigma = match policy {
                    KernelBandwidth::Fixed(sigma) => *sigma,
                    KernelBandwidth::Adaptive => {
                        adaptive_sigma(y, &m_hat, self.model, k, self.config.sigma_cap)
                    }
                    KernelBandwidth::Infinite => f64::INFINITY,
                };
                let pair = correntropy::weights(
                    y,
                    &m_hat,
                    &regularized(&c_hat, self.config.jitter),
                    r,
                    |x| self.model.observe(k, x),
                    sigma,
                )?;
                let gain = mc_gain(&c_hat, &h, r, pair, self.config.jitter)?;
                (gain, Some(pair), sigma)
            }
        };

        let updated = update_inner(&predicted, y, self.model, k, &gain, Some(&mut self.rng))?;
        self.ensemble = updated;
        Ok(StepDiagnostics {
            m_hat,
            c_hat,
            h,
            gain,
            weights: pair,
            sigma_used,
            innovation_norm,
        })
    }
}
