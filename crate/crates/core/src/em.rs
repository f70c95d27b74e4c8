//! Parameter learning by expectation-maximization.
//!
//! The E-step runs [`smooth_all`] and folds the smoothed moments into
//! [`SufficientStats`]. The M-step is closed form: item factors row by row,
//! then the transition matrix, then the noise variances, all from the same
//! statistics (one smoothing pass per iteration). Convergence is judged on the
//! marginal innovation log-likelihood returned by the filter.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::kalman::{smooth_all, KalmanError, SmoothedPosterior};
use crate::linalg::{cholesky_with_ridge, eigen_floor, symmetrize, symmetrized};
use crate::model::{self, Covariance, Dims, ModelParams, ObservationSet, ValidationError};

/// Lower bound for every learned variance and full-covariance eigenvalue.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Relative ridge for rank-deficient `A₁` and `V₁(j)`.
pub const SOLVE_RIDGE: f64 = 1e-10;

/// RNG stream used for the crude initialization, distinct from the
/// generator's stream for the same seed.
pub const INIT_STREAM: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EmError {
    #[error("invalid EM configuration: {0}")]
    Config(String),
    #[error("no observations to fit")]
    EmptyObservations,
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error("log-likelihood became non-finite at iteration {iter}")]
    Divergence { iter: usize, trace: EmTrace },
}

/// E-step accumulators, summed over users in index order.
///
/// `E[·]` below denotes `P + x̂ x̂ᵀ` from the smoothed posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// Γ₁ = Σᵢ E[x_{i,0} x_{i,0}ᵀ]
    pub gamma1: DMatrix<f64>,
    /// A₁ = Σᵢ Σ_{t=1..T} E[x_{i,t-1} x_{i,t-1}ᵀ]
    pub a1: DMatrix<f64>,
    /// A₂ = Σᵢ Σ_{t=1..T} E[x_{i,t} x_{i,t-1}ᵀ]
    pub a2: DMatrix<f64>,
    /// Σᵢ Σ_{t=1..T} E[x_{i,t} x_{i,t}ᵀ]
    pub s_t: DMatrix<f64>,
    /// V₁(j): E[x_{i,t} x_{i,t}ᵀ] summed over the (i, t) where item j is rated.
    pub v1: Vec<DMatrix<f64>>,
    /// Row j: Σ y_{ijt} x̂_{i,t|T}ᵀ. Also the cross term of the σ_R² update.
    pub v2: DMatrix<f64>,
    /// Σ y².
    pub r_yy: f64,
    /// |𝒪|
    pub obs_count: usize,
}

impl SufficientStats {
    pub fn from_posteriors(
        posteriors: &[SmoothedPosterior],
        obs: &ObservationSet,
        dims: Dims,
    ) -> Self {
        let k = dims.num_factors;
        let mut s = SufficientStats {
            gamma1: DMatrix::zeros(k, k),
            a1: DMatrix::zeros(k, k),
            a2: DMatrix::zeros(k, k),
            s_t: DMatrix::zeros(k, k),
            v1: vec![DMatrix::zeros(k, k); dims.num_items],
            v2: DMatrix::zeros(dims.num_items, k),
            r_yy: 0.0,
            obs_count: 0,
        };
        for (user, post) in posteriors.iter().enumerate() {
            let second_moment =
                |t: usize| &post.covs[t] + &post.means[t] * post.means[t].transpose();
            let mut prev = second_moment(0);
            s.gamma1 += &prev;
            for t in 1..=dims.num_steps {
                let cur = second_moment(t);
                s.a1 += &prev;
                s.a2 += post.lag_cov(t) + &post.means[t] * post.means[t - 1].transpose();
                s.s_t += &cur;
                for o in obs.slice(user, t) {
                    s.v1[o.item] += &cur;
                    let mut row = s.v2.row_mut(o.item);
                    row += post.means[t].transpose() * o.rating;
                    s.r_yy += o.rating * o.rating;
                    s.obs_count += 1;
                }
                prev = cur;
            }
        }
        symmetrize(&mut s.gamma1);
        symmetrize(&mut s.a1);
        symmetrize(&mut s.s_t);
        for m in &mut s.v1 {
            symmetrize(m);
        }
        s
    }

    /// Γ₂ for transition `a`: `S_t - A₂Aᵀ - AA₂ᵀ + AA₁Aᵀ`.
    pub fn process_scatter(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let cross = &self.a2 * a.transpose();
        symmetrized(&self.s_t - &cross - cross.transpose() + a * &self.a1 * a.transpose())
    }

    /// tr(Γ₃) for item factors `v`: the expected residual sum of squares.
    pub fn residual_sum_of_squares(&self, v: &DMatrix<f64>) -> f64 {
        let mut rss = self.r_yy;
        for j in 0..v.nrows() {
            let row = v.row(j);
            rss -= 2.0 * row.dot(&self.v2.row(j));
            rss += (row * &self.v1[j] * row.transpose())[(0, 0)];
        }
        rss
    }
}

/// Run the smoother and accumulate statistics. Also returns the marginal log-likelihood.
pub fn e_step(
    params: &ModelParams,
    obs: &ObservationSet,
) -> Result<(SufficientStats, f64), EmError> {
    model::validate(params, obs)?;
    let (posteriors, loglik) = smooth_all(params, obs)?;
    Ok((
        SufficientStats::from_posteriors(&posteriors, obs, params.dims),
        loglik,
    ))
}

/// Closed-form variance estimates. `sigma_r2` is `None` when there are no
/// observations to estimate it from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceUpdate {
    pub sigma_u2: f64,
    pub sigma_q2: f64,
    pub sigma_r2: Option<f64>,
}

pub fn m_step_variances(
    stats: &SufficientStats,
    a: &DMatrix<f64>,
    v: &DMatrix<f64>,
    dims: Dims,
) -> VarianceUpdate {
    let n = dims.num_users as f64;
    let k = dims.num_factors as f64;
    let t = dims.num_steps as f64;
    let sigma_u2 = (stats.gamma1.trace() / (n * k)).max(VARIANCE_FLOOR);
    let sigma_q2 = (stats.process_scatter(a).trace() / (n * k * t)).max(VARIANCE_FLOOR);
    let sigma_r2 = (stats.obs_count > 0)
        .then(|| (stats.residual_sum_of_squares(v) / stats.obs_count as f64).max(VARIANCE_FLOOR));
    VarianceUpdate {
        sigma_u2,
        sigma_q2,
        sigma_r2,
    }
}

/// `Σ̂₀ = Γ₁ / N`, `Q̂ = Γ₂ / (NT)`.
pub fn m_step_full_cov(
    stats: &SufficientStats,
    a: &DMatrix<f64>,
    dims: Dims,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = dims.num_users as f64;
    let t = dims.num_steps as f64;
    let initial = eigen_floor(symmetrized(&stats.gamma1 / n), VARIANCE_FLOOR);
    let process = eigen_floor(stats.process_scatter(a) / (n * t), VARIANCE_FLOOR);
    (initial, process)
}

/// `Â = A₂ A₁⁻¹`, solved through a Cholesky factor of A₁.
pub fn m_step_a(stats: &SufficientStats) -> DMatrix<f64> {
    match cholesky_with_ridge(&stats.a1, SOLVE_RIDGE) {
        Some((chol, ridged)) => {
            if ridged {
                log::warn!("A1 is rank deficient; ridge applied to the transition update");
            }
            chol.solve(&stats.a2.transpose()).transpose()
        }
        None => {
            log::warn!("A1 is singular even after ridge; transition left at zero");
            DMatrix::zeros(stats.a1.nrows(), stats.a1.ncols())
        }
    }
}

/// `V̂_j = V₂ⱼ V₁(j)⁻¹` for each item. Items never rated keep their previous row.
pub fn m_step_v(stats: &SufficientStats, prev_v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut v = prev_v.clone();
    for (j, v1) in stats.v1.iter().enumerate() {
        if v1.iter().all(|&x| x == 0.0) {
            continue;
        }
        let Some((chol, ridged)) = cholesky_with_ridge(v1, SOLVE_RIDGE) else {
            log::warn!("V1({j}) singular even after ridge; row kept");
            continue;
        };
        if ridged {
            log::debug!("ridge applied to V1({j})");
        }
        let rhs: DVector<f64> = stats.v2.row(j).transpose();
        v.row_mut(j).copy_from(&chol.solve(&rhs).transpose());
    }
    v
}

/// The three terms of the expected complete-data log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedLogLik {
    /// Initial states.
    pub l1: f64,
    /// Transitions.
    pub l2: f64,
    /// Observations.
    pub l3: f64,
}

impl ExpectedLogLik {
    pub fn total(&self) -> f64 {
        self.l1 + self.l2 + self.l3
    }
}

/// `-(c/2) log 2π - (c/2) log|C| - ½ tr(C⁻¹ Γ)` with `c = count · dim`;
/// `-inf` when `C` is singular.
fn gaussian_term(count: f64, cov: &DMatrix<f64>, scatter: &DMatrix<f64>) -> f64 {
    let dim = cov.nrows() as f64;
    match nalgebra::Cholesky::new(cov.clone()) {
        Some(chol) => {
            let log_det = crate::linalg::chol_log_det(&chol);
            let quad = chol.solve(scatter).trace();
            -0.5 * count * dim * (2.0 * PI).ln() - 0.5 * count * log_det - 0.5 * quad
        }
        None => f64::NEG_INFINITY,
    }
}

pub fn expected_loglik(params: &ModelParams, stats: &SufficientStats) -> ExpectedLogLik {
    let d = params.dims;
    let n = d.num_users as f64;
    let t = d.num_steps as f64;
    let l1 = gaussian_term(n, &params.initial_covariance(), &stats.gamma1);
    let l2 = gaussian_term(
        n * t,
        &params.process_covariance(),
        &stats.process_scatter(&params.transition),
    );
    let count = stats.obs_count as f64;
    let l3 = -0.5 * count * (2.0 * PI).ln()
        - 0.5 * count * params.sigma_r2.ln()
        - stats.residual_sum_of_squares(&params.item_factors) / (2.0 * params.sigma_r2);
    ExpectedLogLik { l1, l2, l3 }
}

/// Which parameters the M-step is allowed to change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateSet {
    pub sigma_u2: bool,
    pub sigma_q2: bool,
    pub sigma_r2: bool,
    pub transition: bool,
    pub item_factors: bool,
}

impl UpdateSet {
    pub fn all() -> Self {
        UpdateSet {
            sigma_u2: true,
            sigma_q2: true,
            sigma_r2: true,
            transition: true,
            item_factors: true,
        }
    }

    pub fn none() -> Self {
        UpdateSet {
            sigma_u2: false,
            sigma_q2: false,
            sigma_r2: false,
            transition: false,
            item_factors: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::none()
    }
}

impl Default for UpdateSet {
    fn default() -> Self {
        Self::all()
    }
}

impl FromStr for UpdateSet {
    type Err = String;

    /// `all`, or a comma-separated subset of `sigma_u2,sigma_q2,sigma_r2,A,V`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::all());
        }
        let mut set = Self::none();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "sigma_u2" => set.sigma_u2 = true,
                "sigma_q2" => set.sigma_q2 = true,
                "sigma_r2" => set.sigma_r2 = true,
                "A" | "a" => set.transition = true,
                "V" | "v" => set.item_factors = true,
                other => return Err(format!("unknown parameter {other:?} in update set")),
            }
        }
        Ok(set)
    }
}

impl fmt::Display for UpdateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.sigma_u2, "sigma_u2"),
            (self.sigma_q2, "sigma_q2"),
            (self.sigma_r2, "sigma_r2"),
            (self.transition, "A"),
            (self.item_factors, "V"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

/// Starting point for EM.
#[derive(Debug, Clone, PartialEq)]
pub enum InitPolicy {
    /// Scale-matched crude guess, see [`crude_init`].
    Crude,
    /// Start from given parameters (e.g. ground truth with some parameters frozen).
    From(ModelParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub rel_tol: f64,
    pub update_set: UpdateSet,
    pub init: InitPolicy,
    pub seed: u64,
    /// Learn full Σ₀ and Q instead of scalar σ_U², σ_Q².
    pub full_covariance: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 50,
            rel_tol: 1e-5,
            update_set: UpdateSet::all(),
            init: InitPolicy::Crude,
            seed: 0,
            full_covariance: false,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        if self.max_iters == 0 {
            return Err(EmError::Config("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(EmError::Config("rel_tol must be positive".into()));
        }
        if self.update_set.is_empty() {
            return Err(EmError::Config("update set must not be empty".into()));
        }
        Ok(())
    }
}

/// Crude starting parameters.
///
/// With `s²` the sample variance of the ratings: `σ_R² = s²`,
/// `σ_U² = sqrt(s² / K)`, `σ_Q² = 0.1 σ_U²`, `A = I` and V iid
/// `N(0, sqrt(s² / K))`, so the prior rating variance `K σ_U² σ_V²` equals
/// `s²` with the scale split evenly between user and item factors.
pub fn crude_init(obs: &ObservationSet, dims: Dims, seed: u64) -> ModelParams {
    let k = dims.num_factors;
    let s2 = obs.rating_variance().filter(|v| *v > 0.0).unwrap_or(1.0);
    let factor_var = (s2 / k as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let sd = factor_var.sqrt();
    let item_factors = DMatrix::from_fn(dims.num_items, k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd * z
    });
    ModelParams::isotropic(
        dims,
        DMatrix::identity(k, k),
        item_factors,
        factor_var,
        0.1 * factor_var,
        s2,
    )
}

/// Optional ground-truth diagnostics attached to a trace row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub rmse_state: f64,
    pub rmse_tensor: f64,
}

/// One completed iteration: the parameters that were smoothed and the
/// marginal log-likelihood they achieve.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub loglik: f64,
    pub sigma_u2: f64,
    pub sigma_q2: f64,
    pub sigma_r2: f64,
    pub norm_a: f64,
    pub norm_v: f64,
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    pub rows: Vec<TraceRow>,
}

impl EmTrace {
    pub fn logliks(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loglik).collect()
    }

    /// `iter,loglik,sigma_u2,sigma_q2,sigma_r2,normA,normV[,rmse_state,rmse_tensor]`
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let with_diag = self.rows.iter().any(|r| r.diagnostics.is_some());
        write!(w, "iter,loglik,sigma_u2,sigma_q2,sigma_r2,normA,normV")?;
        if with_diag {
            write!(w, ",rmse_state,rmse_tensor")?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(
                w,
                "{},{},{},{},{},{},{}",
                r.iter, r.loglik, r.sigma_u2, r.sigma_q2, r.sigma_r2, r.norm_a, r.norm_v
            )?;
            if with_diag {
                match r.diagnostics {
                    Some(d) => write!(w, ",{},{}", d.rmse_state, d.rmse_tensor)?,
                    None => write!(w, ",,")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Result of a fit. `posteriors` and `loglik` belong to the returned `params`.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: ModelParams,
    pub posteriors: Vec<SmoothedPosterior>,
    pub loglik: f64,
    pub trace: EmTrace,
    pub converged: bool,
}

/// One M-step from shared statistics: V, then A, then the variances.
pub fn m_step(params: &ModelParams, stats: &SufficientStats, update: UpdateSet) -> ModelParams {
    let dims = params.dims;
    let k = dims.num_factors as f64;
    let mut next = params.clone();
    if update.item_factors {
        next.item_factors = m_step_v(stats, &params.item_factors);
    }
    if update.transition {
        next.transition = m_step_a(stats);
    }
    let var = m_step_variances(stats, &next.transition, &next.item_factors, dims);
    match &mut next.covariance {
        Covariance::Isotropic => {
            if update.sigma_u2 {
                next.sigma_u2 = var.sigma_u2;
            }
            if update.sigma_q2 {
                next.sigma_q2 = var.sigma_q2;
            }
        }
        Covariance::Full { initial, process } => {
            let (sigma0, q) = m_step_full_cov(stats, &next.transition, dims);
            if update.sigma_u2 {
                next.sigma_u2 = sigma0.trace() / k;
                *initial = sigma0;
            }
            if update.sigma_q2 {
                next.sigma_q2 = q.trace() / k;
                *process = q;
            }
        }
    }
    if update.sigma_r2 {
        match var.sigma_r2 {
            Some(r) => next.sigma_r2 = r,
            None => log::warn!("no observations; sigma_r2 update skipped"),
        }
    }
    next
}

pub fn run_em(obs: &ObservationSet, dims: Dims, config: &EmConfig) -> Result<EmFit, EmError> {
    run_em_monitored(obs, dims, config, |_, _| None)
}

/// [`run_em`] with a hook evaluated on every smoothed iterate, used to attach
/// ground-truth diagnostics to the trace.
pub fn run_em_monitored<F>(
    obs: &ObservationSet,
    dims: Dims,
    config: &EmConfig,
    mut monitor: F,
) -> Result<EmFit, EmError>
where
    F: FnMut(&ModelParams, &[SmoothedPosterior]) -> Option<Diagnostics>,
{
    config.validate()?;
    if obs.is_empty() {
        return Err(EmError::EmptyObservations);
    }
    let mut params = match &config.init {
        InitPolicy::Crude => crude_init(obs, dims, config.seed),
        InitPolicy::From(p) => p.clone(),
    };
    if config.full_covariance && !params.is_full_covariance() {
        params.covariance = Covariance::Full {
            initial: params.initial_covariance(),
            process: params.process_covariance(),
        };
    }
    model::validate(&params, obs)?;

    let mut trace = EmTrace::default();
    let mut previous: Option<f64> = None;
    for iter in 1..=config.max_iters {
        let (posteriors, loglik) = smooth_all(&params, obs)?;
        trace.rows.push(TraceRow {
            iter,
            loglik,
            sigma_u2: params.sigma_u2,
            sigma_q2: params.sigma_q2,
            sigma_r2: params.sigma_r2,
            norm_a: params.transition.norm(),
            norm_v: params.item_factors.norm(),
            diagnostics: monitor(&params, &posteriors),
        });
        log::info!(
            "iter {iter}: loglik {loglik:.6} sigma_u2 {:.4} sigma_q2 {:.4} sigma_r2 {:.4}",
            params.sigma_u2,
            params.sigma_q2,
            params.sigma_r2
        );
        if !loglik.is_finite() {
            return Err(EmError::Divergence { iter, trace });
        }
        if let Some(prev) = previous {
            if (loglik - prev) / prev.abs().max(f64::MIN_POSITIVE) < config.rel_tol {
                return Ok(EmFit {
                    params,
                    posteriors,
                    loglik,
                    trace,
                    converged: true,
                });
            }
        }
        previous = Some(loglik);
        let stats = SufficientStats::from_posteriors(&posteriors, obs, dims);
        params = m_step(&params, &stats, config.update_set);
    }
    let (posteriors, loglik) = smooth_all(&params, obs)?;
    if !loglik.is_finite() {
        return Err(EmError::Divergence {
            iter: config.max_iters,
            trace,
        });
    }
    Ok(EmFit {
        params,
        posteriors,
        loglik,
        trace,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;

    fn zero_stats(k: usize, m: usize) -> SufficientStats {
        SufficientStats {
            gamma1: DMatrix::zeros(k, k),
            a1: DMatrix::zeros(k, k),
            a2: DMatrix::zeros(k, k),
            s_t: DMatrix::zeros(k, k),
            v1: vec![DMatrix::zeros(k, k); m],
            v2: DMatrix::zeros(m, k),
            r_yy: 0.0,
            obs_count: 0,
        }
    }

    #[test]
    fn empty_observations_give_prior_only_statistics() {
        let dims = Dims::new(3, 4, 2, 2).unwrap();
        let params = ModelParams::isotropic(
            dims,
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_element(4, 2, 0.5),
            1.5,
            0.2,
            0.3,
        );
        let obs = ObservationSet::empty(dims).unwrap();
        let (stats, loglik) = e_step(&params, &obs).unwrap();
        assert_eq!(loglik, 0.0);
        assert_eq!(stats.obs_count, 0);
        assert!(stats.v1.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        assert!(stats.v2.iter().all(|&v| v == 0.0));
        let expected = DMatrix::identity(2, 2) * (3.0 * 1.5);
        assert!((&stats.gamma1 - expected).amax() < 1e-12);
        let update = m_step_variances(&stats, &params.transition, &params.item_factors, dims);
        assert_eq!(update.sigma_r2, None);
    }

    #[test]
    fn only_the_observed_item_accumulates() {
        let dims = Dims::new(1, 7, 2, 2).unwrap();
        let params = ModelParams::isotropic(
            dims,
            DMatrix::identity(2, 2),
            DMatrix::from_element(7, 2, 0.3),
            1.0,
            0.1,
            0.2,
        );
        let obs = ObservationSet::new(dims, vec![Observation::new(0, 5, 1, 1.2)]).unwrap();
        let (stats, _) = e_step(&params, &obs).unwrap();
        for (j, m) in stats.v1.iter().enumerate() {
            assert_eq!(m.iter().any(|&v| v != 0.0), j == 5, "item {j}");
        }
        assert_eq!(stats.obs_count, 1);
        assert_eq!(stats.r_yy, 1.2 * 1.2);
    }

    #[test]
    fn initial_variance_by_substitution() {
        let dims = Dims::new(1, 1, 1, 1).unwrap();
        let mut s = zero_stats(1, 1);
        s.gamma1[(0, 0)] = 0.5;
        let u = m_step_variances(&s, &DMatrix::identity(1, 1), &DMatrix::zeros(1, 1), dims);
        assert_eq!(u.sigma_u2, 0.5);
    }

    #[test]
    fn rigid_exact_states_have_zero_process_variance() {
        // Constant known states: A₁ = A₂ = S_t, so Γ₂(I) = 0 and the estimate hits the floor.
        let x = DVector::from_vec(vec![0.7, -1.1]);
        let dims = Dims::new(1, 1, 4, 2).unwrap();
        let post = SmoothedPosterior::from_states(vec![x; 5]);
        let obs = ObservationSet::empty(dims).unwrap();
        let s = SufficientStats::from_posteriors(&[post], &obs, dims);
        let u = m_step_variances(&s, &DMatrix::identity(2, 2), &DMatrix::zeros(1, 2), dims);
        assert_eq!(u.sigma_q2, VARIANCE_FLOOR);
        assert_eq!(s.process_scatter(&DMatrix::identity(2, 2)).amax(), 0.0);
    }

    #[test]
    fn transition_identity_and_zero_cases() {
        let mut s = zero_stats(2, 1);
        s.a1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        s.a2 = s.a1.clone();
        assert!((m_step_a(&s) - DMatrix::identity(2, 2)).amax() < 1e-14);
        s.a2 = DMatrix::zeros(2, 2);
        assert_eq!(m_step_a(&s), DMatrix::zeros(2, 2));
    }

    #[test]
    fn unobserved_item_row_carries_over() {
        let mut s = zero_stats(2, 2);
        s.v1[0] = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        s.v2 = DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 0.0, 0.0]);
        let prev = DMatrix::from_row_slice(2, 2, &[9.0, 9.0, 3.0, -4.0]);
        let v = m_step_v(&s, &prev);
        assert_eq!(v.row(1), prev.row(1));
        assert!((v[(0, 0)] - 1.0).abs() < 1e-15 && (v[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn full_covariance_substitution() {
        let dims = Dims::new(1, 1, 3, 2).unwrap();
        let mut s = zero_stats(2, 1);
        s.gamma1 = DMatrix::identity(2, 2);
        s.s_t = DMatrix::from_row_slice(2, 2, &[3.0, 0.6, 0.6, 1.5]);
        s.a1 = DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 1.0, 4.0]);
        s.a2 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let (sigma0, q) = m_step_full_cov(&s, &DMatrix::zeros(2, 2), dims);
        assert_eq!(sigma0, DMatrix::identity(2, 2));
        assert!((q - &s.s_t / 3.0).amax() < 1e-15);
    }

    #[test]
    fn standard_normal_initial_term() {
        let n = 4usize;
        let k = 3usize;
        let dims = Dims::new(n, 1, 1, k).unwrap();
        let params = ModelParams::isotropic(
            dims,
            DMatrix::identity(k, k),
            DMatrix::zeros(1, k),
            1.0,
            0.5,
            1.0,
        );
        let mut s = zero_stats(k, 1);
        s.gamma1 = DMatrix::identity(k, k) * n as f64;
        let l = expected_loglik(&params, &s);
        let nk = (n * k) as f64;
        let expected = -nk / 2.0 * (2.0 * PI).ln() - nk / 2.0;
        assert!((l.l1 - expected).abs() < 1e-12);
    }

    #[test]
    fn measurement_variance_only_moves_l3() {
        let dims = Dims::new(2, 2, 2, 2).unwrap();
        let mut params = ModelParams::isotropic(
            dims,
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.7]),
            1.0,
            0.2,
            0.3,
        );
        let obs = ObservationSet::new(
            dims,
            vec![
                Observation::new(0, 1, 1, 0.4),
                Observation::new(1, 0, 2, -0.8),
            ],
        )
        .unwrap();
        let (stats, _) = e_step(&params, &obs).unwrap();
        let before = expected_loglik(&params, &stats);
        params.sigma_r2 = 0.9;
        let after = expected_loglik(&params, &stats);
        assert_eq!(before.l1, after.l1);
        assert_eq!(before.l2, after.l2);
        assert_ne!(before.l3, after.l3);
    }

    #[test]
    fn update_set_parsing() {
        assert_eq!("all".parse::<UpdateSet>().unwrap(), UpdateSet::all());
        let s: UpdateSet = "V, sigma_r2".parse().unwrap();
        assert!(s.item_factors && s.sigma_r2 && !s.transition);
        assert_eq!(s.to_string(), "sigma_r2,V");
        assert!("".parse::<UpdateSet>().unwrap().is_empty());
        assert!("B".parse::<UpdateSet>().is_err());
    }

    #[test]
    fn empty_update_set_is_rejected() {
        let config = EmConfig {
            update_set: UpdateSet::none(),
            ..EmConfig::default()
        };
        assert!(matches!(config.validate(), Err(EmError::Config(_))));
        let config = EmConfig {
            rel_tol: 0.0,
            ..EmConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn trace_csv_header() {
        let mut trace = EmTrace::default();
        trace.rows.push(TraceRow {
            iter: 1,
            loglik: -10.5,
            sigma_u2: 1.0,
            sigma_q2: 0.1,
            sigma_r2: 0.2,
            norm_a: 2.0,
            norm_v: 3.0,
            diagnostics: None,
        });
        let mut out = Vec::new();
        trace.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "iter,loglik,sigma_u2,sigma_q2,sigma_r2,normA,normV\n1,-10.5,1,0.1,0.2,2,3\n"
        );
    }
}
