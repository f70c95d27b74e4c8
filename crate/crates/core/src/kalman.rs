//! Per-user Kalman filter and RTS smoother.
//!
//! Given the parameters, users are independent: each runs a forward filter
//! from the prior `N(0, Σ₀)` at `t = 0` through `t = T`, then a backward
//! smoothing pass that also produces the lag-one covariances
//! `P_{t,t-1|T}` needed by the EM M-step. Users share only the item factor
//! matrix, whose rows form each step's measurement matrix.
//!
//! Every covariance returned here is explicitly symmetrized.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::linalg::{chol_log_det, cholesky_with_ridge, symmetrize};
use crate::model::{ModelParams, Observation, ObservationSet};

/// Relative ridge applied to a singular predicted covariance in the smoother gain.
pub const SMOOTHER_RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KalmanError {
    #[error("innovation covariance is numerically singular (measurement variance too small)")]
    SingularInnovation,
    #[error("predicted covariance is singular even after ridge regularization")]
    SingularPrediction,
    #[error("user {user}, time {time}: {source}")]
    AtStep {
        user: usize,
        time: usize,
        #[source]
        source: Box<KalmanError>,
    },
}

impl KalmanError {
    fn at(self, user: usize, time: usize) -> Self {
        KalmanError::AtStep {
            user,
            time,
            source: Box::new(self),
        }
    }
}

/// The measurement a user provides at one time step: ratings `y` of `items`
/// and `H`, whose row `r` is row `items[r]` of the item factor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSlice {
    pub items: Vec<usize>,
    pub ratings: DVector<f64>,
    pub design: DMatrix<f64>,
}

impl MeasurementSlice {
    pub fn new(observations: &[Observation], item_factors: &DMatrix<f64>) -> Self {
        let k = item_factors.ncols();
        let items: Vec<usize> = observations.iter().map(|o| o.item).collect();
        let ratings = DVector::from_iterator(items.len(), observations.iter().map(|o| o.rating));
        let mut design = DMatrix::zeros(items.len(), k);
        for (r, &j) in items.iter().enumerate() {
            design.row_mut(r).copy_from(&item_factors.row(j));
        }
        MeasurementSlice {
            items,
            ratings,
            design,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Output of one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// K × |items| Kalman gain; zero columns when the slice is empty.
    pub gain: DMatrix<f64>,
    /// `log N(y; H x̂_{t|t-1}, H P_{t|t-1} Hᵀ + σ_R² I)`.
    pub loglik: f64,
}

/// `x̂_{t+1|t} = A x̂_{t|t}`, `P_{t+1|t} = A P_{t|t} Aᵀ + Q`.
pub fn predict_step(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    transition: &DMatrix<f64>,
    process: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let mean = transition * mean;
    let mut cov = transition * cov * transition.transpose() + process;
    symmetrize(&mut cov);
    (mean, cov)
}

/// Condition the predicted moments on one step's ratings.
///
/// The innovation covariance `S = H P Hᵀ + σ_R² I` is Cholesky-factored and
/// the gain is obtained by solving against it.
pub fn update_step(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    slice: &MeasurementSlice,
    sigma_r2: f64,
) -> Result<Update, KalmanError> {
    let k = mean.len();
    if slice.is_empty() {
        return Ok(Update {
            mean: mean.clone(),
            cov: cov.clone(),
            gain: DMatrix::zeros(k, 0),
            loglik: 0.0,
        });
    }
    let h = &slice.design;
    let hp = h * cov;
    let mut innovation_cov = &hp * h.transpose();
    for r in 0..slice.len() {
        innovation_cov[(r, r)] += sigma_r2;
    }
    symmetrize(&mut innovation_cov);
    let chol = nalgebra::Cholesky::new(innovation_cov).ok_or(KalmanError::SingularInnovation)?;

    // K = P Hᵀ S⁻¹ = (S⁻¹ H P)ᵀ since P and S are symmetric.
    let gain = chol.solve(&hp).transpose();
    let residual = &slice.ratings - h * mean;
    let new_mean = mean + &gain * &residual;
    let mut new_cov = cov - &gain * &hp;
    symmetrize(&mut new_cov);

    let whitened = chol.solve(&residual);
    let quad = residual.dot(&whitened);
    let loglik = -0.5 * (slice.len() as f64 * (2.0 * PI).ln() + chol_log_det(&chol) + quad);

    Ok(Update {
        mean: new_mean,
        cov: new_cov,
        gain,
        loglik,
    })
}

/// Forward moments of one user.
///
/// All vectors are indexed by time `t = 0..=T`. Index 0 of the predicted
/// moments holds the prior, identical to the filtered moments at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub user: usize,
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    /// Kalman gain `K_{i,T}`, seeds the lag-one recursion.
    pub last_gain: DMatrix<f64>,
    /// Sum of innovation log-likelihoods over the user's observations.
    pub loglik: f64,
}

/// Smoothed moments of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPosterior {
    /// `x̂_{t|T}` for `t = 0..=T`.
    pub means: Vec<DVector<f64>>,
    /// `P_{t|T}` for `t = 0..=T`.
    pub covs: Vec<DMatrix<f64>>,
    /// `P_{t,t-1|T}` for `t = 1..=T`, stored at index `t - 1`.
    pub lag_covs: Vec<DMatrix<f64>>,
}

impl SmoothedPosterior {
    /// `P_{t,t-1|T}`, `t` in `1..=T`.
    pub fn lag_cov(&self, t: usize) -> &DMatrix<f64> {
        &self.lag_covs[t - 1]
    }

    /// A degenerate posterior concentrated on known states (all covariances zero).
    pub fn from_states(states: Vec<DVector<f64>>) -> Self {
        let k = states.first().map_or(0, |s| s.len());
        let steps = states.len();
        SmoothedPosterior {
            means: states,
            covs: vec![DMatrix::zeros(k, k); steps],
            lag_covs: vec![DMatrix::zeros(k, k); steps.saturating_sub(1)],
        }
    }

    pub fn num_steps(&self) -> usize {
        self.means.len() - 1
    }
}

struct Moments<'a> {
    transition: &'a DMatrix<f64>,
    process: DMatrix<f64>,
    initial: DMatrix<f64>,
}

impl<'a> Moments<'a> {
    fn of(params: &'a ModelParams) -> Self {
        Moments {
            transition: &params.transition,
            process: params.process_covariance(),
            initial: params.initial_covariance(),
        }
    }
}

/// Run the forward filter for one user.
pub fn filter_user(
    user: usize,
    params: &ModelParams,
    obs: &ObservationSet,
) -> Result<FilterTrace, KalmanError> {
    filter_with(user, params, &Moments::of(params), obs)
}

fn filter_with(
    user: usize,
    params: &ModelParams,
    moments: &Moments<'_>,
    obs: &ObservationSet,
) -> Result<FilterTrace, KalmanError> {
    let k = params.dims.num_factors;
    let steps = params.dims.num_steps;

    let mut predicted_means = Vec::with_capacity(steps + 1);
    let mut predicted_covs = Vec::with_capacity(steps + 1);
    let mut filtered_means = Vec::with_capacity(steps + 1);
    let mut filtered_covs = Vec::with_capacity(steps + 1);
    let prior_mean = DVector::zeros(k);
    predicted_means.push(prior_mean.clone());
    predicted_covs.push(moments.initial.clone());
    filtered_means.push(prior_mean);
    filtered_covs.push(moments.initial.clone());

    let mut last_gain = DMatrix::zeros(k, 0);
    let mut loglik = 0.0;
    for t in 1..=steps {
        let (x_pred, p_pred) = predict_step(
            &filtered_means[t - 1],
            &filtered_covs[t - 1],
            moments.transition,
            &moments.process,
        );
        let slice = MeasurementSlice::new(obs.slice(user, t), &params.item_factors);
        let update =
            update_step(&x_pred, &p_pred, &slice, params.sigma_r2).map_err(|e| e.at(user, t))?;
        loglik += update.loglik;
        predicted_means.push(x_pred);
        predicted_covs.push(p_pred);
        filtered_means.push(update.mean);
        filtered_covs.push(update.cov);
        if t == steps {
            last_gain = update.gain;
        }
    }
    Ok(FilterTrace {
        user,
        predicted_means,
        predicted_covs,
        filtered_means,
        filtered_covs,
        last_gain,
        loglik,
    })
}

/// Backward RTS pass with lag-one covariances.
pub fn smooth_user(
    trace: &FilterTrace,
    params: &ModelParams,
    obs: &ObservationSet,
) -> Result<SmoothedPosterior, KalmanError> {
    let steps = params.dims.num_steps;
    let k = params.dims.num_factors;
    let a = &params.transition;
    let user = trace.user;

    let mut means = trace.filtered_means.clone();
    let mut covs = trace.filtered_covs.clone();

    // J_t = P_{t|t} Aᵀ P_{t+1|t}⁻¹, for t = 0..T-1.
    let mut gains: Vec<DMatrix<f64>> = Vec::with_capacity(steps);
    for t in 0..steps {
        let (chol, ridged) = cholesky_with_ridge(&trace.predicted_covs[t + 1], SMOOTHER_RIDGE)
            .ok_or_else(|| KalmanError::SingularPrediction.at(user, t + 1))?;
        if ridged {
            log::debug!("user {user}: ridge applied to P_{{{}|{}}}", t + 1, t);
        }
        let pa = a * &trace.filtered_covs[t];
        gains.push(chol.solve(&pa).transpose());
    }

    for t in (0..steps).rev() {
        let j = &gains[t];
        let mean = &trace.filtered_means[t] + j * (&means[t + 1] - &trace.predicted_means[t + 1]);
        let mut cov = &trace.filtered_covs[t]
            + j * (&covs[t + 1] - &trace.predicted_covs[t + 1]) * j.transpose();
        symmetrize(&mut cov);
        means[t] = mean;
        covs[t] = cov;
    }

    let mut lag_covs = vec![DMatrix::zeros(k, k); steps];
    // P_{T,T-1|T} = (I - K_T H_T) A P_{T-1|T-1}
    let last = MeasurementSlice::new(obs.slice(user, steps), &params.item_factors);
    let a_p = a * &trace.filtered_covs[steps - 1];
    lag_covs[steps - 1] = if last.is_empty() {
        a_p
    } else {
        let kh = &trace.last_gain * &last.design;
        &a_p - kh * &a_p
    };
    // P_{t,t-1|T} = P_{t|t} J_{t-1}ᵀ + J_t (P_{t+1,t|T} - A P_{t|t}) J_{t-1}ᵀ
    for t in (1..steps).rev() {
        let p_filt = &trace.filtered_covs[t];
        let next_lag = &lag_covs[t];
        let jt_prev = gains[t - 1].transpose();
        lag_covs[t - 1] = p_filt * &jt_prev + &gains[t] * (next_lag - a * p_filt) * &jt_prev;
    }

    Ok(SmoothedPosterior {
        means,
        covs,
        lag_covs,
    })
}

/// Filter and smooth every user; users run in parallel on the current rayon
/// pool. The returned log-likelihood is the marginal log-density of all
/// observations, summed in user-index order.
pub fn smooth_all(
    params: &ModelParams,
    obs: &ObservationSet,
) -> Result<(Vec<SmoothedPosterior>, f64), KalmanError> {
    let moments = Moments::of(params);
    let per_user: Vec<Result<(SmoothedPosterior, f64), KalmanError>> = (0..params.dims.num_users)
        .into_par_iter()
        .map(|user| {
            let trace = filter_with(user, params, &moments, obs)?;
            let posterior = smooth_user(&trace, params, obs)?;
            Ok((posterior, trace.loglik))
        })
        .collect();

    let mut posteriors = Vec::with_capacity(per_user.len());
    let mut total = 0.0;
    for result in per_user {
        let (posterior, loglik) = result?;
        total += loglik;
        posteriors.push(posterior);
    }
    Ok((posteriors, total))
}
