//! Prediction, ground-truth scoring and the static matrix factorization baseline.
//!
//! The factorization is only identified up to an invertible transform of the
//! latent space, so parameter and state errors are measured after an
//! orthogonal Procrustes alignment of the item factors. Tensor RMSE needs no
//! alignment and is the primary comparison metric.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::GroundTruth;
use crate::kalman::SmoothedPosterior;
use crate::model::{Dims, ModelParams, ObservationSet};

/// RNG stream of the baseline's initialization and shuffling.
pub const BASELINE_STREAM: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("index out of range: user {user}, item {item}, time {time} (dims {dims})")]
    OutOfRange {
        user: usize,
        item: usize,
        time: usize,
        dims: Dims,
    },
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),
    #[error("baseline diverged at epoch {epoch} (objective {objective}); lower learning_rate")]
    Divergence { epoch: usize, objective: f64 },
    #[error("invalid baseline config: {0}")]
    Config(String),
    #[error("no observations to fit")]
    EmptyObservations,
}

/// `⟨x̂_{i,t|T}, V_j⟩` for `t` in `1..=T`.
pub fn predict(
    params: &ModelParams,
    posteriors: &[SmoothedPosterior],
    user: usize,
    item: usize,
    time: usize,
) -> Result<f64, EvalError> {
    let d = params.dims;
    let in_range = user < d.num_users
        && user < posteriors.len()
        && item < d.num_items
        && time >= 1
        && time <= d.num_steps
        && time < posteriors[user].means.len();
    if !in_range {
        return Err(EvalError::OutOfRange {
            user,
            item,
            time,
            dims: d,
        });
    }
    Ok(params
        .item_factors
        .row(item)
        .transpose()
        .dot(&posteriors[user].means[time]))
}

/// Orthogonal `R` minimizing `‖est_v R - true_v‖_F`: with
/// `est_vᵀ true_v = U Σ Wᵀ`, `R = U Wᵀ`.
pub fn align(est_v: &DMatrix<f64>, true_v: &DMatrix<f64>) -> DMatrix<f64> {
    let cross = est_v.transpose() * true_v;
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let w_t = svd.v_t.expect("requested Vᵀ");
    u * w_t
}

/// Relative error of each learned variance (absolute when the truth is zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaErrors {
    pub sigma_u2: f64,
    pub sigma_q2: f64,
    pub sigma_r2: f64,
}

fn relative_error(est: f64, truth: f64) -> f64 {
    if truth == 0.0 {
        est.abs()
    } else {
        (est - truth).abs() / truth.abs()
    }
}

/// RMSE at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRmse {
    pub time: usize,
    pub rmse_state: f64,
    pub rmse_tensor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Over all N·M·T noiseless preferences.
    pub rmse_tensor: f64,
    /// Over all N·(T+1)·K state entries, after alignment.
    pub rmse_state: f64,
    /// Over all M·K item factor entries, after alignment.
    pub rmse_v: f64,
    pub sigma: Option<SigmaErrors>,
    pub aligned_rotation: DMatrix<f64>,
    /// `t = 1..=T`.
    pub by_time: Vec<TimeRmse>,
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    rmse_tensor: f64,
    rmse_state: f64,
    rmse_v: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rmse_sigma: Option<SigmaErrors>,
    aligned_rotation: Vec<Vec<f64>>,
    by_time: &'a [TimeRmse],
}

impl Metrics {
    /// JSON document; the rotation is written as a list of rows.
    pub fn to_json(&self, seed: Option<u64>) -> String {
        let r = &self.aligned_rotation;
        let doc = MetricsDocument {
            seed,
            rmse_tensor: self.rmse_tensor,
            rmse_state: self.rmse_state,
            rmse_v: self.rmse_v,
            rmse_sigma: self.sigma,
            aligned_rotation: (0..r.nrows())
                .map(|i| r.row(i).iter().copied().collect())
                .collect(),
            by_time: &self.by_time,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// `time,rmse_state,rmse_tensor`
    pub fn write_curve_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time,rmse_state,rmse_tensor")?;
        for r in &self.by_time {
            writeln!(w, "{},{},{}", r.time, r.rmse_state, r.rmse_tensor)?;
        }
        Ok(())
    }
}

/// Score item factors and state trajectories (`trajectories[user][t]`,
/// `t = 0..=T`) against the truth.
pub fn score_trajectories(
    item_factors: &DMatrix<f64>,
    trajectories: &[&[DVector<f64>]],
    truth: &GroundTruth,
) -> Result<Metrics, EvalError> {
    let d = truth.params.dims;
    let k = d.num_factors;
    if item_factors.nrows() != d.num_items || item_factors.ncols() != k {
        return Err(EvalError::DimsMismatch(format!(
            "estimated V is {}x{}, truth is {}x{}",
            item_factors.nrows(),
            item_factors.ncols(),
            d.num_items,
            k
        )));
    }
    if trajectories.len() != d.num_users
        || trajectories
            .iter()
            .any(|tr| tr.len() != d.num_steps + 1 || tr.iter().any(|x| x.len() != k))
    {
        return Err(EvalError::DimsMismatch(format!(
            "estimated states must be {} users x {} steps x {} factors",
            d.num_users,
            d.num_steps + 1,
            k
        )));
    }
    let true_v = &truth.params.item_factors;
    let rotation = align(item_factors, true_v);
    let aligned_v = item_factors * &rotation;
    let rmse_v = ((&aligned_v - true_v).norm_squared() / (d.num_items * k) as f64).sqrt();

    // (state ss, tensor ss) per time step, reduced in time order.
    let per_time: Vec<(f64, f64)> = (0..=d.num_steps)
        .into_par_iter()
        .map(|t| {
            let est = DMatrix::from_fn(d.num_users, k, |i, c| trajectories[i][t][c]);
            let tru = DMatrix::from_fn(d.num_users, k, |i, c| truth.states[i][t][c]);
            let state_ss = (&est * &rotation - &tru).norm_squared();
            let tensor_ss = if t == 0 {
                0.0
            } else {
                (&est * item_factors.transpose() - &tru * true_v.transpose()).norm_squared()
            };
            (state_ss, tensor_ss)
        })
        .collect();

    let mut state_ss = 0.0;
    let mut tensor_ss = 0.0;
    let mut by_time = Vec::with_capacity(d.num_steps);
    for (t, &(s, p)) in per_time.iter().enumerate() {
        state_ss += s;
        tensor_ss += p;
        if t > 0 {
            by_time.push(TimeRmse {
                time: t,
                rmse_state: (s / (d.num_users * k) as f64).sqrt(),
                rmse_tensor: (p / (d.num_users * d.num_items) as f64).sqrt(),
            });
        }
    }
    Ok(Metrics {
        rmse_tensor: (tensor_ss / d.tensor_len() as f64).sqrt(),
        rmse_state: (state_ss / (d.num_users * (d.num_steps + 1) * k) as f64).sqrt(),
        rmse_v,
        sigma: None,
        aligned_rotation: rotation,
        by_time,
    })
}

/// Score a fitted model and its smoothed posteriors against the truth.
pub fn score(
    params: &ModelParams,
    posteriors: &[SmoothedPosterior],
    truth: &GroundTruth,
) -> Result<Metrics, EvalError> {
    if !params.dims.same_data_shape(&truth.params.dims) {
        return Err(EvalError::DimsMismatch(format!(
            "estimate has {}, truth has {}",
            params.dims, truth.params.dims
        )));
    }
    let trajectories: Vec<&[DVector<f64>]> =
        posteriors.iter().map(|p| p.means.as_slice()).collect();
    let mut metrics = score_trajectories(&params.item_factors, &trajectories, truth)?;
    let tp = &truth.params;
    metrics.sigma = Some(SigmaErrors {
        sigma_u2: relative_error(params.sigma_u2, tp.sigma_u2),
        sigma_q2: relative_error(params.sigma_q2, tp.sigma_q2),
        sigma_r2: relative_error(params.sigma_r2, tp.sigma_r2),
    });
    Ok(metrics)
}

/// Hyperparameters of the regularized static factorization
/// `Σ (o_ij - u_i v_jᵀ)² + λ₁‖U‖² + λ₂‖V‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Standard deviation of the random initial factors.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            lambda1: 0.1,
            lambda2: 0.1,
            learning_rate: 0.01,
            epochs: 100,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EvalError::Config("learning_rate must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(EvalError::Config("regularizers must be nonnegative".into()));
        }
        if self.epochs == 0 {
            return Err(EvalError::Config("epochs must be at least 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(EvalError::Config("init_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Static factors; the same prediction `⟨u_i, v_j⟩` applies at every time.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub user_factors: DMatrix<f64>,
    pub item_factors: DMatrix<f64>,
    /// Objective at initialization followed by one value per epoch.
    pub objective_history: Vec<f64>,
}

impl BaselineModel {
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        self.user_factors
            .row(user)
            .dot(&self.item_factors.row(item))
    }

    /// Each user's static factor repeated over `t = 0..=T`.
    pub fn trajectories(&self, num_steps: usize) -> Vec<Vec<DVector<f64>>> {
        (0..self.user_factors.nrows())
            .map(|i| vec![self.user_factors.row(i).transpose(); num_steps + 1])
            .collect()
    }

    pub fn score(&self, truth: &GroundTruth) -> Result<Metrics, EvalError> {
        let trajectories = self.trajectories(truth.params.dims.num_steps);
        let refs: Vec<&[DVector<f64>]> = trajectories.iter().map(|t| t.as_slice()).collect();
        score_trajectories(&self.item_factors, &refs, truth)
    }
}

/// Value of the regularized objective on all observations pooled over time.
pub fn baseline_objective(
    obs: &ObservationSet,
    user_factors: &DMatrix<f64>,
    item_factors: &DMatrix<f64>,
    lambda1: f64,
    lambda2: f64,
) -> f64 {
    let fit: f64 = obs
        .observations()
        .iter()
        .map(|o| {
            let e = o.rating - user_factors.row(o.user).dot(&item_factors.row(o.item));
            e * e
        })
        .sum();
    fit + lambda1 * user_factors.norm_squared() + lambda2 * item_factors.norm_squared()
}

/// Minimize the static objective by SGD over seeded shuffles.
///
/// Each observation carries `1/n_i` of its user's and `1/m_j` of its item's
/// regularizer, so the per-sample losses sum to exactly the full objective.
pub fn fit_baseline(
    obs: &ObservationSet,
    dims: Dims,
    config: &BaselineConfig,
) -> Result<BaselineModel, EvalError> {
    config.validate()?;
    if obs.is_empty() {
        return Err(EvalError::EmptyObservations);
    }
    let k = dims.num_factors;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(BASELINE_STREAM);
    let mut init = |rows: usize| {
        DMatrix::from_fn(rows, k, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            config.init_scale * z
        })
    };
    let mut users = init(dims.num_users);
    let mut items = init(dims.num_items);

    let mut user_count = vec![0usize; dims.num_users];
    let mut item_count = vec![0usize; dims.num_items];
    for o in obs.observations() {
        user_count[o.user] += 1;
        item_count[o.item] += 1;
    }

    let lr = config.learning_rate;
    let mut history = vec![baseline_objective(
        obs,
        &users,
        &items,
        config.lambda1,
        config.lambda2,
    )];
    let mut order: Vec<usize> = (0..obs.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let o = obs.observations()[idx];
            let reg_u = config.lambda1 / user_count[o.user] as f64;
            let reg_v = config.lambda2 / item_count[o.item] as f64;
            let u = users.row(o.user).clone_owned();
            let v = items.row(o.item).clone_owned();
            let err = o.rating - u.dot(&v);
            let grad_u = &v * (-2.0 * err) + &u * (2.0 * reg_u);
            let grad_v = &u * (-2.0 * err) + &v * (2.0 * reg_v);
            users.set_row(o.user, &(u - grad_u * lr));
            items.set_row(o.item, &(v - grad_v * lr));
        }
        let objective = baseline_objective(obs, &users, &items, config.lambda1, config.lambda2);
        if !objective.is_finite() {
            return Err(EvalError::Divergence { epoch, objective });
        }
        history.push(objective);
    }
    Ok(BaselineModel {
        user_factors: users,
        item_factors: items,
        objective_history: history,
    })
}
