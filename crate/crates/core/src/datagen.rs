//! Seeded synthetic data that follows the state space model exactly.
//!
//! Item factors are iid `N(0, σ_V²)`, initial user states iid `N(0, σ_U²)`,
//! states evolve as `x_t = A x_{t-1} + w_t` and each sampled rating is
//! `⟨x_{i,t}, V_j⟩ + z`. The observed `(user, item, time)` triples are drawn
//! uniformly without replacement. Everything comes from one ChaCha stream so a
//! config fully determines the output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{Dims, ModelParams, Observation, ObservationSet, ValidationError};

/// RNG stream of the generator.
pub const GEN_STREAM: u64 = 0;

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error(
        "process noise exceeds state power budget (sigma_q2 = {sigma_q2} >= sigma_u2 = {sigma_u2})"
    )]
    PowerBudget { sigma_u2: f64, sigma_q2: f64 },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub dims: Dims,
    pub sigma_u2: f64,
    pub sigma_v2: f64,
    pub sigma_q2: f64,
    pub sigma_r2: f64,
    /// Weight of the identity in the transition mix, in `[0, 1]`.
    pub identity_weight: f64,
    /// Fraction of the rating tensor that is observed, in `(0, 1]`.
    pub sampling_factor: f64,
    pub seed: u64,
}

impl GenConfig {
    /// `(M, N, T, K) = (500, 500, 20, 5)`, variances `(1, 1, 0.05, 0.1)`,
    /// sampling factor 0.005.
    pub fn benchmark(seed: u64) -> Self {
        GenConfig {
            dims: Dims {
                num_users: 500,
                num_items: 500,
                num_steps: 20,
                num_factors: 5,
            },
            sigma_u2: 1.0,
            sigma_v2: 1.0,
            sigma_q2: 0.05,
            sigma_r2: 0.1,
            identity_weight: 0.9,
            sampling_factor: 0.005,
            seed,
        }
    }

    pub fn observation_count(&self) -> usize {
        (self.sampling_factor * self.dims.tensor_len() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), GenError> {
        Dims::new(
            self.dims.num_users,
            self.dims.num_items,
            self.dims.num_steps,
            self.dims.num_factors,
        )?;
        let bad = |msg: &str| Err(GenError::Config(msg.to_string()));
        let variances = [self.sigma_u2, self.sigma_v2, self.sigma_q2, self.sigma_r2];
        if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("variances must be finite and nonnegative");
        }
        if !(self.sigma_u2 > 0.0) {
            return bad("sigma_u2 must be positive");
        }
        if !(0.0..=1.0).contains(&self.identity_weight) {
            return bad("identity_weight must lie in [0, 1]");
        }
        if !(self.sampling_factor > 0.0 && self.sampling_factor <= 1.0) {
            return bad("sampling_factor must lie in (0, 1]");
        }
        if self.observation_count() < 1 {
            return bad("sampling_factor * N * M * T must round to at least one observation");
        }
        if self.sigma_q2 >= self.sigma_u2 {
            return Err(GenError::PowerBudget {
                sigma_u2: self.sigma_u2,
                sigma_q2: self.sigma_q2,
            });
        }
        Ok(())
    }
}

/// Latent truth behind a generated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub params: ModelParams,
    /// `states[user][t]` for `t = 0..=T`.
    pub states: Vec<Vec<DVector<f64>>>,
}

impl GroundTruth {
    /// Noiseless preference `⟨x_{i,t}, V_j⟩`.
    pub fn preference(&self, user: usize, item: usize, time: usize) -> f64 {
        self.params
            .item_factors
            .row(item)
            .transpose()
            .dot(&self.states[user][time])
    }

    /// The full noiseless tensor for `t = 1..=T`, row-major in `(user, item, time)`.
    pub fn preferences(&self) -> Vec<f64> {
        let d = self.params.dims;
        let mut out = Vec::with_capacity(d.tensor_len());
        for i in 0..d.num_users {
            for j in 0..d.num_items {
                for t in 1..=d.num_steps {
                    out.push(self.preference(i, j, t));
                }
            }
        }
        out
    }
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sd * z
}

/// `A = c (w I + (1 - w) G)`, `G` iid `N(0, 1/K)`, with `c` chosen so that
/// `σ_U² ‖A‖_F² + K σ_Q² = K σ_U²`: the expected state power is unchanged by
/// one transition from `N(0, σ_U² I)`.
pub fn build_transition(
    k: usize,
    identity_weight: f64,
    sigma_u2: f64,
    sigma_q2: f64,
    seed: u64,
) -> Result<DMatrix<f64>, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(GEN_STREAM);
    transition_from(&mut rng, k, identity_weight, sigma_u2, sigma_q2)
}

fn transition_from(
    rng: &mut ChaCha8Rng,
    k: usize,
    w: f64,
    sigma_u2: f64,
    sigma_q2: f64,
) -> Result<DMatrix<f64>, GenError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(GenError::Config(
            "identity_weight must lie in [0, 1]".into(),
        ));
    }
    if !(sigma_q2 < sigma_u2) {
        return Err(GenError::PowerBudget { sigma_u2, sigma_q2 });
    }
    let sd = (1.0 / k as f64).sqrt();
    let random = DMatrix::from_fn(k, k, |_, _| normal(rng, sd));
    let mixed = DMatrix::identity(k, k) * w + random * (1.0 - w);
    let kf = k as f64;
    let scale = ((kf * (sigma_u2 - sigma_q2)).max(0.0) / (sigma_u2 * mixed.norm_squared())).sqrt();
    Ok(mixed * scale)
}

/// Draw V, A, the trajectories and the sampled ratings, in that order.
pub fn generate(config: &GenConfig) -> Result<(GroundTruth, ObservationSet), GenError> {
    config.validate()?;
    let d = config.dims;
    let k = d.num_factors;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(GEN_STREAM);

    let sd_v = config.sigma_v2.sqrt();
    let item_factors = DMatrix::from_fn(d.num_items, k, |_, _| normal(&mut rng, sd_v));
    let transition = transition_from(
        &mut rng,
        k,
        config.identity_weight,
        config.sigma_u2,
        config.sigma_q2,
    )?;

    let sd_u = config.sigma_u2.sqrt();
    let sd_q = config.sigma_q2.sqrt();
    let mut states = Vec::with_capacity(d.num_users);
    for _ in 0..d.num_users {
        let mut traj = Vec::with_capacity(d.num_steps + 1);
        traj.push(DVector::from_fn(k, |_, _| normal(&mut rng, sd_u)));
        for t in 1..=d.num_steps {
            let noise = DVector::from_fn(k, |_, _| normal(&mut rng, sd_q));
            traj.push(&transition * &traj[t - 1] + noise);
        }
        states.push(traj);
    }

    let params = ModelParams::isotropic(
        d,
        transition,
        item_factors,
        config.sigma_u2,
        config.sigma_q2,
        config.sigma_r2,
    );
    let truth = GroundTruth { params, states };

    // Flat index ((user * M) + item) * T + (time - 1).
    let mut picked =
        rand::seq::index::sample(&mut rng, d.tensor_len(), config.observation_count()).into_vec();
    picked.sort_unstable();
    let sd_r = config.sigma_r2.sqrt();
    let observations = picked
        .into_iter()
        .map(|flat| {
            let time = flat % d.num_steps + 1;
            let item = (flat / d.num_steps) % d.num_items;
            let user = flat / (d.num_steps * d.num_items);
            let rating = truth.preference(user, item, time) + normal(&mut rng, sd_r);
            Observation::new(user, item, time, rating)
        })
        .collect();
    let obs = ObservationSet::new(d, observations)?;
    Ok((truth, obs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_identity_mix_gives_identity() {
        let a = build_transition(5, 1.0, 1.0, 0.0, 3).unwrap();
        assert_eq!(a, DMatrix::identity(5, 5));
    }

    #[test]
    fn power_normalization_identity() {
        for (seed, w, su, sq) in [(1, 0.9, 1.0, 0.05), (2, 0.0, 2.5, 1.0), (3, 0.5, 0.3, 0.0)] {
            let k = 4;
            let a = build_transition(k, w, su, sq, seed).unwrap();
            let lhs = su * a.norm_squared() + k as f64 * sq;
            assert!((lhs - k as f64 * su).abs() < 1e-12, "{lhs}");
        }
    }

    #[test]
    fn process_noise_over_budget_is_rejected() {
        let err = build_transition(3, 0.9, 1.0, 1.0, 0).unwrap_err();
        assert!(err
            .to_string()
            .contains("process noise exceeds state power budget"));
    }

    #[test]
    fn full_sampling_of_a_tiny_tensor() {
        let config = GenConfig {
            dims: Dims::new(2, 2, 2, 1).unwrap(),
            sigma_u2: 1.0,
            sigma_v2: 1.0,
            sigma_q2: 0.1,
            sigma_r2: 0.1,
            identity_weight: 0.9,
            sampling_factor: 1.0,
            seed: 5,
        };
        let (_, obs) = generate(&config).unwrap();
        assert_eq!(obs.len(), 8);
    }

    #[test]
    fn benchmark_observation_count() {
        assert_eq!(GenConfig::benchmark(0).observation_count(), 25_000);
    }

    #[test]
    fn noiseless_rigid_ratings_repeat_across_time() {
        let config = GenConfig {
            dims: Dims::new(6, 5, 4, 2).unwrap(),
            sigma_u2: 1.0,
            sigma_v2: 1.0,
            sigma_q2: 0.0,
            sigma_r2: 0.0,
            identity_weight: 1.0,
            sampling_factor: 0.8,
            seed: 11,
        };
        let (truth, obs) = generate(&config).unwrap();
        for o in obs.observations() {
            let x0 = &truth.states[o.user][0];
            let expected = truth.params.item_factors.row(o.item).transpose().dot(x0);
            assert_eq!(o.rating, expected);
        }
    }

    #[test]
    fn same_seed_same_output() {
        let mut config = GenConfig::benchmark(17);
        config.dims = Dims::new(20, 15, 5, 3).unwrap();
        config.sampling_factor = 0.1;
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        config.seed = 18;
        assert_ne!(generate(&config).unwrap().1, a.1);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = GenConfig::benchmark(0);
        c.sampling_factor = 0.0;
        assert!(c.validate().is_err());
        let mut c = GenConfig::benchmark(0);
        c.identity_weight = 1.5;
        assert!(c.validate().is_err());
        let mut c = GenConfig::benchmark(0);
        c.sigma_q2 = 2.0;
        assert!(matches!(c.validate(), Err(GenError::PowerBudget { .. })));
        let mut c = GenConfig::benchmark(0);
        c.dims = Dims::new(1, 1, 1, 1).unwrap();
        c.sampling_factor = 0.1;
        assert!(c.validate().is_err());
    }
}
