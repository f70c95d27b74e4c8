//! Independent oracles for the integration and acceptance tests.
//!
//! The joint-Gaussian oracle never runs a recursion: it writes down the
//! covariance of every state of one user stacked together, adds the
//! observations as linear functions of that stack and conditions with a dense
//! LU solve. The naive statistics oracle sums per-observation terms with
//! plain loops.

#![allow(dead_code)]

use std::f64::consts::PI;

use ckf::{Dims, GenConfig, ModelParams, Observation, ObservationSet, SmoothedPosterior};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Exact posterior of one user from the stacked joint Gaussian.
pub struct JointPosterior {
    pub k: usize,
    pub steps: usize,
    /// Stacked mean, block `t` holds `x̂_{t|T}`.
    pub mean: DVector<f64>,
    /// Stacked covariance over `t = 0..=T`.
    pub cov: DMatrix<f64>,
    /// `log p(y)` for this user's observations.
    pub loglik: f64,
}

impl JointPosterior {
    pub fn mean_at(&self, t: usize) -> DVector<f64> {
        self.mean.rows(t * self.k, self.k).into_owned()
    }

    pub fn cov_at(&self, s: usize, t: usize) -> DMatrix<f64> {
        self.cov
            .view((s * self.k, t * self.k), (self.k, self.k))
            .into_owned()
    }
}

/// Prior covariance of `(x_0, ..., x_T)`:
/// `Cov(x_t, x_s) = A^{t-s} Var(x_s)` for `t ≥ s`.
pub fn stacked_prior(params: &ModelParams) -> DMatrix<f64> {
    let k = params.dims.num_factors;
    let steps = params.dims.num_steps;
    let a = &params.transition;
    let q = params.process_covariance();
    let mut marginals = vec![params.initial_covariance()];
    for t in 1..=steps {
        let prev = &marginals[t - 1];
        marginals.push(a * prev * a.transpose() + &q);
    }
    let dim = k * (steps + 1);
    let mut c = DMatrix::zeros(dim, dim);
    for s in 0..=steps {
        let mut block = marginals[s].clone();
        for t in s..=steps {
            c.view_mut((t * k, s * k), (k, k)).copy_from(&block);
            c.view_mut((s * k, t * k), (k, k))
                .copy_from(&block.transpose());
            block = a * block;
        }
    }
    c
}

/// Condition the stacked prior on the given observations of one user.
pub fn joint_posterior(params: &ModelParams, observations: &[Observation]) -> JointPosterior {
    let k = params.dims.num_factors;
    let steps = params.dims.num_steps;
    let dim = k * (steps + 1);
    let prior = stacked_prior(params);
    let m = observations.len();
    if m == 0 {
        return JointPosterior {
            k,
            steps,
            mean: DVector::zeros(dim),
            cov: prior,
            loglik: 0.0,
        };
    }
    let mut h = DMatrix::zeros(m, dim);
    let mut y = DVector::zeros(m);
    for (r, o) in observations.iter().enumerate() {
        for c in 0..k {
            h[(r, o.time * k + c)] = params.item_factors[(o.item, c)];
        }
        y[r] = o.rating;
    }
    let ch = &prior * h.transpose();
    let s = &h * &ch + DMatrix::identity(m, m) * params.sigma_r2;
    let lu = s.clone().lu();
    let s_inv = lu
        .try_inverse()
        .expect("innovation covariance is invertible");
    let gain = &ch * &s_inv;
    let mean = &gain * &y;
    let cov = &prior - &gain * ch.transpose();
    let log_det = s.clone().lu().determinant().ln();
    let quad = (y.transpose() * &s_inv * &y)[(0, 0)];
    let loglik = -0.5 * (m as f64 * (2.0 * PI).ln() + log_det + quad);
    JointPosterior {
        k,
        steps,
        mean,
        cov,
        loglik,
    }
}

/// Filtered moments `x̂_{t|t}`, `P_{t|t}` by conditioning on the prefix of
/// observations with time `≤ t`.
pub fn prefix_posterior(
    params: &ModelParams,
    observations: &[Observation],
    t: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let prefix: Vec<Observation> = observations
        .iter()
        .filter(|o| o.time <= t)
        .copied()
        .collect();
    let post = joint_posterior(params, &prefix);
    (post.mean_at(t), post.cov_at(t, t))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A random small instance: well-conditioned parameters and a random subset
/// of observed triples, possibly leaving some users or times unobserved.
pub fn random_instance(seed: u64, max: Dims) -> (ModelParams, ObservationSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(
        rng.random_range(1..=max.num_users),
        rng.random_range(1..=max.num_items),
        rng.random_range(1..=max.num_steps),
        rng.random_range(1..=max.num_factors),
    )
    .unwrap();
    let k = dims.num_factors;
    let transition = DMatrix::from_fn(k, k, |r, c| {
        let base = if r == c { 0.9 } else { 0.0 };
        base + 0.3 * normal(&mut rng)
    });
    let item_factors = DMatrix::from_fn(dims.num_items, k, |_, _| normal(&mut rng));
    let sigma_u2 = rng.random_range(0.5..2.0);
    let sigma_q2 = rng.random_range(0.05..0.5);
    let sigma_r2 = rng.random_range(0.05..0.5);
    let params =
        ModelParams::isotropic(dims, transition, item_factors, sigma_u2, sigma_q2, sigma_r2);
    let mut observations = Vec::new();
    for user in 0..dims.num_users {
        for time in 1..=dims.num_steps {
            for item in 0..dims.num_items {
                if rng.random_bool(0.5) {
                    observations.push(Observation::new(user, item, time, 2.0 * normal(&mut rng)));
                }
            }
        }
    }
    let obs = ObservationSet::new(dims, observations).unwrap();
    (params, obs)
}

/// Same as [`random_instance`] with full, non-diagonal `Σ₀` and `Q`.
pub fn random_full_instance(seed: u64, max: Dims) -> (ModelParams, ObservationSet) {
    let (mut params, obs) = random_instance(seed, max);
    let k = params.dims.num_factors;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut spd = |scale: f64| {
        let b = DMatrix::from_fn(k, k, |_, _| normal(&mut rng));
        (&b * b.transpose()) * (scale / k as f64) + DMatrix::identity(k, k) * (0.1 * scale)
    };
    let initial = spd(1.0);
    let process = spd(0.2);
    params.sigma_u2 = initial.trace() / k as f64;
    params.sigma_q2 = process.trace() / k as f64;
    params.covariance = ckf::Covariance::Full { initial, process };
    (params, obs)
}

/// Small generated data set used by the EM tests.
pub fn small_generated(seed: u64, n: usize, m: usize, t: usize, k: usize, rho: f64) -> GenConfig {
    let mut config = GenConfig::benchmark(seed);
    config.dims = Dims::new(n, m, t, k).unwrap();
    config.sampling_factor = rho;
    config
}

/// `E[x xᵀ]` from smoothed moments.
fn second(post: &SmoothedPosterior, t: usize) -> DMatrix<f64> {
    &post.covs[t] + &post.means[t] * post.means[t].transpose()
}

/// Naive expected complete-data log-likelihood, one observation or one
/// transition at a time, with explicit matrix inverses.
pub fn naive_expected_loglik(
    params: &ModelParams,
    posteriors: &[SmoothedPosterior],
    obs: &ObservationSet,
) -> (f64, f64, f64) {
    let d = params.dims;
    let k = d.num_factors as f64;
    let sigma0 = params.initial_covariance();
    let q = params.process_covariance();
    let a = &params.transition;
    let s0_inv = sigma0.clone().try_inverse().unwrap();
    let q_inv = q.clone().try_inverse().unwrap();
    let ln2pi = (2.0 * PI).ln();

    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for post in posteriors {
        l1 += -0.5 * (k * ln2pi + sigma0.determinant().ln())
            - 0.5 * (&s0_inv * second(post, 0)).trace();
        for t in 1..=d.num_steps {
            // E[(x_t - A x_{t-1})(x_t - A x_{t-1})ᵀ]
            let cross = post.lag_cov(t) + &post.means[t] * post.means[t - 1].transpose();
            let e = second(post, t) - &cross * a.transpose() - a * cross.transpose()
                + a * second(post, t - 1) * a.transpose();
            l2 += -0.5 * (k * ln2pi + q.determinant().ln()) - 0.5 * (&q_inv * e).trace();
        }
    }
    let mut l3 = 0.0;
    for o in obs.observations() {
        let post = &posteriors[o.user];
        let v = params.item_factors.row(o.item).transpose();
        let mean = v.dot(&post.means[o.time]);
        let var = (v.transpose() * &post.covs[o.time] * &v)[(0, 0)];
        let e_sq = (o.rating - mean).powi(2) + var;
        l3 += -0.5 * (ln2pi + params.sigma_r2.ln()) - 0.5 * e_sq / params.sigma_r2;
    }
    (l1, l2, l3)
}

/// Largest relative finite-difference gradient of the expected log-likelihood
/// terms at the M-step outputs computed from the statistics of `params`.
///
/// Each parameter block `θ` with typical magnitude `s` contributes
/// `|∂E[L]/∂θ| · s / max(|E[L]|, 1)`, from central differences with step
/// `1e-6 · s`. Returns `(worst, label)`.
pub fn m_step_stationarity(params: &ModelParams, obs: &ObservationSet) -> (f64, String) {
    use ckf::em::{self, expected_loglik, SufficientStats};

    let dims = params.dims;
    let (posteriors, _) = ckf::smooth_all(params, obs).unwrap();
    let stats = SufficientStats::from_posteriors(&posteriors, obs, dims);
    let v = em::m_step_v(&stats, &params.item_factors);
    let a = em::m_step_a(&stats);
    let var = em::m_step_variances(&stats, &a, &v, dims);
    let iso = ModelParams::isotropic(
        dims,
        a.clone(),
        v.clone(),
        var.sigma_u2,
        var.sigma_q2,
        var.sigma_r2.unwrap(),
    );
    let (sigma0, q) = em::m_step_full_cov(&stats, &a, dims);
    let mut full = iso.clone();
    full.covariance = ckf::Covariance::Full {
        initial: sigma0,
        process: q,
    };

    let mut worst = (0.0_f64, String::new());
    let mut record = |rel: f64, label: String| {
        if rel >= worst.0 {
            worst = (rel, label);
        }
    };

    type Term = fn(&ckf::em::ExpectedLogLik) -> f64;
    let l1: Term = |e| e.l1;
    let l2: Term = |e| e.l2;
    let l3: Term = |e| e.l3;

    // Central difference of `term` along `set(params, θ + δ)`.
    fn fd<F: Fn(&mut ModelParams, f64)>(
        base: &ModelParams,
        stats: &SufficientStats,
        term: Term,
        scale: f64,
        set: F,
    ) -> f64 {
        let h = 1e-6 * scale;
        let mut plus = base.clone();
        set(&mut plus, h);
        let mut minus = base.clone();
        set(&mut minus, -h);
        let f0 = term(&expected_loglik(base, stats));
        let g = (term(&expected_loglik(&plus, stats)) - term(&expected_loglik(&minus, stats)))
            / (2.0 * h);
        g.abs() * scale / f0.abs().max(1.0)
    }

    let rms = |m: &DMatrix<f64>| (m.norm_squared() / m.len() as f64).sqrt().max(1e-12);

    let s = iso.sigma_u2;
    record(
        fd(&iso, &stats, l1, s, |p, d| p.sigma_u2 += d),
        "sigma_u2".into(),
    );
    let s = iso.sigma_q2;
    record(
        fd(&iso, &stats, l2, s, |p, d| p.sigma_q2 += d),
        "sigma_q2".into(),
    );
    let s = iso.sigma_r2;
    record(
        fd(&iso, &stats, l3, s, |p, d| p.sigma_r2 += d),
        "sigma_r2".into(),
    );

    let k = dims.num_factors;
    let sa = rms(&a);
    for r in 0..k {
        for c in 0..k {
            for (base, name) in [(&iso, "iso"), (&full, "full")] {
                record(
                    fd(base, &stats, l2, sa, |p, d| p.transition[(r, c)] += d),
                    format!("A[{r},{c}] ({name})"),
                );
            }
        }
    }
    let sv = rms(&v);
    for j in 0..dims.num_items {
        if stats.v1[j].iter().all(|&x| x == 0.0) {
            continue;
        }
        for c in 0..k {
            record(
                fd(&iso, &stats, l3, sv, |p, d| p.item_factors[(j, c)] += d),
                format!("V[{j},{c}]"),
            );
        }
    }
    let (s0, sq) = match &full.covariance {
        ckf::Covariance::Full { initial, process } => (rms(initial), rms(process)),
        _ => unreachable!(),
    };
    for r in 0..k {
        for c in r..k {
            let bump = move |m: &mut DMatrix<f64>, d: f64| {
                m[(r, c)] += d;
                if r != c {
                    m[(c, r)] += d;
                }
            };
            record(
                fd(&full, &stats, l1, s0, |p, d| {
                    if let ckf::Covariance::Full { initial, .. } = &mut p.covariance {
                        bump(initial, d)
                    }
                }),
                format!("Sigma0[{r},{c}]"),
            );
            record(
                fd(&full, &stats, l2, sq, |p, d| {
                    if let ckf::Covariance::Full { process, .. } = &mut p.covariance {
                        bump(process, d)
                    }
                }),
                format!("Q[{r},{c}]"),
            );
        }
    }
    worst
}
