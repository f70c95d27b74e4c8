//! Problem sizes, sparse rating observations and the learnable parameter set.
//!
//! Time convention: latent states exist at `t = 0..=T` and observations at
//! `t = 1..=T`. The state at `t = 0` carries the prior `N(0, Σ₀)`.

mod serialize;

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg;

pub use serialize::{deserialize_model, serialize_model, FormatError, StoredModel, FORMAT_VERSION};

/// Problem sizes.
///
/// `num_factors` is a free modeling choice; it is not required to be at most
/// `min(num_users, num_items)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub num_users: usize,
    pub num_items: usize,
    pub num_steps: usize,
    pub num_factors: usize,
}

impl Dims {
    pub fn new(
        num_users: usize,
        num_items: usize,
        num_steps: usize,
        num_factors: usize,
    ) -> Result<Self, ValidationError> {
        let dims = Dims {
            num_users,
            num_items,
            num_steps,
            num_factors,
        };
        let mut violations = Vec::new();
        dims.check(&mut violations);
        ValidationError::from_list(violations).map(|_| dims)
    }

    fn check(&self, out: &mut Vec<Violation>) {
        for (name, value) in [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("num_steps", self.num_steps),
            ("num_factors", self.num_factors),
        ] {
            if value == 0 {
                out.push(Violation::ZeroDimension(name));
            }
        }
    }

    /// Equal user, item and time counts. The factor count is a property of the
    /// model, not of the data, so it is ignored.
    pub fn same_data_shape(&self, other: &Dims) -> bool {
        self.num_users == other.num_users
            && self.num_items == other.num_items
            && self.num_steps == other.num_steps
    }

    /// Size of the full user × item × time rating tensor.
    pub fn tensor_len(&self) -> usize {
        self.num_users * self.num_items * self.num_steps
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={} M={} T={} K={}",
            self.num_users, self.num_items, self.num_steps, self.num_factors
        )
    }
}

/// One observed rating. `user` and `item` are zero-based, `time` is one-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub user: usize,
    pub item: usize,
    pub time: usize,
    pub rating: f64,
}

impl Observation {
    pub fn new(user: usize, item: usize, time: usize, rating: f64) -> Self {
        Observation {
            user,
            item,
            time,
            rating,
        }
    }

    fn key(&self) -> (usize, usize, usize) {
        (self.user, self.time, self.item)
    }
}

/// A single invariant violation found while validating inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ZeroDimension(&'static str),
    TransitionShape {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    ItemFactorShape {
        rows: usize,
        cols: usize,
        expected: (usize, usize),
    },
    CovarianceShape {
        name: &'static str,
        rows: usize,
        cols: usize,
        expected: usize,
    },
    NotSymmetricPsd(&'static str),
    NonFinite(&'static str),
    InitialVarianceNotPositive(f64),
    ProcessVarianceNegative(f64),
    MeasurementVarianceNotPositive(f64),
    DimsMismatch {
        params: Dims,
        observations: Dims,
    },
    UserOutOfRange {
        user: usize,
        num_users: usize,
    },
    ItemOutOfRange {
        item: usize,
        num_items: usize,
    },
    TimeOutOfRange {
        time: usize,
        num_steps: usize,
    },
    NonFiniteRating {
        user: usize,
        item: usize,
        time: usize,
    },
    DuplicateObservation {
        user: usize,
        item: usize,
        time: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDimension(name) => write!(f, "{name} must be at least 1"),
            Violation::TransitionShape {
                rows,
                cols,
                expected,
            } => write!(f, "A is {rows}x{cols}, expected {expected}x{expected}"),
            Violation::ItemFactorShape {
                rows,
                cols,
                expected,
            } => write!(
                f,
                "V is {rows}x{cols}, expected {}x{}",
                expected.0, expected.1
            ),
            Violation::CovarianceShape {
                name,
                rows,
                cols,
                expected,
            } => write!(f, "{name} is {rows}x{cols}, expected {expected}x{expected}"),
            Violation::NotSymmetricPsd(name) => {
                write!(f, "{name} must be symmetric positive semidefinite")
            }
            Violation::NonFinite(name) => write!(f, "{name} contains non-finite values"),
            Violation::InitialVarianceNotPositive(v) => {
                write!(f, "initial-state variance must be positive (got {v})")
            }
            Violation::ProcessVarianceNegative(v) => {
                write!(f, "process noise variance must be nonnegative (got {v})")
            }
            Violation::MeasurementVarianceNotPositive(v) => {
                write!(f, "measurement variance must be positive (got {v})")
            }
            Violation::DimsMismatch {
                params,
                observations,
            } => write!(
                f,
                "parameter dims ({params}) do not match observation dims ({observations})"
            ),
            Violation::UserOutOfRange { user, num_users } => {
                write!(f, "user index {user} out of range [0, {num_users})")
            }
            Violation::ItemOutOfRange { item, num_items } => {
                write!(f, "item index {item} out of range [0, {num_items})")
            }
            Violation::TimeOutOfRange { time, num_steps } => {
                write!(f, "time index {time} out of range [1, {num_steps}]")
            }
            Violation::NonFiniteRating { user, item, time } => {
                write!(
                    f,
                    "non-finite rating at (user={user}, item={item}, time={time})"
                )
            }
            Violation::DuplicateObservation { user, item, time } => write!(
                f,
                "duplicate observation for (user={user}, item={item}, time={time})"
            ),
        }
    }
}

/// Every violation found in one validation pass.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

impl ValidationError {
    fn from_list(violations: Vec<Violation>) -> Result<(), ValidationError> {
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationError { violations })
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.violations.len();
        write!(f, "{n} validation error{}", if n == 1 { "" } else { "s" })?;
        for v in &self.violations {
            write!(f, "; {v}")?;
        }
        Ok(())
    }
}

/// Sparse ratings grouped by `(user, time)`.
///
/// Observations are stored sorted by `(user, time, item)`, so each group is a
/// contiguous run with strictly increasing item indices. That order is the
/// canonical row order of the per-step measurement matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    dims: Dims,
    observations: Vec<Observation>,
    // offsets[user * T + (time - 1)] .. offsets[user * T + time]
    offsets: Vec<usize>,
}

impl ObservationSet {
    pub fn new(dims: Dims, mut observations: Vec<Observation>) -> Result<Self, ValidationError> {
        let mut violations = Vec::new();
        dims.check(&mut violations);
        for o in &observations {
            if o.user >= dims.num_users {
                violations.push(Violation::UserOutOfRange {
                    user: o.user,
                    num_users: dims.num_users,
                });
            }
            if o.item >= dims.num_items {
                violations.push(Violation::ItemOutOfRange {
                    item: o.item,
                    num_items: dims.num_items,
                });
            }
            if o.time == 0 || o.time > dims.num_steps {
                violations.push(Violation::TimeOutOfRange {
                    time: o.time,
                    num_steps: dims.num_steps,
                });
            }
            if !o.rating.is_finite() {
                violations.push(Violation::NonFiniteRating {
                    user: o.user,
                    item: o.item,
                    time: o.time,
                });
            }
        }
        observations.sort_by(|a, b| a.key().cmp(&b.key()).then(a.rating.total_cmp(&b.rating)));
        for pair in observations.windows(2) {
            if pair[0].key() == pair[1].key() {
                let o = pair[1];
                let v = Violation::DuplicateObservation {
                    user: o.user,
                    item: o.item,
                    time: o.time,
                };
                if violations.last() != Some(&v) {
                    violations.push(v);
                }
            }
        }
        ValidationError::from_list(violations)?;

        let cells = dims.num_users * dims.num_steps;
        let mut offsets = vec![0usize; cells + 1];
        for o in &observations {
            offsets[o.user * dims.num_steps + o.time] += 1;
        }
        for c in 0..cells {
            offsets[c + 1] += offsets[c];
        }
        Ok(ObservationSet {
            dims,
            observations,
            offsets,
        })
    }

    pub fn empty(dims: Dims) -> Result<Self, ValidationError> {
        Self::new(dims, Vec::new())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// |𝒪|, the number of observed ratings.
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// All observations in canonical `(user, time, item)` order.
    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// Ratings of `user` at `time` (one-based), in increasing item order.
    pub fn slice(&self, user: usize, time: usize) -> &[Observation] {
        debug_assert!(time >= 1 && time <= self.dims.num_steps);
        let cell = user * self.dims.num_steps + time - 1;
        &self.observations[self.offsets[cell]..self.offsets[cell + 1]]
    }

    pub fn user_observations(&self, user: usize) -> &[Observation] {
        let t = self.dims.num_steps;
        &self.observations[self.offsets[user * t]..self.offsets[(user + 1) * t]]
    }

    /// Unbiased sample variance of the ratings; `None` with fewer than two.
    pub fn rating_variance(&self) -> Option<f64> {
        let n = self.observations.len();
        if n < 2 {
            return None;
        }
        let mean = self.observations.iter().map(|o| o.rating).sum::<f64>() / n as f64;
        let ss: f64 = self
            .observations
            .iter()
            .map(|o| (o.rating - mean).powi(2))
            .sum();
        Some(ss / (n - 1) as f64)
    }
}

/// Covariance structure of the initial state and the process noise.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `Σ₀ = σ_U² I`, `Q = σ_Q² I`.
    Isotropic,
    /// Free symmetric PSD `Σ₀` and `Q`. The scalar variances are kept as
    /// `trace / K` summaries. Measurement noise stays `σ_R² I`.
    Full {
        initial: DMatrix<f64>,
        process: DMatrix<f64>,
    },
}

/// θ = {A, V, σ_U², σ_Q², σ_R²} plus the optional full covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    /// K×K state transition.
    pub transition: DMatrix<f64>,
    /// M×K item factors; row `j` maps a user state to the rating of item `j`.
    pub item_factors: DMatrix<f64>,
    pub sigma_u2: f64,
    pub sigma_q2: f64,
    pub sigma_r2: f64,
    pub covariance: Covariance,
}

impl ModelParams {
    pub fn isotropic(
        dims: Dims,
        transition: DMatrix<f64>,
        item_factors: DMatrix<f64>,
        sigma_u2: f64,
        sigma_q2: f64,
        sigma_r2: f64,
    ) -> Self {
        ModelParams {
            dims,
            transition,
            item_factors,
            sigma_u2,
            sigma_q2,
            sigma_r2,
            covariance: Covariance::Isotropic,
        }
    }

    pub fn is_full_covariance(&self) -> bool {
        matches!(self.covariance, Covariance::Full { .. })
    }

    /// Σ₀, the prior covariance of every user's initial state.
    pub fn initial_covariance(&self) -> DMatrix<f64> {
        match &self.covariance {
            Covariance::Isotropic => {
                DMatrix::identity(self.dims.num_factors, self.dims.num_factors) * self.sigma_u2
            }
            Covariance::Full { initial, .. } => initial.clone(),
        }
    }

    /// Q, the process noise covariance.
    pub fn process_covariance(&self) -> DMatrix<f64> {
        match &self.covariance {
            Covariance::Isotropic => {
                DMatrix::identity(self.dims.num_factors, self.dims.num_factors) * self.sigma_q2
            }
            Covariance::Full { process, .. } => process.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut violations = Vec::new();
        self.check(&mut violations);
        ValidationError::from_list(violations)
    }

    fn check(&self, out: &mut Vec<Violation>) {
        let d = self.dims;
        d.check(out);
        let k = d.num_factors;
        if self.transition.nrows() != k || self.transition.ncols() != k {
            out.push(Violation::TransitionShape {
                rows: self.transition.nrows(),
                cols: self.transition.ncols(),
                expected: k,
            });
        }
        if self.item_factors.nrows() != d.num_items || self.item_factors.ncols() != k {
            out.push(Violation::ItemFactorShape {
                rows: self.item_factors.nrows(),
                cols: self.item_factors.ncols(),
                expected: (d.num_items, k),
            });
        }
        if self.transition.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite("A"));
        }
        if self.item_factors.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite("V"));
        }
        if !(self.sigma_u2 > 0.0 && self.sigma_u2.is_finite()) {
            out.push(Violation::InitialVarianceNotPositive(self.sigma_u2));
        }
        if !(self.sigma_q2 >= 0.0 && self.sigma_q2.is_finite()) {
            out.push(Violation::ProcessVarianceNegative(self.sigma_q2));
        }
        if !(self.sigma_r2 > 0.0 && self.sigma_r2.is_finite()) {
            out.push(Violation::MeasurementVarianceNotPositive(self.sigma_r2));
        }
        if let Covariance::Full { initial, process } = &self.covariance {
            for (name, m) in [("Sigma0", initial), ("Q", process)] {
                if m.nrows() != k || m.ncols() != k {
                    out.push(Violation::CovarianceShape {
                        name,
                        rows: m.nrows(),
                        cols: m.ncols(),
                        expected: k,
                    });
                } else if !linalg::is_symmetric_psd(m) {
                    out.push(Violation::NotSymmetricPsd(name));
                }
            }
        }
    }
}

/// Check parameters and observations together, returning them unchanged when
/// every invariant holds, otherwise every violation found.
pub fn validate<'a>(
    params: &'a ModelParams,
    obs: &'a ObservationSet,
) -> Result<(&'a ModelParams, &'a ObservationSet), ValidationError> {
    let mut violations = Vec::new();
    params.check(&mut violations);
    if !params.dims.same_data_shape(&obs.dims()) {
        violations.push(Violation::DimsMismatch {
            params: params.dims,
            observations: obs.dims(),
        });
    }
    ValidationError::from_list(violations).map(|_| (params, obs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims::new(2, 3, 2, 2).unwrap()
    }

    fn params() -> ModelParams {
        ModelParams::isotropic(
            dims(),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]),
            1.0,
            0.1,
            0.5,
        )
    }

    #[test]
    fn well_formed_params_are_accepted() {
        let obs = ObservationSet::new(dims(), vec![Observation::new(0, 2, 1, 1.5)]).unwrap();
        let p = params();
        let (vp, vo) = validate(&p, &obs).unwrap();
        assert_eq!(vp, &p);
        assert_eq!(vo, &obs);
    }

    #[test]
    fn zero_measurement_variance_is_rejected() {
        let mut p = params();
        p.sigma_r2 = 0.0;
        let err = p.validate().unwrap_err();
        assert!(err
            .to_string()
            .contains("measurement variance must be positive"));
    }

    #[test]
    fn duplicate_triple_is_named() {
        let err = ObservationSet::new(
            dims(),
            vec![
                Observation::new(1, 2, 2, 1.0),
                Observation::new(0, 0, 1, 0.0),
                Observation::new(1, 2, 2, 3.0),
            ],
        )
        .unwrap_err();
        assert_eq!(
            err.violations,
            vec![Violation::DuplicateObservation {
                user: 1,
                item: 2,
                time: 2
            }]
        );
        assert!(err.to_string().contains("(user=1, item=2, time=2)"));
    }

    #[test]
    fn every_violation_is_reported() {
        let mut p = params();
        p.sigma_r2 = -1.0;
        p.sigma_u2 = 0.0;
        p.transition = DMatrix::identity(3, 3);
        p.item_factors = DMatrix::zeros(4, 2);
        let err = p.validate().unwrap_err();
        assert_eq!(err.violations.len(), 4);

        let err = ObservationSet::new(
            dims(),
            vec![
                Observation::new(5, 0, 1, 0.0),
                Observation::new(0, 9, 0, f64::NAN),
            ],
        )
        .unwrap_err();
        assert_eq!(err.violations.len(), 4);
    }

    #[test]
    fn dims_mismatch_is_reported() {
        let obs = ObservationSet::empty(Dims::new(2, 3, 5, 2).unwrap()).unwrap();
        let err = validate(&params(), &obs).unwrap_err();
        assert!(matches!(err.violations[0], Violation::DimsMismatch { .. }));
    }

    #[test]
    fn full_covariance_must_be_psd() {
        let mut p = params();
        p.covariance = Covariance::Full {
            initial: DMatrix::identity(2, 2),
            process: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]),
        };
        let err = p.validate().unwrap_err();
        assert_eq!(err.violations, vec![Violation::NotSymmetricPsd("Q")]);
    }

    #[test]
    fn grouping_partitions_and_orders_items() {
        let obs = ObservationSet::new(
            dims(),
            vec![
                Observation::new(1, 2, 1, 1.0),
                Observation::new(1, 0, 1, 2.0),
                Observation::new(0, 1, 2, 3.0),
                Observation::new(1, 1, 2, 4.0),
            ],
        )
        .unwrap();
        let items: Vec<usize> = obs.slice(1, 1).iter().map(|o| o.item).collect();
        assert_eq!(items, vec![0, 2]);
        assert!(obs.slice(0, 1).is_empty());
        let total: usize = (0..2)
            .flat_map(|u| (1..=2).map(move |t| (u, t)))
            .map(|(u, t)| obs.slice(u, t).len())
            .sum();
        assert_eq!(total, obs.len());
        assert_eq!(obs.user_observations(1).len(), 3);
    }

    #[test]
    fn zero_dims_rejected() {
        let err = Dims::new(0, 1, 1, 0).unwrap_err();
        assert_eq!(err.violations.len(), 2);
    }
}
