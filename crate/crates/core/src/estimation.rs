//! Online contact-stiffness identification by recursive least squares.
//!
//! The linear spring model `Δf = −K_c J_u Δq` is written as `z = H φ` with
//! `z = Δf`, `H = diag(J_u Δq)` and `φ = −K_c`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::ContactKey;
use crate::worldsim::LogRow;

pub const DEFAULT_PHI0: f64 = -1e7;
pub const DEFAULT_P0: f64 = 1e12;
pub const DEFAULT_R: f64 = 1e-6;
pub const DEFAULT_H_MIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0} is not symmetric positive semidefinite")]
    NotPsd(&'static str),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("non-finite regressor or measurement")]
    NonFinite,
    #[error("active contact set changed between samples")]
    ContactSetChanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    pub phi_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sample_count: usize,
}

impl RlsState {
    /// Stiffness estimates `K̂ = −φ̂`.
    pub fn stiffness(&self) -> DVector<f64> {
        -&self.phi_hat
    }
}

fn check_psd(m: &DMatrix<f64>, name: &'static str) -> Result<(), EstimationError> {
    if !m.is_square() {
        return Err(EstimationError::Dimension(format!("{name} must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::NonFinite);
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(EstimationError::NotPsd(name));
    }
    if m.nrows() > 0 && m.clone().symmetric_eigenvalues().min() < -1e-10 * scale {
        return Err(EstimationError::NotPsd(name));
    }
    Ok(())
}

pub fn rls_init(n_c: usize, phi0: DVector<f64>, p0: DMatrix<f64>, r: DMatrix<f64>) -> Result<RlsState, EstimationError> {
    if phi0.len() != n_c || p0.nrows() != n_c {
        return Err(EstimationError::Dimension(format!("expected {n_c} parameters")));
    }
    check_psd(&p0, "P0")?;
    check_psd(&r, "R")?;
    Ok(RlsState { phi_hat: phi0, p: p0, r, sample_count: 0 })
}

/// Scalar estimator with the rigid prior.
pub fn rls_init_scalar(phi0: f64, p0: f64, r: f64) -> Result<RlsState, EstimationError> {
    rls_init(
        1,
        DVector::from_element(1, phi0),
        DMatrix::from_element(1, 1, p0),
        DMatrix::from_element(1, 1, r),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlsUpdate {
    pub state: RlsState,
    /// `z − H φ̂(k−1)`.
    pub innovation: DVector<f64>,
}

/// One recursion step with the Joseph-form covariance update; the estimate
/// is projected onto `φ ≤ 0` afterwards.
pub fn rls_update(state: &RlsState, z: &DVector<f64>, h: &DMatrix<f64>) -> Result<RlsUpdate, EstimationError> {
    let n = state.phi_hat.len();
    if h.ncols() != n || h.nrows() != z.len() || state.r.nrows() != z.len() {
        return Err(EstimationError::Dimension(format!(
            "H is {}x{}, z has {}, R is {}x{}, {} parameters",
            h.nrows(),
            h.ncols(),
            z.len(),
            state.r.nrows(),
            state.r.ncols(),
            n
        )));
    }
    if h.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(EstimationError::NonFinite);
    }
    let p = &state.p;
    let s = h * p * h.transpose() + &state.r;
    let s_inv = s.clone().cholesky().map(|c| c.inverse()).ok_or(EstimationError::SingularInnovation)?;
    let gain = p * h.transpose() * s_inv;
    let innovation = z - h * &state.phi_hat;
    let mut phi_hat = &state.phi_hat + &gain * &innovation;
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let p_next = &i_kh * p * i_kh.transpose() + &gain * &state.r * gain.transpose();
    let p_next = (&p_next + p_next.transpose()) * 0.5;
    phi_hat.apply(|v| *v = v.min(0.0));
    Ok(RlsUpdate {
        state: RlsState { phi_hat, p: p_next, r: state.r.clone(), sample_count: state.sample_count + 1 },
        innovation,
    })
}

/// Regression sample built from two consecutive log rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub keys: Vec<ContactKey>,
    /// Force increments.
    pub z: DVector<f64>,
    /// Diagonal of `H`: normal displacements `J_u(q^l)(q^{l+1} − q^l)`.
    pub h: DVector<f64>,
}

impl Regressor {
    pub fn h_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.h)
    }
}

/// `(z, H)` from consecutive rows whose active (loaded) contact sets match.
pub fn harvest_regressor(a: &LogRow, b: &LogRow) -> Result<Regressor, EstimationError> {
    let active = |row: &LogRow| -> Vec<ContactKey> {
        row.contacts.iter().filter(|c| c.f > 0.0).map(|c| c.key).collect()
    };
    let keys = active(a);
    if keys != active(b) {
        return Err(EstimationError::ContactSetChanged);
    }
    let force = |row: &LogRow, k: &ContactKey| row.contacts.iter().find(|c| c.key == *k).map_or(0.0, |c| c.f);
    let disp = |k: &ContactKey| b.contacts.iter().find(|c| c.key == *k).map_or(0.0, |c| c.jdq);
    let z = DVector::from_iterator(keys.len(), keys.iter().map(|k| force(b, k) - force(a, k)));
    let h = DVector::from_iterator(keys.len(), keys.iter().map(disp));
    Ok(Regressor { keys, z, h })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_phi0")]
    pub phi0: f64,
    #[serde(default = "default_p0")]
    pub p0: f64,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_h_min")]
    pub h_min: f64,
}

fn default_phi0() -> f64 {
    DEFAULT_PHI0
}
fn default_p0() -> f64 {
    DEFAULT_P0
}
fn default_r() -> f64 {
    DEFAULT_R
}
fn default_h_min() -> f64 {
    DEFAULT_H_MIN
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { phi0: DEFAULT_PHI0, p0: DEFAULT_P0, r: DEFAULT_R, h_min: DEFAULT_H_MIN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorTraceRow {
    pub step: usize,
    pub contact_key: String,
    pub phi_hat: f64,
    #[serde(rename = "P")]
    pub p: f64,
    pub innovation: f64,
}

/// Independent scalar estimators, one per contact identity.
#[derive(Debug, Clone)]
pub struct StiffnessEstimator {
    pub config: EstimatorConfig,
    states: BTreeMap<ContactKey, RlsState>,
    pub trace: Vec<EstimatorTraceRow>,
}

impl StiffnessEstimator {
    pub fn new(config: EstimatorConfig) -> Self {
        Self { config, states: BTreeMap::new(), trace: Vec::new() }
    }

    /// Current stiffness estimate; contacts never seen get the prior.
    pub fn k_hat(&self, key: &ContactKey) -> f64 {
        self.states.get(key).map_or(-self.config.phi0, |s| -s.phi_hat[0])
    }

    pub fn state(&self, key: &ContactKey) -> Option<&RlsState> {
        self.states.get(key)
    }

    /// Feeds one regression sample at `step`; rows below the excitation
    /// gate are skipped. Returns the number of keys updated.
    pub fn update(&mut self, step: usize, sample: &Regressor) -> Result<usize, EstimationError> {
        let mut updated = 0;
        for (i, key) in sample.keys.iter().enumerate() {
            if sample.h[i].abs() < self.config.h_min {
                continue;
            }
            let state = match self.states.get(key) {
                Some(s) => s.clone(),
                None => rls_init_scalar(self.config.phi0, self.config.p0, self.config.r)?,
            };
            let up = rls_update(
                &state,
                &DVector::from_element(1, sample.z[i]),
                &DMatrix::from_element(1, 1, sample.h[i]),
            )?;
            self.trace.push(EstimatorTraceRow {
                step,
                contact_key: key.to_string(),
                phi_hat: up.state.phi_hat[0],
                p: up.state.p[(0, 0)],
                innovation: up.innovation[0],
            });
            self.states.insert(*key, up.state);
            updated += 1;
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use crate::contact::ContactSource;
    use crate::worldsim::ContactRecord;

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn mat(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn init_cases() {
        let s = rls_init_scalar(-1e7, 1e12, 1e-6).unwrap();
        assert_eq!(s.sample_count, 0);
        assert!(matches!(rls_init_scalar(-1e7, -1.0, 1e-6), Err(EstimationError::NotPsd("P0"))));
        assert!(matches!(
            rls_init(2, scalar(0.0), mat(1.0), mat(1.0)),
            Err(EstimationError::Dimension(_))
        ));
    }

    #[test]
    fn zero_prior_covariance_freezes_estimate() {
        let mut s = rls_init_scalar(-10.0, 0.0, 1e-3).unwrap();
        for _ in 0..5 {
            s = rls_update(&s, &scalar(-3.0), &mat(0.01)).unwrap().state;
        }
        assert_eq!(s.phi_hat[0], -10.0);
    }

    #[test]
    fn zero_innovation_keeps_estimate() {
        let s = rls_init_scalar(-40.0, 5.0, 1e-3).unwrap();
        let up = rls_update(&s, &scalar(-40.0 * 0.2), &mat(0.2)).unwrap();
        assert_eq!(up.state.phi_hat[0], -40.0);
        assert!(up.state.p[(0, 0)] <= 5.0);
        assert_eq!(up.innovation[0], 0.0);
    }

    #[test]
    fn one_noiseless_sample_identifies() {
        let s = rls_init_scalar(-1e7, 1e6, 1e-9).unwrap();
        let up = rls_update(&s, &scalar(-50.0), &mat(1.0)).unwrap();
        assert!((up.state.phi_hat[0] + 50.0).abs() < 1e-3);
        let s = rls_init_scalar(-1e7, 1e12, 1e-6).unwrap();
        let up = rls_update(&s, &scalar(-50.0 * 0.003), &mat(0.003)).unwrap();
        assert!((up.state.phi_hat[0] + 50.0).abs() <= 1e-6 * 50.0);
    }

    #[test]
    fn singular_innovation_is_error() {
        let s = rls_init_scalar(-1.0, 0.0, 0.0).unwrap();
        assert_eq!(rls_update(&s, &scalar(1.0), &mat(1.0)), Err(EstimationError::SingularInnovation));
    }

    #[test]
    fn noisy_samples_match_batch_least_squares() {
        let truth = -800.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut s = rls_init_scalar(DEFAULT_PHI0, DEFAULT_P0, 1e-4).unwrap();
        let (mut hh, mut hz) = (0.0, 0.0);
        for _ in 0..500 {
            let h: f64 = rng.gen_range(0.001..0.01);
            let z = truth * h + noise.sample(&mut rng);
            hh += h * h;
            hz += h * z;
            s = rls_update(&s, &scalar(z), &mat(h)).unwrap().state;
        }
        let batch = hz / hh;
        assert!((s.phi_hat[0] - batch).abs() <= 0.05 * batch.abs());
        assert!((s.phi_hat[0] - truth).abs() <= 0.05 * truth.abs());
    }

    #[test]
    fn matrix_identification_exact_after_independent_samples() {
        let truth = DVector::from_vec(vec![-300.0, -2e4]);
        let mut s = rls_init(
            2,
            DVector::from_element(2, DEFAULT_PHI0),
            DMatrix::identity(2, 2) * DEFAULT_P0,
            DMatrix::identity(2, 2) * 1e-9,
        )
        .unwrap();
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![0.004, -0.002]));
        s = rls_update(&s, &(&h * &truth), &h).unwrap().state;
        for i in 0..2 {
            assert!((s.phi_hat[i] - truth[i]).abs() <= 1e-6 * truth[i].abs());
        }
    }

    fn row(step: usize, contacts: &[(usize, f64, f64)]) -> LogRow {
        LogRow {
            step,
            q: DVector::zeros(1),
            q_cmd: DVector::zeros(1),
            contacts: contacts
                .iter()
                .map(|&(id, f, jdq)| ContactRecord { key: ContactKey { link: 0, source: ContactSource::Box(id) }, f, jdq })
                .collect(),
            band_length: None,
            relaxed: false,
            stalled: false,
        }
    }

    #[test]
    fn harvest_cases() {
        let a = row(0, &[(0, 1.0, 0.0)]);
        let b = row(1, &[(0, 3.0, -0.01)]);
        let r = harvest_regressor(&a, &b).unwrap();
        assert_eq!(r.z[0], 2.0);
        assert_eq!(r.h[0], -0.01);

        let still = row(2, &[(0, 3.0, 0.0)]);
        let r = harvest_regressor(&b, &still).unwrap();
        let mut est = StiffnessEstimator::new(EstimatorConfig::default());
        assert_eq!(est.update(2, &r).unwrap(), 0);

        let released = row(3, &[(0, 0.0, 0.02)]);
        assert_eq!(harvest_regressor(&b, &released), Err(EstimationError::ContactSetChanged));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn covariance_stays_psd(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = rls_init(
                2,
                DVector::from_element(2, DEFAULT_PHI0),
                DMatrix::identity(2, 2) * rng.gen_range(1e-3..1e12),
                DMatrix::identity(2, 2) * rng.gen_range(1e-9..1.0),
            ).unwrap();
            let mut trace = s.p.trace();
            for _ in 0..150 {
                let h = DMatrix::from_diagonal(&DVector::from_fn(2, |_, _| {
                    let v: f64 = rng.gen_range(1e-3..1e-1);
                    if rng.gen_bool(0.5) { v } else { -v }
                }));
                let z = DVector::from_fn(2, |_, _| rng.gen_range(-10.0..10.0));
                s = rls_update(&s, &z, &h).unwrap().state;
                let scale = s.p.amax().max(1e-300);
                prop_assert!(s.p.clone().symmetric_eigenvalues().min() >= -1e-10 * scale.max(1.0));
                prop_assert!(s.p.trace() <= trace * (1.0 + 1e-9) + 1e-12);
                prop_assert!(s.phi_hat.iter().all(|&v| v <= 0.0));
                trace = s.p.trace();
            }
        }
    }
}
