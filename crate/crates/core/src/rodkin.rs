//! Constant curvature/torsion kinematics of a single-section arm.
//!
//! The centerline obeys `r' = R v` and `R' = R û` with `v = [0, 0, 1]` and
//! `u = [κ, 0, τ]`. With constant strains the twist is constant, so every pose
//! along the arm is the SE(3) exponential of `s · (v, u)`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Below this value of `‖u‖·s` the closed form switches to a Taylor expansion.
const SERIES_ANGLE: f64 = 1e-2;
/// Rotation-log is treated as ambiguous within this distance of π.
const LOG_DEGENERACY: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("arc length {s} outside [0, {length}]")]
    ArcLengthOutOfRange { s: f64, length: f64 },
    #[error("non-finite strain (kappa={kappa}, tau={tau})")]
    NonFinite { kappa: f64, tau: f64 },
    #[error("invalid rod parameters: {0}")]
    InvalidRod(String),
    #[error("tip rotation angle {angle} is within 1e-6 of pi; rotation-log is ambiguous")]
    Degenerate { angle: f64 },
}

/// A point in configuration space: curvature and torsion, both in 1/m.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmConfig {
    pub kappa: f64,
    pub tau: f64,
}

impl ArmConfig {
    pub fn new(kappa: f64, tau: f64) -> Result<Self, KinematicsError> {
        if !(kappa.is_finite() && tau.is_finite()) {
            return Err(KinematicsError::NonFinite { kappa, tau });
        }
        Ok(Self { kappa, tau })
    }

    pub fn strain(&self) -> Vector3<f64> {
        Vector3::new(self.kappa, 0.0, self.tau)
    }

    pub fn distance(&self, other: &ArmConfig) -> f64 {
        (self.kappa - other.kappa).hypot(self.tau - other.tau)
    }
}

/// Box limits on the strains the controllers may command.
///
/// The bending actuator only bends one way, so curvature has its own lower
/// bound; torsion is symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrainBounds {
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub tau_max: f64,
}

impl Default for StrainBounds {
    fn default() -> Self {
        Self { kappa_min: 0.0, kappa_max: 12.0, tau_max: 12.0 }
    }
}

impl StrainBounds {
    pub fn contains(&self, c: &ArmConfig) -> bool {
        c.kappa >= self.kappa_min && c.kappa <= self.kappa_max && c.tau.abs() <= self.tau_max
    }

    pub fn clamp(&self, c: ArmConfig) -> ArmConfig {
        ArmConfig {
            kappa: c.kappa.clamp(self.kappa_min, self.kappa_max),
            tau: c.tau.clamp(-self.tau_max, self.tau_max),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = self.kappa_min.is_finite()
            && self.kappa_max.is_finite()
            && self.tau_max.is_finite()
            && self.kappa_min < self.kappa_max
            && self.tau_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(format!("bad strain bounds {self:?}"))
        }
    }
}

/// Position and orientation of a frame, expressed in the arm base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Matrix3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { position: Vector3::zeros(), orientation: Matrix3::identity() }
    }

    /// `self ∘ other`, with `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.orientation * other.position,
            orientation: self.orientation * other.orientation,
        }
    }

    /// Optical / normal axis of the frame (third column).
    pub fn z_axis(&self) -> Vector3<f64> {
        self.orientation.column(2).into_owned()
    }

    pub fn is_valid_rotation(&self, tol: f64) -> bool {
        let r = &self.orientation;
        (r.transpose() * r - Matrix3::identity()).norm() <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    /// Unit quaternion `[w, x, y, z]` with `w ≥ 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.orientation);
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RodParams {
    /// Arm length in m.
    pub length: f64,
    /// Number of centerline marker spheres, base and tip included.
    pub n_markers: usize,
    /// Marker sphere radius in m.
    pub marker_radius: f64,
}

impl Default for RodParams {
    fn default() -> Self {
        Self { length: 0.30, n_markers: 15, marker_radius: 0.01 }
    }
}

impl RodParams {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(KinematicsError::InvalidRod(format!("length must be > 0, got {}", self.length)));
        }
        if self.n_markers < 2 {
            return Err(KinematicsError::InvalidRod(format!("need at least 2 markers, got {}", self.n_markers)));
        }
        if !(self.marker_radius > 0.0 && self.marker_radius.is_finite()) {
            return Err(KinematicsError::InvalidRod(format!(
                "marker radius must be > 0, got {}",
                self.marker_radius
            )));
        }
        Ok(())
    }
}

pub fn hat(u: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0)
}

/// Pose at arc length `s` along an arm of length `length`.
pub fn forward_pose_with_length(config: ArmConfig, s: f64, length: f64) -> Result<Pose, KinematicsError> {
    if !(config.kappa.is_finite() && config.tau.is_finite()) {
        return Err(KinematicsError::NonFinite { kappa: config.kappa, tau: config.tau });
    }
    if !(0.0..=length).contains(&s) {
        return Err(KinematicsError::ArcLengthOutOfRange { s, length });
    }
    Ok(twist_exp(&config.strain(), s))
}

/// Pose at arc length `s ∈ [0, L]`.
pub fn forward_pose(config: ArmConfig, s: f64, params: &RodParams) -> Result<Pose, KinematicsError> {
    forward_pose_with_length(config, s, params.length)
}

/// SE(3) exponential of `s · (v, u)` with `v = e_z`.
fn twist_exp(u: &Vector3<f64>, s: f64) -> Pose {
    let v = Vector3::z();
    let w = u.norm();
    let uh = hat(u);
    let uh2 = uh * uh;
    let theta = w * s;
    // R = I + s·a·û + s²·b·û², J = s·I + s²·b·û + s³·c·û², with
    // a = sinθ/θ, b = (1−cosθ)/θ², c = (θ−sinθ)/θ³. Series below the
    // threshold avoid the cancellation in b and c.
    let (a, b, c) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0)),
            0.5 - t2 / 24.0 * (1.0 - t2 / 30.0 * (1.0 - t2 / 56.0)),
            1.0 / 6.0 - t2 / 120.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 72.0)),
        )
    } else {
        let sin = theta.sin();
        let half = (0.5 * theta).sin();
        (sin / theta, 2.0 * half * half / (theta * theta), (theta - sin) / (theta * theta * theta))
    };
    let r = Matrix3::identity() + uh * (s * a) + uh2 * (s * s * b);
    let jac = Matrix3::identity() * s + uh * (s * s * b) + uh2 * (s * s * s * c);
    Pose { position: jac * v, orientation: r }
}

pub fn tip_pose(config: ArmConfig, params: &RodParams) -> Result<Pose, KinematicsError> {
    forward_pose(config, params.length, params)
}

/// Marker poses at `s_i = i·L/(n−1)`; the last one is evaluated at exactly `L`.
pub fn centerline_samples(config: ArmConfig, params: &RodParams) -> Result<Vec<Pose>, KinematicsError> {
    params.validate()?;
    let n = params.n_markers;
    (0..n)
        .map(|i| {
            let s = if i + 1 == n { params.length } else { i as f64 * params.length / (n - 1) as f64 };
            forward_pose(config, s, params)
        })
        .collect()
}

/// Fixed-step RK4 integration of the rod ODEs from the identity base frame.
///
/// Test oracle: no re-orthonormalisation, no closed form.
pub fn ode_oracle_pose(config: ArmConfig, s: f64, n_steps: usize) -> Pose {
    let n_steps = n_steps.max(1);
    let uh = hat(&config.strain());
    let v = Vector3::z();
    let h = s / n_steps as f64;
    let mut r = Vector3::zeros();
    let mut rot = Matrix3::identity();
    // State derivative does not depend on r, only on R.
    for _ in 0..n_steps {
        let k1r = rot * v;
        let k1 = rot * uh;
        let rot2 = rot + k1 * (0.5 * h);
        let k2r = rot2 * v;
        let k2 = rot2 * uh;
        let rot3 = rot + k2 * (0.5 * h);
        let k3r = rot3 * v;
        let k3 = rot3 * uh;
        let rot4 = rot + k3 * h;
        let k4r = rot4 * v;
        let k4 = rot4 * uh;
        r += (k1r + k2r * 2.0 + k3r * 2.0 + k4r) * (h / 6.0);
        rot += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Pose { position: r, orientation: rot }
}

/// Result of inverting the tip pose to strains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigEstimate {
    pub config: ArmConfig,
    /// `|θ·a_y / L|` plus the tip position mismatch norm.
    pub residual: f64,
}

/// Estimate `(κ, τ)` from a measured tip pose via the rotation log.
///
/// The exponential is only injective for `‖u‖L < π`, so both branches `θ·a`
/// and `(θ − 2π)·a` are tried and the one with the smaller residual wins.
pub fn estimate_config(tip: &Pose, params: &RodParams) -> Result<ConfigEstimate, KinematicsError> {
    let length = params.length;
    let rot = Rotation3::from_matrix(&tip.orientation);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let q = if q.w < 0.0 { UnitQuaternion::new_unchecked(-q.into_inner()) } else { q };
    let vec_norm = q.imag().norm();
    let angle = 2.0 * vec_norm.atan2(q.w);
    if (angle - PI).abs() < LOG_DEGENERACY {
        return Err(KinematicsError::Degenerate { angle });
    }
    if vec_norm == 0.0 {
        let c = ArmConfig { kappa: 0.0, tau: 0.0 };
        let res = (tip.position - Vector3::new(0.0, 0.0, length)).norm();
        return Ok(ConfigEstimate { config: c, residual: res });
    }
    let axis = q.imag() / vec_norm;
    let candidate = |phi: f64| {
        let u = axis * (phi / length);
        let config = ArmConfig { kappa: u.x, tau: u.z };
        let predicted = twist_exp(&config.strain(), length);
        let residual = u.y.abs() + (predicted.position - tip.position).norm();
        ConfigEstimate { config, residual }
    };
    let principal = candidate(angle);
    let wrapped = candidate(angle - 2.0 * PI);
    Ok(if wrapped.residual < principal.residual { wrapped } else { principal })
}

/// Gauss-Newton fit of `(κ, τ)` to a tip pose, for use near the log degeneracy.
///
/// Minimises the stacked position and rotation-vector error starting from
/// `init`.
pub fn estimate_config_least_squares(
    tip: &Pose,
    params: &RodParams,
    init: ArmConfig,
    max_iters: usize,
) -> ConfigEstimate {
    let length = params.length;
    let residual_vec = |c: &ArmConfig| -> [f64; 6] {
        let p = twist_exp(&c.strain(), length);
        let dp = (p.position - tip.position) / length;
        let dr = Rotation3::from_matrix_unchecked(tip.orientation.transpose() * p.orientation).scaled_axis();
        [dp.x, dp.y, dp.z, dr.x, dr.y, dr.z]
    };
    let sq = |r: &[f64; 6]| r.iter().map(|x| x * x).sum::<f64>();
    let mut c = init;
    let mut r = residual_vec(&c);
    let mut cost = sq(&r);
    let mut damping = 1e-6;
    for _ in 0..max_iters {
        let h = 1e-7;
        let rk = residual_vec(&ArmConfig { kappa: c.kappa + h, tau: c.tau });
        let rt = residual_vec(&ArmConfig { kappa: c.kappa, tau: c.tau + h });
        let jk: Vec<f64> = (0..6).map(|i| (rk[i] - r[i]) / h).collect();
        let jt: Vec<f64> = (0..6).map(|i| (rt[i] - r[i]) / h).collect();
        let a11 = jk.iter().map(|x| x * x).sum::<f64>() + damping;
        let a22 = jt.iter().map(|x| x * x).sum::<f64>() + damping;
        let a12: f64 = jk.iter().zip(&jt).map(|(a, b)| a * b).sum();
        let g1: f64 = jk.iter().zip(&r).map(|(a, b)| a * b).sum();
        let g2: f64 = jt.iter().zip(&r).map(|(a, b)| a * b).sum();
        let det = a11 * a22 - a12 * a12;
        if det.abs() < 1e-300 {
            break;
        }
        let dk = -(a22 * g1 - a12 * g2) / det;
        let dt = -(a11 * g2 - a12 * g1) / det;
        let trial = ArmConfig { kappa: c.kappa + dk, tau: c.tau + dt };
        let rt = residual_vec(&trial);
        let trial_cost = sq(&rt);
        if trial_cost < cost {
            c = trial;
            r = rt;
            let done = cost - trial_cost < 1e-30;
            cost = trial_cost;
            damping = (damping * 0.3).max(1e-12);
            if done {
                break;
            }
        } else {
            damping *= 10.0;
        }
    }
    let u = c.strain();
    let p = twist_exp(&u, length);
    ConfigEstimate { config: c, residual: (p.position - tip.position).norm() }
}

/// Rotation-log estimate, falling back to least squares from `fallback_init`
/// when the log is degenerate.
pub fn estimate_config_robust(tip: &Pose, params: &RodParams, fallback_init: ArmConfig) -> ConfigEstimate {
    match estimate_config(tip, params) {
        Ok(est) => est,
        Err(_) => estimate_config_least_squares(tip, params, fallback_init, 50),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rod() -> RodParams {
        RodParams::default()
    }

    fn rot_x(a: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::x_axis(), a).into_inner()
    }

    fn rot_z(a: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), a).into_inner()
    }

    #[test]
    fn straight_arm() {
        let p = forward_pose(ArmConfig::new(0.0, 0.0).unwrap(), 0.3, &rod()).unwrap();
        assert_relative_eq!(p.position, Vector3::new(0.0, 0.0, 0.3), epsilon = 1e-15);
        assert_relative_eq!(p.orientation, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn pure_torsion_only_spins() {
        let t = 4.0;
        let p = forward_pose(ArmConfig::new(0.0, t).unwrap(), 0.3, &rod()).unwrap();
        assert_relative_eq!(p.position, Vector3::new(0.0, 0.0, 0.3), epsilon = 1e-14);
        assert_relative_eq!(p.orientation, rot_z(t * 0.3), epsilon = 1e-14);
    }

    #[test]
    fn pure_bending_is_circular_arc() {
        let k = 5.0;
        for &s in &[0.0, 0.05, 0.17, 0.3] {
            let p = forward_pose(ArmConfig::new(k, 0.0).unwrap(), s, &rod()).unwrap();
            let expected = Vector3::new(0.0, ((k * s).cos() - 1.0) / k, (k * s).sin() / k);
            assert_relative_eq!(p.position, expected, epsilon = 1e-14);
            assert_relative_eq!(p.orientation, rot_x(k * s), epsilon = 1e-14);
            let oracle = ode_oracle_pose(ArmConfig::new(k, 0.0).unwrap(), s, 10_000);
            assert_relative_eq!(oracle.position, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_rk4_oracle_for_general_strain() {
        let c = ArmConfig::new(3.0, 2.0).unwrap();
        let p = forward_pose(c, 0.3, &rod()).unwrap();
        let o = ode_oracle_pose(c, 0.3, 10_000);
        assert!((p.position - o.position).norm() < 1e-9 * 0.3);
        assert!((p.orientation - o.orientation).norm() < 1e-9);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let c = ArmConfig::new(9.0, -7.0).unwrap();
        let exact = forward_pose(c, 0.3, &rod()).unwrap();
        let err = |n| {
            let o = ode_oracle_pose(c, 0.3, n);
            (o.position - exact.position).norm() + (o.orientation - exact.orientation).norm()
        };
        let ratio = err(20) / err(40);
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_strain_oracle_is_exact() {
        let o = ode_oracle_pose(ArmConfig::default(), 0.2, 7);
        assert_eq!(o.orientation, Matrix3::identity());
        assert_relative_eq!(o.position, Vector3::new(0.0, 0.0, 0.2), epsilon = 1e-16);
    }

    #[test]
    fn tiny_strain_uses_series_without_jump() {
        let s = 0.3;
        let below = forward_pose(ArmConfig::new(1e-9, 1e-9).unwrap(), s, &rod()).unwrap();
        let above = forward_pose(ArmConfig::new(1e-7, 0.0).unwrap(), s, &rod()).unwrap();
        let ob = ode_oracle_pose(ArmConfig::new(1e-9, 1e-9).unwrap(), s, 100);
        let oa = ode_oracle_pose(ArmConfig::new(1e-7, 0.0).unwrap(), s, 100);
        let (eb, ea) = ((below.position - ob.position).norm(), (above.position - oa.position).norm());
        assert!(eb < 1e-15 && ea < 1e-15, "{eb:e} {ea:e}");
    }

    #[test]
    fn out_of_range_arc_length() {
        let c = ArmConfig::default();
        assert!(matches!(forward_pose(c, -1e-3, &rod()), Err(KinematicsError::ArcLengthOutOfRange { .. })));
        assert!(matches!(forward_pose(c, 0.31, &rod()), Err(KinematicsError::ArcLengthOutOfRange { .. })));
        assert!(ArmConfig::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn base_pose_is_identity() {
        let p = forward_pose(ArmConfig::new(7.0, -3.0).unwrap(), 0.0, &rod()).unwrap();
        assert_eq!(p.position, Vector3::zeros());
        assert_eq!(p.orientation, Matrix3::identity());
    }

    #[test]
    fn tip_pose_is_forward_pose_at_length() {
        let c = ArmConfig::new(2.5, 6.0).unwrap();
        assert_eq!(tip_pose(c, &rod()).unwrap(), forward_pose(c, 0.3, &rod()).unwrap());
    }

    #[test]
    fn centerline_markers() {
        let two = RodParams { n_markers: 2, ..rod() };
        let c = ArmConfig::new(4.0, 1.0).unwrap();
        let m = centerline_samples(c, &two).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], Pose::identity());
        assert_eq!(m[1], tip_pose(c, &two).unwrap());

        let five = RodParams { n_markers: 5, ..rod() };
        let m = centerline_samples(ArmConfig::default(), &five).unwrap();
        for (i, p) in m.iter().enumerate() {
            assert_relative_eq!(p.position, Vector3::new(0.0, 0.0, i as f64 * 0.3 / 4.0), epsilon = 1e-15);
        }

        let three = RodParams { n_markers: 3, ..rod() };
        let c = ArmConfig::new(8.0, 0.0).unwrap();
        let m = centerline_samples(c, &three).unwrap();
        assert_eq!(m[1], forward_pose(c, 0.15, &three).unwrap());
        assert_eq!(m[2], tip_pose(c, &three).unwrap());
    }

    #[test]
    fn invalid_rod_is_rejected() {
        assert!(RodParams { n_markers: 1, ..rod() }.validate().is_err());
        assert!(RodParams { length: 0.0, ..rod() }.validate().is_err());
        assert!(RodParams { marker_radius: -0.1, ..rod() }.validate().is_err());
    }

    #[test]
    fn estimate_round_trip_examples() {
        let c = ArmConfig::new(2.0, 1.0).unwrap();
        let est = estimate_config(&tip_pose(c, &rod()).unwrap(), &rod()).unwrap();
        assert!((est.config.kappa - 2.0).abs() < 1e-8 && (est.config.tau - 1.0).abs() < 1e-8);
        assert!(est.residual < 1e-9);

        let straight = Pose { position: Vector3::new(0.0, 0.0, 0.3), orientation: Matrix3::identity() };
        let est = estimate_config(&straight, &rod()).unwrap();
        assert_eq!(est.config, ArmConfig { kappa: 0.0, tau: 0.0 });
    }

    #[test]
    fn estimate_uses_wrapped_branch_beyond_pi() {
        // ‖u‖L = 0.3·√(144+100) ≈ 4.69 > π
        let c = ArmConfig::new(12.0, -10.0).unwrap();
        let est = estimate_config(&tip_pose(c, &rod()).unwrap(), &rod()).unwrap();
        assert!(est.config.distance(&c) < 1e-8, "{est:?}");
    }

    #[test]
    fn estimate_with_rotation_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = ArmConfig::new(6.0, -4.0).unwrap();
        let mut tip = tip_pose(c, &rod()).unwrap();
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5).normalize();
        tip.orientation = tip.orientation * Rotation3::new(axis * 1e-3).into_inner();
        let est = estimate_config(&tip, &rod()).unwrap();
        assert!(est.config.distance(&c) < 1e-2);
        assert!(est.residual > 0.0);
    }

    #[test]
    fn degenerate_log_is_signalled_and_least_squares_recovers() {
        // ‖u‖L = π exactly: pure bending by half a turn.
        let c = ArmConfig::new(PI / 0.3, 0.0).unwrap();
        let tip = tip_pose(c, &rod()).unwrap();
        assert!(matches!(estimate_config(&tip, &rod()), Err(KinematicsError::Degenerate { .. })));
        let est = estimate_config_robust(&tip, &rod(), ArmConfig::new(9.0, 0.5).unwrap());
        assert!(est.config.distance(&c) < 1e-6, "{est:?}");
    }

    #[test]
    fn least_squares_converges_from_nearby_start() {
        let c = ArmConfig::new(5.0, 7.0).unwrap();
        let tip = tip_pose(c, &rod()).unwrap();
        let est = estimate_config_least_squares(&tip, &rod(), ArmConfig::new(4.0, 6.0).unwrap(), 50);
        assert!(est.config.distance(&c) < 1e-7, "{est:?}");
    }

    #[test]
    fn quaternion_is_canonical() {
        let p = tip_pose(ArmConfig::new(11.0, 9.0).unwrap(), &rod()).unwrap();
        let q = p.quaternion_wxyz();
        assert!(q[0] >= 0.0);
        assert_relative_eq!(q.iter().map(|x| x * x).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn group_property(k in -12.0..12.0f64, t in -12.0..12.0f64, s1 in 0.0..0.15f64, s2 in 0.0..0.15f64) {
            let c = ArmConfig::new(k, t).unwrap();
            let whole = forward_pose(c, s1 + s2, &rod()).unwrap();
            let a = forward_pose(c, s1, &rod()).unwrap();
            let b = forward_pose(c, s2, &rod()).unwrap();
            let composed = a.compose(&b);
            prop_assert!((whole.position - composed.position).norm() < 1e-10);
            prop_assert!((whole.orientation - composed.orientation).norm() < 1e-10);
        }

        #[test]
        fn orientation_stays_orthonormal(k in -12.0..12.0f64, t in -12.0..12.0f64, s in 0.0..0.3f64) {
            let p = forward_pose(ArmConfig::new(k, t).unwrap(), s, &rod()).unwrap();
            prop_assert!(p.is_valid_rotation(1e-9));
        }

        #[test]
        fn round_trip_in_bounds(k in -12.0..12.0f64, t in -12.0..12.0f64) {
            let c = ArmConfig::new(k, t).unwrap();
            let tip = tip_pose(c, &rod()).unwrap();
            match estimate_config(&tip, &rod()) {
                Ok(est) => prop_assert!(est.config.distance(&c) < 1e-8, "{:?} vs {:?}", est, c),
                Err(KinematicsError::Degenerate { .. }) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    #[test]
    fn ode_consistency_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let c = ArmConfig::new(rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0)).unwrap();
            let p = tip_pose(c, &rod()).unwrap();
            let o = ode_oracle_pose(c, 0.3, 10_000);
            assert!((p.position - o.position).norm() < 1e-8 * 0.3);
            assert!((p.orientation - o.orientation).norm() < 1e-8);
        }
    }
}
