//! Kinematics of the yaw + three-pitch chain.
//!
//! Task space is `(x, y, z, pitch)`: the pitch joints all rotate in the
//! vertical plane picked by the base yaw, so the tool cannot roll. Angles
//! are measured from vertical; `pitch = 0` points the tool up and
//! `pitch = π/2` points it horizontally outward.

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::robot_model::{
    GripperConfig, JointVector, RobotDescription, ARM_JOINTS, GRIPPER_JOINT, JOINT_COUNT,
};

/// Below this horizontal distance the base yaw is undefined and set to 0.
pub const YAW_SINGULAR_RADIUS: f64 = 1e-9;
const COS_TOLERANCE: f64 = 1e-12;
const ENVELOPE_SEED: u64 = 0x5eed_00a7;

/// Tool-tip pose in the base frame (z up, origin at the base center on the
/// tabletop).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToolPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub pitch: f64,
}

impl ToolPose {
    pub const fn new(x: f64, y: f64, z: f64, pitch: f64) -> Self {
        Self { x, y, z, pitch }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.pitch.is_finite()
    }

    pub fn horizontal_radius(&self) -> f64 {
        libm::hypot(self.x, self.y)
    }

    pub fn position_distance(&self, other: &ToolPose) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        libm::sqrt(dx * dx + dy * dy + dz * dz)
    }

    /// Stacked error `target - self` as (m, m, m, rad), pitch wrapped.
    pub fn error_to(&self, target: &ToolPose) -> Vector4<f64> {
        Vector4::new(
            target.x - self.x,
            target.y - self.y,
            target.z - self.z,
            normalize_angle(target.pitch - self.pitch),
        )
    }
}

/// Wraps an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = libm::remainder(a, TAU);
    if r <= -PI {
        r += TAU;
    }
    r
}

/// Elbow branch of the planar shoulder/elbow pair. `ElbowUp` keeps the
/// elbow above the shoulder→wrist line, which is `q3 >= 0` with angles
/// measured from vertical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(rename_all = "snake_case")
)]
pub enum Branch {
    #[default]
    ElbowUp,
    ElbowDown,
}

impl Branch {
    pub fn other(self) -> Self {
        match self {
            Branch::ElbowUp => Branch::ElbowDown,
            Branch::ElbowDown => Branch::ElbowUp,
        }
    }

    /// Branch an elbow angle belongs to.
    pub fn of_elbow(q3: f64) -> Self {
        if q3 >= 0.0 {
            Branch::ElbowUp
        } else {
            Branch::ElbowDown
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSolution {
    /// Arm angles; the gripper is not part of the pose.
    pub q: [f64; ARM_JOINTS],
    pub branch: Branch,
    /// The base faces away from the target and the arm reaches back over the
    /// shoulder.
    pub over_shoulder: bool,
    /// Euclidean norm of the (m, m, m, rad) pose error.
    pub residual: f64,
    /// DLS iterations used (0 for the analytic solver).
    pub iterations: u32,
}

impl IkSolution {
    pub fn joints(&self, gripper_width: f64) -> JointVector {
        JointVector::new(self.q, gripper_width)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IkError {
    #[error("pose contains non-finite values")]
    NonFinite,
    #[error("pose is outside the reachable workspace")]
    Unreachable,
    #[error("every geometric solution violates joint limits")]
    LimitViolation { candidates: Vec<IkSolution> },
    #[error("damped least squares did not converge (residual {residual:.3e})")]
    NotConverged {
        best: [f64; ARM_JOINTS],
        residual: f64,
        iterations: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("workspace sampling needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
}

struct Chain {
    r: f64,
    z: f64,
    // partial sums used by both forward and jacobian
    r34: f64,
    r4: f64,
    z34: f64,
    z4: f64,
}

fn chain(q: &[f64; ARM_JOINTS], d: &RobotDescription) -> Chain {
    let q23 = q[1] + q[2];
    let q234 = q23 + q[3];
    let (s2, c2) = libm::sincos(q[1]);
    let (s23, c23) = libm::sincos(q23);
    let (s234, c234) = libm::sincos(q234);
    let r4 = d.a4 * s234;
    let z4 = d.a4 * c234;
    let r34 = d.a3 * s23 + r4;
    let z34 = d.a3 * c23 + z4;
    Chain {
        r: d.a2 * s2 + r34,
        z: d.h0 + d.a2 * c2 + z34,
        r34,
        r4,
        z34,
        z4,
    }
}

/// Tool pose for an arm configuration. The gripper width is ignored.
pub fn forward(q: &JointVector, d: &RobotDescription) -> ToolPose {
    forward_arm(&q.q, d)
}

pub fn forward_arm(q: &[f64; ARM_JOINTS], d: &RobotDescription) -> ToolPose {
    let c = chain(q, d);
    let (s1, c1) = libm::sincos(q[0]);
    ToolPose {
        x: c.r * c1,
        y: c.r * s1,
        z: c.z,
        pitch: normalize_angle(q[1] + q[2] + q[3]),
    }
}

/// Analytic ∂(x, y, z, pitch)/∂(q1..q4). Rows are task coordinates.
pub fn jacobian(q: &JointVector, d: &RobotDescription) -> Matrix4<f64> {
    jacobian_arm(&q.q, d)
}

pub fn jacobian_arm(q: &[f64; ARM_JOINTS], d: &RobotDescription) -> Matrix4<f64> {
    let c = chain(q, d);
    let (s1, c1) = libm::sincos(q[0]);
    // radial and vertical partials w.r.t. q2, q3, q4
    let dr = [c.z - d.h0, c.z34, c.z4];
    let dz = [-c.r, -c.r34, -c.r4];
    Matrix4::new(
        -c.r * s1,
        c1 * dr[0],
        c1 * dr[1],
        c1 * dr[2], //
        c.r * c1,
        s1 * dr[0],
        s1 * dr[1],
        s1 * dr[2], //
        0.0,
        dz[0],
        dz[1],
        dz[2], //
        0.0,
        1.0,
        1.0,
        1.0,
    )
}

fn within_arm_limits(q: &[f64; ARM_JOINTS], d: &RobotDescription) -> bool {
    q.iter().zip(&d.joints).all(|(v, j)| j.contains(*v))
}

/// Solves the planar shoulder/elbow problem for a signed radial distance.
fn solve_planar(
    yaw: f64,
    radial: f64,
    p: &ToolPose,
    branch: Branch,
    d: &RobotDescription,
) -> Option<[f64; ARM_JOINTS]> {
    let (sp, cp) = libm::sincos(p.pitch);
    let wr = radial - d.a4 * sp;
    let wz = p.z - d.h0 - d.a4 * cp;
    let cos3 = (wr * wr + wz * wz - d.a2 * d.a2 - d.a3 * d.a3) / (2.0 * d.a2 * d.a3);
    if cos3.abs() > 1.0 + COS_TOLERANCE {
        return None;
    }
    let elbow = libm::acos(cos3.clamp(-1.0, 1.0));
    let q3 = match branch {
        Branch::ElbowUp => elbow,
        Branch::ElbowDown => -elbow,
    };
    let (s3, c3) = libm::sincos(q3);
    let q2 = normalize_angle(libm::atan2(wr, wz) - libm::atan2(d.a3 * s3, d.a2 + d.a3 * c3));
    let q4 = normalize_angle(p.pitch - q2 - q3);
    Some([yaw, q2, q3, q4])
}

fn residual(q: &[f64; ARM_JOINTS], p: &ToolPose, d: &RobotDescription) -> f64 {
    forward_arm(q, d).error_to(p).norm()
}

/// Every geometric solution for `p`, limits ignored, most preferred first:
/// facing the target before reaching over the shoulder, preferred branch
/// before the other one.
pub fn ik_candidates(
    p: &ToolPose,
    d: &RobotDescription,
    prefer: Branch,
) -> Result<Vec<IkSolution>, IkError> {
    if !p.is_finite() {
        return Err(IkError::NonFinite);
    }
    let rho = p.horizontal_radius();
    let yaw = if rho < YAW_SINGULAR_RADIUS {
        0.0
    } else {
        libm::atan2(p.y, p.x)
    };
    let mut out = Vec::with_capacity(4);
    for (over_shoulder, yaw, radial) in [(false, yaw, rho), (true, normalize_angle(yaw + PI), -rho)]
    {
        for branch in [prefer, prefer.other()] {
            if let Some(q) = solve_planar(yaw, radial, p, branch, d) {
                out.push(IkSolution {
                    q,
                    branch,
                    over_shoulder,
                    residual: residual(&q, p, d),
                    iterations: 0,
                });
            }
        }
    }
    if out.is_empty() {
        Err(IkError::Unreachable)
    } else {
        Ok(out)
    }
}

/// Closed-form inverse kinematics: yaw from `atan2(y, x)`, then the planar
/// 2R problem on the wrist point. Returns the most preferred candidate
/// inside the joint limits.
pub fn inverse_analytic(
    p: &ToolPose,
    d: &RobotDescription,
    prefer: Branch,
) -> Result<IkSolution, IkError> {
    let candidates = ik_candidates(p, d, prefer)?;
    match candidates.iter().find(|s| within_arm_limits(&s.q, d)) {
        Some(s) => {
            let mut s = *s;
            for (v, j) in s.q.iter_mut().zip(&d.joints) {
                *v = j.clamp(*v);
            }
            s.residual = residual(&s.q, p, d);
            Ok(s)
        }
        None => Err(IkError::LimitViolation { candidates }),
    }
}

/// Tuning for [`inverse_numeric`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlsConfig {
    pub damping: f64,
    /// Error norm at and above which the full `damping` applies; below it
    /// the damping shrinks in proportion so the final iterations behave
    /// like Gauss-Newton.
    pub damping_error_scale: f64,
    /// Fraction of `damping` always kept, for a well-conditioned solve.
    pub damping_floor: f64,
    pub tolerance: f64,
    pub max_iterations: u32,
    /// Largest per-joint change in one iteration, radians.
    pub max_step: f64,
}

impl Default for DlsConfig {
    fn default() -> Self {
        Self {
            damping: 0.05,
            damping_error_scale: 1e-2,
            damping_floor: 1e-3,
            tolerance: 1e-8,
            max_iterations: 200,
            max_step: 0.2,
        }
    }
}

/// Damped least-squares inverse kinematics from the seed `q0`.
///
/// Each iteration applies `Δq = Jᵀ (J Jᵀ + λ² I)⁻¹ e`, scaled down so no
/// joint moves more than `max_step`, then clamps the arm to its limits.
/// λ tapers with the error norm (see [`DlsConfig::damping_error_scale`]);
/// a constant λ crawls near singular configurations.
/// On failure the best iterate seen is returned inside the error.
pub fn inverse_numeric(
    p: &ToolPose,
    d: &RobotDescription,
    q0: &JointVector,
    cfg: &DlsConfig,
) -> Result<IkSolution, IkError> {
    if !p.is_finite() || !q0.is_finite() {
        return Err(IkError::NonFinite);
    }
    let mut q = q0.q;
    let mut best = (q, f64::INFINITY);
    for it in 0..=cfg.max_iterations {
        let e = forward_arm(&q, d).error_to(p);
        let norm = e.norm();
        if norm < best.1 {
            best = (q, norm);
        }
        if norm < cfg.tolerance {
            return Ok(IkSolution {
                q,
                branch: Branch::of_elbow(q[2]),
                over_shoulder: chain(&q, d).r < 0.0,
                residual: norm,
                iterations: it,
            });
        }
        if it == cfg.max_iterations {
            break;
        }
        let taper = (norm / cfg.damping_error_scale).clamp(cfg.damping_floor, 1.0);
        let lambda = cfg.damping * taper;
        let j = jacobian_arm(&q, d);
        let damped = j * j.transpose() + Matrix4::identity() * (lambda * lambda);
        let Some(chol) = damped.cholesky() else {
            break;
        };
        let mut dq = j.transpose() * chol.solve(&e);
        let peak = dq.amax();
        if peak > cfg.max_step {
            dq *= cfg.max_step / peak;
        }
        for (i, joint) in d.joints.iter().take(ARM_JOINTS).enumerate() {
            q[i] = (q[i] + dq[i]).clamp(joint.limit_min_rad, joint.limit_max_rad);
        }
    }
    Err(IkError::NotConverged {
        best: best.0,
        residual: best.1,
        iterations: cfg.max_iterations,
    })
}

/// A value that may have been pulled back into its valid range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped {
    pub value: f64,
    pub clamped: bool,
}

/// Actuator angle for a jaw width, interpolating the two calibration points.
pub fn gripper_angle_for_width(w: f64, g: &GripperConfig) -> Clamped {
    let clamped = !(w >= g.width_closed_m && w <= g.width_open_m);
    let w = w.clamp(g.width_closed_m, g.width_open_m);
    let t = (w - g.width_closed_m) / (g.width_open_m - g.width_closed_m);
    Clamped {
        value: g.angle_closed_rad + t * (g.angle_open_rad - g.angle_closed_rad),
        clamped,
    }
}

/// Jaw width for an actuator angle; inverse of [`gripper_angle_for_width`].
pub fn gripper_width_for_angle(angle: f64, g: &GripperConfig) -> Clamped {
    let lo = g.angle_closed_rad.min(g.angle_open_rad);
    let hi = g.angle_closed_rad.max(g.angle_open_rad);
    let clamped = !(angle >= lo && angle <= hi);
    let angle = angle.clamp(lo, hi);
    let t = (angle - g.angle_closed_rad) / (g.angle_open_rad - g.angle_closed_rad);
    Clamped {
        value: g.width_closed_m + t * (g.width_open_m - g.width_closed_m),
        clamped,
    }
}

/// Actuator angles for all five motors, in bus order.
pub fn actuator_angles(q: &JointVector, d: &RobotDescription) -> [f64; JOINT_COUNT] {
    let mut out = [0.0; JOINT_COUNT];
    out[..ARM_JOINTS].copy_from_slice(&q.q);
    out[GRIPPER_JOINT] = gripper_angle_for_width(q.w, &d.gripper).value;
    out
}

pub fn joints_from_actuators(angles: &[f64; JOINT_COUNT], d: &RobotDescription) -> JointVector {
    let mut q = [0.0; ARM_JOINTS];
    q.copy_from_slice(&angles[..ARM_JOINTS]);
    JointVector::new(
        q,
        gripper_width_for_angle(angles[GRIPPER_JOINT], &d.gripper).value,
    )
}

/// Extrema of the reachable tool-tip positions.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Envelope {
    pub max_horizontal_radius: f64,
    pub max_tool_height: f64,
    pub min_tool_height: f64,
    pub samples: usize,
}

impl Envelope {
    pub fn vertical_travel(&self) -> f64 {
        self.max_tool_height - self.min_tool_height
    }
}

pub const MIN_ENVELOPE_SAMPLES: usize = 1000;

/// Samples in-limit configurations and reports the tool-tip extrema.
///
/// The sample set is deterministic: first the lattice of each arm joint's
/// `{min, 0, max}` (zero only when inside the limits), then seeded uniform
/// draws until `n_samples` configurations have been evaluated.
pub fn workspace_envelope(
    d: &RobotDescription,
    n_samples: usize,
) -> Result<Envelope, KinematicsError> {
    if n_samples < MIN_ENVELOPE_SAMPLES {
        return Err(KinematicsError::TooFewSamples {
            min: MIN_ENVELOPE_SAMPLES,
            got: n_samples,
        });
    }
    let mut env = Envelope {
        max_horizontal_radius: f64::NEG_INFINITY,
        max_tool_height: f64::NEG_INFINITY,
        min_tool_height: f64::INFINITY,
        samples: 0,
    };
    let mut visit = |q: &[f64; ARM_JOINTS]| {
        let p = forward_arm(q, d);
        let r = p.horizontal_radius();
        env.max_horizontal_radius = env.max_horizontal_radius.max(r);
        env.max_tool_height = env.max_tool_height.max(p.z);
        env.min_tool_height = env.min_tool_height.min(p.z);
        env.samples += 1;
    };

    let levels: Vec<Vec<f64>> = d.joints[..ARM_JOINTS]
        .iter()
        .map(|j| {
            let mut v = alloc::vec![j.limit_min_rad, j.limit_max_rad];
            if j.contains(0.0) {
                v.push(0.0);
            }
            v
        })
        .collect();
    let mut lattice = 0;
    for &a in &levels[0] {
        for &b in &levels[1] {
            for &c in &levels[2] {
                for &e in &levels[3] {
                    if lattice < n_samples {
                        visit(&[a, b, c, e]);
                        lattice += 1;
                    }
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(ENVELOPE_SEED);
    for _ in lattice..n_samples {
        let mut q = [0.0; ARM_JOINTS];
        for (v, j) in q.iter_mut().zip(&d.joints) {
            *v = rng.random_range(j.limit_min_rad..=j.limit_max_rad);
        }
        visit(&q);
    }
    Ok(env)
}
