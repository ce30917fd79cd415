//! Trajectory generation: synchronized trapezoidal joint moves and
//! straight Cartesian lines built from them.
//!
//! Profiles run in actuator space (radians for all five motors, the gripper
//! included) so every axis is bounded by its own `vmax`/`amax`. Sampling
//! maps the gripper back to a jaw width.

use alloc::vec::Vec;

use thiserror::Error;

use crate::kinematics::{
    actuator_angles, forward_arm, gripper_width_for_angle, inverse_analytic, normalize_angle,
    Branch, IkError, ToolPose,
};
use crate::robot_model::{
    GripperConfig, JointVector, RobotDescription, ARM_JOINTS, GRIPPER_JOINT, JOINT_COUNT,
    LIMIT_TOLERANCE,
};

/// Default Cartesian sampling step, meters.
pub const DEFAULT_LINE_STEP: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Min(f64),
    Max(f64),
    NotFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitViolation {
    /// 0..4 are the arm joints, 4 is the gripper width.
    pub joint: usize,
    pub value: f64,
    pub bound: Bound,
}

/// Every limit a configuration breaks; empty when it is within limits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LimitReport {
    pub violations: Vec<LimitViolation>,
}

impl LimitReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn joints(&self) -> impl Iterator<Item = usize> + '_ {
        self.violations.iter().map(|v| v.joint)
    }
}

impl core::fmt::Display for LimitReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match v.bound {
                Bound::Min(b) => write!(f, "joint {} = {:.4} < {:.4}", v.joint + 1, v.value, b)?,
                Bound::Max(b) => write!(f, "joint {} = {:.4} > {:.4}", v.joint + 1, v.value, b)?,
                Bound::NotFinite => write!(f, "joint {} is not finite", v.joint + 1)?,
            }
        }
        Ok(())
    }
}

pub fn check_limits(q: &JointVector, d: &RobotDescription) -> LimitReport {
    let mut violations = Vec::new();
    let mut check = |joint: usize, value: f64, lo: f64, hi: f64| {
        let bound = if !value.is_finite() {
            Bound::NotFinite
        } else if value < lo - LIMIT_TOLERANCE {
            Bound::Min(lo)
        } else if value > hi + LIMIT_TOLERANCE {
            Bound::Max(hi)
        } else {
            return;
        };
        violations.push(LimitViolation {
            joint,
            value,
            bound,
        });
    };
    for (i, (v, j)) in q.q.iter().zip(&d.joints).enumerate() {
        check(i, *v, j.limit_min_rad, j.limit_max_rad);
    }
    check(
        ARM_JOINTS,
        q.w,
        d.gripper.width_closed_m,
        d.gripper.width_open_m,
    );
    LimitReport { violations }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotionError {
    #[error("joint limits violated: {0}")]
    LimitViolation(LimitReport),
    #[error("line sample {index} is unreachable")]
    Unreachable { index: usize, pose: ToolPose },
    #[error("line sample {index} needs a different elbow branch than the line start")]
    BranchFlip { index: usize },
    #[error("sampling step must be positive and finite")]
    InvalidStep,
    #[error("speed scale must be in (0, 1]")]
    InvalidSpeedScale,
}

/// One axis moving rest-to-rest with a trapezoidal (or triangular)
/// velocity profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisProfile {
    pub start: f64,
    pub end: f64,
    pub accel: f64,
    /// Cruise (or triangular peak) speed.
    pub peak_velocity: f64,
    pub t_acc: f64,
    pub duration: f64,
}

/// Shortest rest-to-rest time for `distance` under the bounds.
pub fn min_duration(distance: f64, vmax: f64, amax: f64) -> f64 {
    let d = distance.abs();
    if d == 0.0 {
        0.0
    } else if d >= vmax * vmax / amax {
        d / vmax + vmax / amax
    } else {
        2.0 * libm::sqrt(d / amax)
    }
}

impl AxisProfile {
    fn stationary(at: f64, duration: f64) -> Self {
        Self {
            start: at,
            end: at,
            accel: 0.0,
            peak_velocity: 0.0,
            t_acc: 0.0,
            duration,
        }
    }

    /// Fastest profile under the bounds.
    pub fn fastest(start: f64, end: f64, vmax: f64, amax: f64) -> Self {
        let d = (end - start).abs();
        let duration = min_duration(d, vmax, amax);
        if d == 0.0 {
            return Self::stationary(start, 0.0);
        }
        let peak = if d >= vmax * vmax / amax {
            vmax
        } else {
            libm::sqrt(d * amax)
        };
        Self {
            start,
            end,
            accel: amax,
            peak_velocity: peak,
            t_acc: peak / amax,
            duration,
        }
    }

    /// Stretched to last exactly `duration` (at least the minimum time),
    /// keeping the acceleration and lowering the cruise speed.
    pub fn stretched(start: f64, end: f64, vmax: f64, amax: f64, duration: f64) -> Self {
        let fastest = Self::fastest(start, end, vmax, amax);
        if fastest.duration >= duration {
            return fastest;
        }
        let d = (end - start).abs();
        if d == 0.0 {
            return Self::stationary(start, duration);
        }
        let disc = (amax * amax * duration * duration - 4.0 * amax * d).max(0.0);
        let peak = (0.5 * (amax * duration - libm::sqrt(disc))).min(vmax);
        Self {
            start,
            end,
            accel: amax,
            peak_velocity: peak,
            t_acc: peak / amax,
            duration,
        }
    }

    /// Position and velocity at `t` seconds into the profile.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        if t <= 0.0 {
            return (self.start, 0.0);
        }
        if t >= self.duration || self.start == self.end {
            return (self.end, 0.0);
        }
        let s = if self.end >= self.start { 1.0 } else { -1.0 };
        let a = self.accel;
        if t < self.t_acc {
            (self.start + s * 0.5 * a * t * t, s * a * t)
        } else if t <= self.duration - self.t_acc {
            let p = 0.5 * a * self.t_acc * self.t_acc + self.peak_velocity * (t - self.t_acc);
            (self.start + s * p, s * self.peak_velocity)
        } else {
            let tau = self.duration - t;
            (self.end - s * 0.5 * a * tau * tau, s * a * tau)
        }
    }
}

/// All five actuators moving together over one time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub duration: f64,
    pub axes: [AxisProfile; JOINT_COUNT],
}

/// A time-parameterized joint-space path, immutable once planned.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    start: JointVector,
    goal: JointVector,
    segments: Vec<Segment>,
    duration: f64,
    gripper: GripperConfig,
}

impl Trajectory {
    /// A zero-length trajectory resting at `q`.
    pub fn hold(q: JointVector, d: &RobotDescription) -> Self {
        Self {
            start: q,
            goal: q,
            segments: Vec::new(),
            duration: 0.0,
            gripper: d.gripper.clone(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn start(&self) -> JointVector {
        self.start
    }

    pub fn goal(&self) -> JointVector {
        self.goal
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Appends `next`, which must start where this one ends.
    pub fn append(&mut self, next: Trajectory) {
        for mut seg in next.segments {
            seg.t0 += self.duration;
            self.segments.push(seg);
        }
        self.duration += next.duration;
        self.goal = next.goal;
    }

    /// Configuration and actuator velocities (rad/s) at `time`, clamped to
    /// `[0, duration]`. The endpoints are returned exactly.
    pub fn sample(&self, time: f64) -> (JointVector, [f64; JOINT_COUNT]) {
        if time <= 0.0 || self.segments.is_empty() {
            return (
                if time <= 0.0 { self.start } else { self.goal },
                [0.0; JOINT_COUNT],
            );
        }
        if time >= self.duration {
            return (self.goal, [0.0; JOINT_COUNT]);
        }
        let idx = self
            .segments
            .partition_point(|s| s.t0 + s.duration <= time)
            .min(self.segments.len() - 1);
        let seg = &self.segments[idx];
        let mut angles = [0.0; JOINT_COUNT];
        let mut rates = [0.0; JOINT_COUNT];
        for (i, axis) in seg.axes.iter().enumerate() {
            (angles[i], rates[i]) = axis.eval(time - seg.t0);
        }
        let mut q = [0.0; ARM_JOINTS];
        q.copy_from_slice(&angles[..ARM_JOINTS]);
        let w = gripper_width_for_angle(angles[GRIPPER_JOINT], &self.gripper).value;
        (JointVector::new(q, w), rates)
    }
}

/// Free-function form of [`Trajectory::sample`].
pub fn sample(t: &Trajectory, time: f64) -> (JointVector, [f64; JOINT_COUNT]) {
    t.sample(time.max(0.0))
}

fn joint_segment(
    from: &[f64; JOINT_COUNT],
    to: &[f64; JOINT_COUNT],
    d: &RobotDescription,
    speed_scale: f64,
) -> Option<Segment> {
    let bounds: Vec<(f64, f64)> = d
        .joints
        .iter()
        .map(|j| {
            (
                j.vmax_rad_s * speed_scale,
                j.amax_rad_s2 * speed_scale * speed_scale,
            )
        })
        .collect();
    let duration = (0..JOINT_COUNT)
        .map(|i| min_duration(to[i] - from[i], bounds[i].0, bounds[i].1))
        .fold(0.0, f64::max);
    if duration == 0.0 {
        return None;
    }
    let axes = core::array::from_fn(|i| {
        AxisProfile::stretched(from[i], to[i], bounds[i].0, bounds[i].1, duration)
    });
    Some(Segment {
        t0: 0.0,
        duration,
        axes,
    })
}

/// Point-to-point move: every axis gets a trapezoidal profile and all are
/// stretched to the slowest axis's time so they start and stop together.
pub fn plan_joint_move(
    from: &JointVector,
    to: &JointVector,
    d: &RobotDescription,
) -> Result<Trajectory, MotionError> {
    plan_joint_move_scaled(from, to, d, 1.0)
}

/// [`plan_joint_move`] with velocity bounds scaled by `speed_scale` and
/// acceleration bounds by its square.
pub fn plan_joint_move_scaled(
    from: &JointVector,
    to: &JointVector,
    d: &RobotDescription,
    speed_scale: f64,
) -> Result<Trajectory, MotionError> {
    if !(speed_scale > 0.0 && speed_scale <= 1.0) {
        return Err(MotionError::InvalidSpeedScale);
    }
    let mut report = check_limits(from, d);
    report.violations.extend(check_limits(to, d).violations);
    if !report.is_empty() {
        return Err(MotionError::LimitViolation(report));
    }
    let a = actuator_angles(from, d);
    let b = actuator_angles(to, d);
    let mut t = Trajectory::hold(*from, d);
    if let Some(seg) = joint_segment(&a, &b, d, speed_scale) {
        t.duration = seg.duration;
        t.segments.push(seg);
    }
    t.goal = *to;
    Ok(t)
}

fn lerp_pose(a: &ToolPose, b: &ToolPose, s: f64) -> ToolPose {
    ToolPose {
        x: a.x + s * (b.x - a.x),
        y: a.y + s * (b.y - a.y),
        z: a.z + s * (b.z - a.z),
        pitch: normalize_angle(a.pitch + s * normalize_angle(b.pitch - a.pitch)),
    }
}

/// Poses along a straight line, `step` meters apart at most, endpoints included.
pub fn line_samples(from: &ToolPose, to: &ToolPose, step: f64) -> Vec<ToolPose> {
    let dist = from.position_distance(to);
    let n = if dist == 0.0 && from.pitch == to.pitch {
        0
    } else {
        (libm::ceil(dist / step) as usize).max(1)
    };
    (0..=n)
        .map(|i| {
            if i == n {
                *to
            } else {
                lerp_pose(from, to, i as f64 / n as f64)
            }
        })
        .collect()
}

/// Straight tool-tip line from `from` to `to` (pitch blended linearly),
/// sampled every `step` meters, each sample solved analytically on the
/// line start's branch and joined with synchronized joint moves.
pub fn plan_cartesian_line(
    from: &ToolPose,
    to: &ToolPose,
    gripper_width: f64,
    d: &RobotDescription,
    step: f64,
) -> Result<Trajectory, MotionError> {
    plan_cartesian_line_scaled(from, to, gripper_width, d, step, Branch::default(), 1.0)
}

pub fn plan_cartesian_line_scaled(
    from: &ToolPose,
    to: &ToolPose,
    gripper_width: f64,
    d: &RobotDescription,
    step: f64,
    prefer: Branch,
    speed_scale: f64,
) -> Result<Trajectory, MotionError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(MotionError::InvalidStep);
    }
    if !(speed_scale > 0.0 && speed_scale <= 1.0) {
        return Err(MotionError::InvalidSpeedScale);
    }
    let poses = line_samples(from, to, step);
    let mut configs: Vec<JointVector> = Vec::with_capacity(poses.len());
    let mut reference: Option<(Branch, bool)> = None;
    for (index, pose) in poses.iter().enumerate() {
        let want = reference.map_or(prefer, |r| r.0);
        let sol = match inverse_analytic(pose, d, want) {
            Ok(s) => s,
            Err(IkError::Unreachable | IkError::LimitViolation { .. } | IkError::NonFinite) => {
                return Err(MotionError::Unreachable { index, pose: *pose })
            }
            Err(IkError::NotConverged { .. }) => unreachable!("analytic solver"),
        };
        match reference {
            None => reference = Some((sol.branch, sol.over_shoulder)),
            Some(r) if r != (sol.branch, sol.over_shoulder) => {
                return Err(MotionError::BranchFlip { index })
            }
            Some(_) => {}
        }
        configs.push(sol.joints(gripper_width));
    }
    let report = check_limits(&configs[0], d);
    if !report.is_empty() {
        return Err(MotionError::LimitViolation(report));
    }
    let mut t = Trajectory::hold(configs[0], d);
    for pair in configs.windows(2) {
        t.append(plan_joint_move_scaled(&pair[0], &pair[1], d, speed_scale)?);
    }
    Ok(t)
}

/// Distance from `p` to the segment `a`–`b`.
pub fn distance_to_segment(p: &ToolPose, a: &ToolPose, b: &ToolPose) -> f64 {
    let ab = [b.x - a.x, b.y - a.y, b.z - a.z];
    let ap = [p.x - a.x, p.y - a.y, p.z - a.z];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let s = if len2 == 0.0 {
        0.0
    } else {
        (ab.iter().zip(&ap).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0)
    };
    let closest = ToolPose::new(a.x + s * ab[0], a.y + s * ab[1], a.z + s * ab[2], 0.0);
    closest.position_distance(&ToolPose::new(p.x, p.y, p.z, 0.0))
}

/// Tool pose of a sampled configuration.
pub fn pose_at(t: &Trajectory, time: f64, d: &RobotDescription) -> ToolPose {
    forward_arm(&t.sample(time).0.q, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;

    fn one_joint_description(vmax_deg: f64, amax_deg: f64) -> RobotDescription {
        let mut d = RobotDescription::default();
        for j in &mut d.joints {
            j.vmax_rad_s = vmax_deg.to_radians();
            j.amax_rad_s2 = amax_deg.to_radians();
        }
        d
    }

    #[test]
    fn null_move_is_empty() {
        let d = RobotDescription::default();
        let q = JointVector::new([0.1, 0.2, 0.3, 0.4], 0.01);
        let t = plan_joint_move(&q, &q, &d).unwrap();
        assert_eq!(t.duration(), 0.0);
        assert!(t.is_empty());
        assert_eq!(t.sample(1.0).0, q);
    }

    #[test]
    fn trapezoid_example() {
        let d = one_joint_description(45.0, 90.0);
        let from = JointVector::default();
        let to = JointVector::new([90f64.to_radians(), 0.0, 0.0, 0.0], 0.0);
        let t = plan_joint_move(&from, &to, &d).unwrap();
        assert_eq!(t.duration(), 2.5);
        let axis = t.segments()[0].axes[0];
        assert_eq!(axis.t_acc, 0.5);
        assert_eq!(axis.peak_velocity, 45f64.to_radians());
    }

    #[test]
    fn triangle_example() {
        let d = one_joint_description(45.0, 90.0);
        let to = JointVector::new([10f64.to_radians(), 0.0, 0.0, 0.0], 0.0);
        let t = plan_joint_move(&JointVector::default(), &to, &d).unwrap();
        let expected = 2.0 * libm::sqrt(10.0 / 90.0);
        assert!((t.duration() - expected).abs() < 1e-12);
        let peak = t.segments()[0].axes[0].peak_velocity.to_degrees();
        assert!((peak - 30.0).abs() < 1e-9);
    }

    #[test]
    fn limits_rejected_with_joint_list() {
        let d = RobotDescription::default();
        let bad = JointVector::new([0.0, 2.0, 0.0, 0.0], 0.5);
        match plan_joint_move(&JointVector::default(), &bad, &d) {
            Err(MotionError::LimitViolation(r)) => {
                assert_eq!(r.joints().collect::<Vec<_>>(), [1, 4]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn joints_finish_together() {
        let d = RobotDescription::default();
        let to = JointVector::new([1.0, 0.2, -0.5, 0.05], 0.03);
        let t = plan_joint_move(&JointVector::default(), &to, &d).unwrap();
        let seg = &t.segments()[0];
        for a in &seg.axes {
            assert_eq!(a.duration, seg.duration);
        }
        let (q, v) = t.sample(t.duration());
        assert_eq!(q, to);
        assert_eq!(v, [0.0; 5]);
    }

    #[test]
    fn line_example_has_ten_steps() {
        let d = RobotDescription::default();
        let a = ToolPose::new(0.30, 0.0, 0.10, FRAC_PI_2);
        let b = ToolPose::new(0.20, 0.0, 0.10, FRAC_PI_2);
        let t = plan_cartesian_line(&a, &b, 0.0, &d, 0.01).unwrap();
        assert_eq!(t.segments().len(), 10);
        for pose in line_samples(&a, &b, 0.01) {
            let s = inverse_analytic(&pose, &d, Branch::ElbowUp).unwrap();
            assert_eq!(s.branch, Branch::ElbowUp);
            assert!(s.residual < 1e-9);
        }
    }

    #[test]
    fn line_leaving_envelope_fails_at_first_exterior_sample() {
        let d = RobotDescription::default();
        let a = ToolPose::new(0.245, 0.0, 0.10, FRAC_PI_2);
        let b = ToolPose::new(0.345, 0.0, 0.10, FRAC_PI_2);
        match plan_cartesian_line(&a, &b, 0.0, &d, 0.01) {
            // samples at 0.245, 0.255, ... the first beyond 0.30 is index 6
            Err(MotionError::Unreachable { index, pose }) => {
                assert_eq!(index, 6);
                assert!(pose.x > 0.30);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_line_endpoints() {
        let d = RobotDescription::default();
        let a = ToolPose::new(0.2, 0.05, 0.15, 1.2);
        let t = plan_cartesian_line(&a, &a, 0.0, &d, 0.005).unwrap();
        assert_eq!(t.duration(), 0.0);
    }

    #[test]
    fn bad_step() {
        let d = RobotDescription::default();
        let a = ToolPose::new(0.2, 0.05, 0.15, 1.2);
        assert_eq!(
            plan_cartesian_line(&a, &a, 0.0, &d, 0.0).unwrap_err(),
            MotionError::InvalidStep
        );
    }
}
