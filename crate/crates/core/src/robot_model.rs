//! Robot description: geometry, joint calibration, limits and bus settings.
//!
//! The zero configuration points the arm straight up: every pitch angle 0,
//! tool tip at `h0 + a2 + a3 + a4` above the table.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, TAU};

use thiserror::Error;

/// Current description schema version.
pub const SCHEMA_VERSION: u32 = 1;
/// Positional joints: base yaw, shoulder, elbow, wrist.
pub const ARM_JOINTS: usize = 4;
/// Actuators on the bus: the arm joints plus the gripper motor.
pub const JOINT_COUNT: usize = 5;
/// Index of the gripper actuator in [`RobotDescription::joints`].
pub const GRIPPER_JOINT: usize = 4;

const REACH_TOLERANCE: f64 = 1e-12;
/// Slack allowed on joint limits so poses exactly on a limit survive
/// floating-point round-off.
pub const LIMIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("non-positive link length: {0}")]
    NonPositiveLength(&'static str),
    #[error("horizontal_reach {declared} does not equal a2 + a3 + a4 = {sum}")]
    ReachMismatch { declared: f64, sum: f64 },
    #[error("expected exactly {JOINT_COUNT} joints, found {0}")]
    JointCount(usize),
    #[error("duplicate motor id {0}")]
    DuplicateMotorId(u8),
    #[error("motor id {0} outside 1..=253")]
    MotorIdRange(u8),
    #[error("joint {joint}: ticks_per_rev must be positive")]
    TicksPerRev { joint: usize },
    #[error("joint {joint}: center_ticks {center} outside [0, {ticks_per_rev})")]
    CenterTicks {
        joint: usize,
        center: u32,
        ticks_per_rev: u32,
    },
    #[error("joint {joint}: limit_min_rad must be below limit_max_rad")]
    LimitOrder { joint: usize },
    #[error("joint {joint}: vmax and amax must be positive")]
    MotionBounds { joint: usize },
    #[error("gripper: width_open_m must exceed width_closed_m >= 0")]
    GripperWidths,
    #[error("gripper: angle_open_rad must differ from angle_closed_rad")]
    GripperAngles,
    #[error("gripper: actuator angle range outside joint {GRIPPER_JOINT} limits")]
    GripperOutsideLimits,
    #[error("bus: baud rate and loop rate must be positive")]
    Bus,
    #[error("non-finite value in field {0}")]
    NonFinite(&'static str),
}

/// Mounting direction of a servo relative to the joint angle convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(try_from = "i8", into = "i8")
)]
pub enum Direction {
    Forward,
    Reversed,
}

impl Direction {
    pub fn factor(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Reversed => -1.0,
        }
    }
}

impl TryFrom<i8> for Direction {
    type Error = &'static str;

    fn try_from(v: i8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Direction::Forward),
            -1 => Ok(Direction::Reversed),
            _ => Err("sign must be 1 or -1"),
        }
    }
}

impl From<Direction> for i8 {
    fn from(d: Direction) -> i8 {
        match d {
            Direction::Forward => 1,
            Direction::Reversed => -1,
        }
    }
}

/// Calibration and limits of one servo-driven joint.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(deny_unknown_fields)
)]
pub struct JointConfig {
    #[cfg_attr(feature = "serde", serde(default))]
    pub name: String,
    pub motor_id: u8,
    pub ticks_per_rev: u32,
    /// Tick value at joint angle 0.
    pub center_ticks: u32,
    pub sign: Direction,
    pub limit_min_rad: f64,
    pub limit_max_rad: f64,
    pub vmax_rad_s: f64,
    pub amax_rad_s2: f64,
}

impl JointConfig {
    pub fn ticks_to_angle(&self, ticks: i32) -> f64 {
        ticks_to_angle(ticks, self)
    }

    pub fn angle_to_ticks(&self, angle: f64) -> i32 {
        angle_to_ticks(angle, self)
    }

    /// Whether `angle` is within the limits, up to [`LIMIT_TOLERANCE`].
    pub fn contains(&self, angle: f64) -> bool {
        angle >= self.limit_min_rad - LIMIT_TOLERANCE
            && angle <= self.limit_max_rad + LIMIT_TOLERANCE
    }

    pub fn clamp(&self, angle: f64) -> f64 {
        angle.clamp(self.limit_min_rad, self.limit_max_rad)
    }
}

/// Servo ticks to joint radians. Out-of-range ticks map linearly.
pub fn ticks_to_angle(ticks: i32, jc: &JointConfig) -> f64 {
    let offset = f64::from(ticks) - f64::from(jc.center_ticks);
    jc.sign.factor() * offset * TAU / f64::from(jc.ticks_per_rev)
}

/// Joint radians to the nearest servo tick, rounding half away from zero.
pub fn angle_to_ticks(angle: f64, jc: &JointConfig) -> i32 {
    let offset = jc.sign.factor() * angle * f64::from(jc.ticks_per_rev) / TAU;
    let ticks = libm::round(offset) + f64::from(jc.center_ticks);
    ticks as i32
}

/// Two-point calibration of the parallel gripper: jaw separation against
/// actuator angle. Values in between are linear.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(deny_unknown_fields)
)]
pub struct GripperConfig {
    pub width_closed_m: f64,
    pub width_open_m: f64,
    pub angle_closed_rad: f64,
    pub angle_open_rad: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(deny_unknown_fields)
)]
pub struct BusConfig {
    pub baud: u32,
    pub loop_rate_hz: f64,
}

impl Default for BusConfig {
    fn default() -> Self {
        Self {
            baud: 57_600,
            loop_rate_hz: 50.0,
        }
    }
}

/// Values carried along for documentation; none of them enter the kinematics.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(deny_unknown_fields)
)]
pub struct Metadata {
    /// Size of the hollow cylindrical base, meters.
    #[cfg_attr(feature = "serde", serde(default))]
    pub base_cylinder_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(deny_unknown_fields)
)]
pub struct RobotDescription {
    pub schema_version: u32,
    #[cfg_attr(feature = "serde", serde(default))]
    pub name: String,
    /// Shoulder axis height above the table, meters.
    pub h0: f64,
    /// Shoulder to elbow.
    pub a2: f64,
    /// Elbow to wrist.
    pub a3: f64,
    /// Wrist to tool tip (gripper jaw midpoint).
    pub a4: f64,
    /// Declared horizontal reach; must equal `a2 + a3 + a4`.
    pub horizontal_reach: f64,
    /// Base yaw, shoulder, elbow, wrist, gripper, in bus order.
    pub joints: Vec<JointConfig>,
    pub gripper: GripperConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub bus: BusConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub metadata: Metadata,
}

fn arm_joint(name: &str, motor_id: u8, limit: f64) -> JointConfig {
    JointConfig {
        name: name.to_string(),
        motor_id,
        ticks_per_rev: 4096,
        center_ticks: 2048,
        sign: Direction::Forward,
        limit_min_rad: -limit,
        limit_max_rad: limit,
        vmax_rad_s: 2.0,
        amax_rad_s2: 4.0,
    }
}

impl Default for RobotDescription {
    /// The shipped desk arm: 30 cm horizontal reach and 40 cm tool height
    /// at the straight-up pose, XL430-class servos on IDs 1 to 5.
    fn default() -> Self {
        let mut gripper_joint = arm_joint("gripper", 5, 0.0);
        gripper_joint.limit_min_rad = -0.1;
        gripper_joint.limit_max_rad = 1.3;
        gripper_joint.vmax_rad_s = 3.0;
        gripper_joint.amax_rad_s2 = 8.0;
        Self {
            schema_version: SCHEMA_VERSION,
            name: "desk-arm".to_string(),
            h0: 0.10,
            a2: 0.12,
            a3: 0.12,
            a4: 0.06,
            horizontal_reach: 0.30,
            joints: vec![
                // just inside ±π so the limits map onto distinct ticks
                #[allow(clippy::approx_constant)]
                arm_joint("base_yaw", 1, 3.14),
                arm_joint("shoulder", 2, FRAC_PI_2),
                arm_joint("elbow", 3, 2.5),
                arm_joint("wrist", 4, 2.0),
                gripper_joint,
            ],
            gripper: GripperConfig {
                width_closed_m: 0.0,
                width_open_m: 0.06,
                angle_closed_rad: 0.0,
                angle_open_rad: 1.2,
            },
            bus: BusConfig::default(),
            metadata: Metadata {
                base_cylinder_m: Some(0.09),
            },
        }
    }
}

impl RobotDescription {
    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ValidationError::SchemaVersion(self.schema_version));
        }
        for (field, v) in [
            ("h0", self.h0),
            ("a2", self.a2),
            ("a3", self.a3),
            ("a4", self.a4),
            ("horizontal_reach", self.horizontal_reach),
        ] {
            if !v.is_finite() {
                return Err(ValidationError::NonFinite(field));
            }
        }
        for (field, v) in [
            ("h0", self.h0),
            ("a2", self.a2),
            ("a3", self.a3),
            ("a4", self.a4),
        ] {
            if v <= 0.0 {
                return Err(ValidationError::NonPositiveLength(field));
            }
        }
        let sum = self.a2 + self.a3 + self.a4;
        if (sum - self.horizontal_reach).abs() > REACH_TOLERANCE {
            return Err(ValidationError::ReachMismatch {
                declared: self.horizontal_reach,
                sum,
            });
        }

        if self.joints.len() != JOINT_COUNT {
            return Err(ValidationError::JointCount(self.joints.len()));
        }
        let mut seen = [false; 256];
        for (i, j) in self.joints.iter().enumerate() {
            if !(1..=253).contains(&j.motor_id) {
                return Err(ValidationError::MotorIdRange(j.motor_id));
            }
            if seen[usize::from(j.motor_id)] {
                return Err(ValidationError::DuplicateMotorId(j.motor_id));
            }
            seen[usize::from(j.motor_id)] = true;
            if j.ticks_per_rev == 0 {
                return Err(ValidationError::TicksPerRev { joint: i });
            }
            if j.center_ticks >= j.ticks_per_rev {
                return Err(ValidationError::CenterTicks {
                    joint: i,
                    center: j.center_ticks,
                    ticks_per_rev: j.ticks_per_rev,
                });
            }
            for (field, v) in [
                ("limit_min_rad", j.limit_min_rad),
                ("limit_max_rad", j.limit_max_rad),
                ("vmax_rad_s", j.vmax_rad_s),
                ("amax_rad_s2", j.amax_rad_s2),
            ] {
                if !v.is_finite() {
                    return Err(ValidationError::NonFinite(field));
                }
            }
            if j.limit_min_rad >= j.limit_max_rad {
                return Err(ValidationError::LimitOrder { joint: i });
            }
            if j.vmax_rad_s <= 0.0 || j.amax_rad_s2 <= 0.0 {
                return Err(ValidationError::MotionBounds { joint: i });
            }
        }

        let g = &self.gripper;
        for (field, v) in [
            ("width_closed_m", g.width_closed_m),
            ("width_open_m", g.width_open_m),
            ("angle_closed_rad", g.angle_closed_rad),
            ("angle_open_rad", g.angle_open_rad),
        ] {
            if !v.is_finite() {
                return Err(ValidationError::NonFinite(field));
            }
        }
        if !(g.width_closed_m >= 0.0 && g.width_open_m > g.width_closed_m) {
            return Err(ValidationError::GripperWidths);
        }
        if g.angle_open_rad == g.angle_closed_rad {
            return Err(ValidationError::GripperAngles);
        }
        let gj = &self.joints[GRIPPER_JOINT];
        if !(gj.contains(g.angle_open_rad) && gj.contains(g.angle_closed_rad)) {
            return Err(ValidationError::GripperOutsideLimits);
        }

        if self.bus.baud == 0 || !(self.bus.loop_rate_hz > 0.0 && self.bus.loop_rate_hz.is_finite())
        {
            return Err(ValidationError::Bus);
        }
        Ok(())
    }

    pub fn motor_ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.joints.iter().map(|j| j.motor_id)
    }

    /// Maximum tool-tip height: the straight-up pose.
    pub fn vertical_reach(&self) -> f64 {
        self.h0 + self.a2 + self.a3 + self.a4
    }

    /// Same robot with every length (including the shoulder height) multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut d = self.clone();
        d.h0 *= k;
        d.a2 *= k;
        d.a3 *= k;
        d.a4 *= k;
        d.horizontal_reach = d.a2 + d.a3 + d.a4;
        d
    }
}

/// Configuration-space state: four arm angles plus gripper jaw width.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct JointVector {
    /// Base yaw, shoulder pitch, elbow pitch, wrist pitch (radians).
    pub q: [f64; ARM_JOINTS],
    /// Gripper jaw separation, meters.
    pub w: f64,
}

impl JointVector {
    pub const fn new(q: [f64; ARM_JOINTS], w: f64) -> Self {
        Self { q, w }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|v| v.is_finite()) && self.w.is_finite()
    }

    pub fn with_arm(mut self, q: [f64; ARM_JOINTS]) -> Self {
        self.q = q;
        self
    }
}
