//! JSON messages exchanged with teleoperation clients, version 1.
//!
//! Every message carries `"v": 1`. Clients send commands tagged by
//! `"type"`; the service answers each with an ack and streams state
//! messages at the loop rate. The same contract is written down in
//! `schema/teleop_v1.json`.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use armstack_core::kinematics::ToolPose;

pub const WIRE_VERSION: u32 = 1;

/// Wire error codes. Their spellings are part of the contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedJson,
    UnknownType,
    InvalidArgument,
    Unreachable,
    LimitViolation,
    Busy,
    Preempted,
    Fault,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::MalformedJson => "malformed_json",
            ErrorCode::UnknownType => "unknown_type",
            ErrorCode::InvalidArgument => "invalid_argument",
            ErrorCode::Unreachable => "unreachable",
            ErrorCode::LimitViolation => "limit_violation",
            ErrorCode::Busy => "busy",
            ErrorCode::Preempted => "preempted",
            ErrorCode::Fault => "fault",
        }
    }
}

/// A rejected command: code plus a human-readable reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub code: ErrorCode,
    pub message: String,
}

impl Rejection {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    /// Relative move of one actuator, joints numbered 1..=5 base to gripper.
    Jog {
        joint: u8,
        delta_ticks: i32,
    },
    GotoJoints {
        q: [f64; 4],
        w: Option<f64>,
    },
    GotoPose {
        pose: ToolPose,
        w: Option<f64>,
    },
    /// Straight tool-tip line from the current pose.
    MoveLine {
        pose: ToolPose,
        w: Option<f64>,
        step: Option<f64>,
    },
    Gripper {
        width_m: f64,
    },
    Home,
    Stop,
    SetSpeedScale {
        s: f64,
    },
}

impl Command {
    pub fn type_name(&self) -> &'static str {
        match self {
            Command::Jog { .. } => "jog",
            Command::GotoJoints { .. } => "goto_joints",
            Command::GotoPose { .. } => "goto_pose",
            Command::MoveLine { .. } => "move_line",
            Command::Gripper { .. } => "gripper",
            Command::Home => "home",
            Command::Stop => "stop",
            Command::SetSpeedScale { .. } => "set_speed_scale",
        }
    }

    /// The wire form of this command.
    pub fn to_json(&self) -> Value {
        let mut v = match self {
            Command::Jog { joint, delta_ticks } => {
                serde_json::json!({ "joint": joint, "delta_ticks": delta_ticks })
            }
            Command::GotoJoints { q, w } => serde_json::json!({ "q": q, "w": w }),
            Command::GotoPose { pose, w } => pose_json(pose, *w, None),
            Command::MoveLine { pose, w, step } => pose_json(pose, *w, *step),
            Command::Gripper { width_m } => serde_json::json!({ "width_m": width_m }),
            Command::Home | Command::Stop => serde_json::json!({}),
            Command::SetSpeedScale { s } => serde_json::json!({ "s": s }),
        };
        let obj = v.as_object_mut().expect("object");
        obj.retain(|_, v| !v.is_null());
        obj.insert("v".into(), WIRE_VERSION.into());
        obj.insert("type".into(), self.type_name().into());
        v
    }
}

fn pose_json(p: &ToolPose, w: Option<f64>, step: Option<f64>) -> Value {
    serde_json::json!({
        "x": p.x, "y": p.y, "z": p.z, "pitch": p.pitch, "w": w, "step": step,
    })
}

/// A parsed request: the command plus the client's optional correlation id.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub command: Command,
    pub id: Option<Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JogArgs {
    joint: u8,
    delta_ticks: i32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JointsArgs {
    q: [f64; 4],
    w: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseArgs {
    x: f64,
    y: f64,
    z: f64,
    pitch: f64,
    w: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LineArgs {
    x: f64,
    y: f64,
    z: f64,
    pitch: f64,
    w: Option<f64>,
    step: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GripperArgs {
    width_m: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeedArgs {
    s: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoArgs {}

fn args<T: DeserializeOwned>(rest: Map<String, Value>) -> Result<T, Rejection> {
    serde_json::from_value(Value::Object(rest))
        .map_err(|e| Rejection::new(ErrorCode::InvalidArgument, e.to_string()))
}

fn finite(values: &[f64]) -> Result<(), Rejection> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Rejection::new(
            ErrorCode::InvalidArgument,
            "non-finite number",
        ))
    }
}

/// Parses one client message. The correlation id is returned even when the
/// command itself is rejected, so the ack can echo it.
pub fn parse_request(text: &str) -> Result<Request, (Rejection, Option<Value>)> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        (
            Rejection::new(ErrorCode::MalformedJson, e.to_string()),
            None,
        )
    })?;
    let Value::Object(mut obj) = value else {
        return Err((
            Rejection::new(ErrorCode::MalformedJson, "message is not an object"),
            None,
        ));
    };
    let id = obj.remove("id");
    parse_object(obj)
        .map(|command| Request {
            command,
            id: id.clone(),
        })
        .map_err(|r| (r, id))
}

fn parse_object(mut obj: Map<String, Value>) -> Result<Command, Rejection> {
    match obj.remove("v") {
        None => {}
        Some(v) if v == WIRE_VERSION => {}
        Some(v) => {
            return Err(Rejection::new(
                ErrorCode::InvalidArgument,
                format!("unsupported version {v}"),
            ))
        }
    }
    let kind = match obj.remove("type") {
        Some(Value::String(s)) => s,
        Some(_) => {
            return Err(Rejection::new(
                ErrorCode::UnknownType,
                "type must be a string",
            ))
        }
        None => return Err(Rejection::new(ErrorCode::UnknownType, "missing type")),
    };
    let command = match kind.as_str() {
        "jog" => {
            let a: JogArgs = args(obj)?;
            if !(1..=5).contains(&a.joint) {
                return Err(Rejection::new(
                    ErrorCode::InvalidArgument,
                    format!("joint {} outside 1..=5", a.joint),
                ));
            }
            Command::Jog {
                joint: a.joint,
                delta_ticks: a.delta_ticks,
            }
        }
        "goto_joints" => {
            let a: JointsArgs = args(obj)?;
            finite(&a.q)?;
            finite(a.w.as_slice())?;
            Command::GotoJoints { q: a.q, w: a.w }
        }
        "goto_pose" => {
            let a: PoseArgs = args(obj)?;
            finite(&[a.x, a.y, a.z, a.pitch])?;
            finite(a.w.as_slice())?;
            Command::GotoPose {
                pose: ToolPose::new(a.x, a.y, a.z, a.pitch),
                w: a.w,
            }
        }
        "move_line" => {
            let a: LineArgs = args(obj)?;
            finite(&[a.x, a.y, a.z, a.pitch])?;
            finite(a.w.as_slice())?;
            if let Some(step) = a.step {
                if !(step > 0.0 && step.is_finite()) {
                    return Err(Rejection::new(
                        ErrorCode::InvalidArgument,
                        "step must be > 0",
                    ));
                }
            }
            Command::MoveLine {
                pose: ToolPose::new(a.x, a.y, a.z, a.pitch),
                w: a.w,
                step: a.step,
            }
        }
        "gripper" => {
            let a: GripperArgs = args(obj)?;
            finite(&[a.width_m])?;
            Command::Gripper { width_m: a.width_m }
        }
        "home" => {
            args::<NoArgs>(obj)?;
            Command::Home
        }
        "stop" => {
            args::<NoArgs>(obj)?;
            Command::Stop
        }
        "set_speed_scale" => {
            let a: SpeedArgs = args(obj)?;
            if !(a.s > 0.0 && a.s <= 1.0) {
                return Err(Rejection::new(
                    ErrorCode::InvalidArgument,
                    "speed scale must be in (0, 1]",
                ));
            }
            Command::SetSpeedScale { s: a.s }
        }
        other => {
            return Err(Rejection::new(
                ErrorCode::UnknownType,
                format!("unknown command type {other:?}"),
            ))
        }
    };
    Ok(command)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    Jog,
    Trajectory,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub pitch: f64,
}

impl From<ToolPose> for Pose {
    fn from(p: ToolPose) -> Self {
        Self {
            x: p.x,
            y: p.y,
            z: p.z,
            pitch: p.pitch,
        }
    }
}

impl From<Pose> for ToolPose {
    fn from(p: Pose) -> Self {
        ToolPose::new(p.x, p.y, p.z, p.pitch)
    }
}

/// One snapshot of the arm as read back from the servos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub v: u32,
    /// Strictly increasing per published state.
    pub seq: u64,
    /// Milliseconds of control-loop time since start.
    pub t: u64,
    /// Present positions, motor order base to gripper.
    pub ticks: [i32; 5],
    pub q: [f64; 4],
    /// Gripper jaw width, m.
    pub w: f64,
    pub pose: Pose,
    pub moving: [bool; 5],
    pub mode: Mode,
    /// Seq of the last command the control loop applied.
    pub cmd_seq: u64,
    pub speed_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub v: u32,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<ErrorCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
}

impl Ack {
    pub fn accepted(seq: u64) -> Self {
        Self {
            v: WIRE_VERSION,
            ok: true,
            seq: Some(seq),
            code: None,
            message: None,
            id: None,
        }
    }

    pub fn rejected(r: Rejection) -> Self {
        Self {
            v: WIRE_VERSION,
            ok: false,
            seq: None,
            code: Some(r.code),
            message: Some(r.message),
            id: None,
        }
    }

    pub fn with_id(mut self, id: Option<Value>) -> Self {
        self.id = id;
        self
    }
}

/// Anything the service sends, tagged by `"kind"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Ack(Ack),
    State(RobotState),
}

impl ServerMessage {
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(text: &str) -> ErrorCode {
        parse_request(text).unwrap_err().0.code
    }

    #[test]
    fn jog_happy_path() {
        let r = parse_request(r#"{"type":"jog","joint":1,"delta_ticks":20}"#).unwrap();
        assert_eq!(
            r.command,
            Command::Jog {
                joint: 1,
                delta_ticks: 20
            }
        );
    }

    #[test]
    fn error_codes_are_distinct() {
        assert_eq!(code("{"), ErrorCode::MalformedJson);
        assert_eq!(code("[1]"), ErrorCode::MalformedJson);
        assert_eq!(code(r#"{"type":"dance"}"#), ErrorCode::UnknownType);
        assert_eq!(code(r#"{"joint":1}"#), ErrorCode::UnknownType);
        assert_eq!(
            code(r#"{"type":"jog","joint":6,"delta_ticks":1}"#),
            ErrorCode::InvalidArgument
        );
        assert_eq!(
            code(r#"{"type":"jog","joint":1,"delta_ticks":1.5}"#),
            ErrorCode::InvalidArgument
        );
        assert_eq!(
            code(r#"{"type":"home","extra":1}"#),
            ErrorCode::InvalidArgument
        );
        assert_eq!(
            code(r#"{"type":"set_speed_scale","s":0}"#),
            ErrorCode::InvalidArgument
        );
        assert_eq!(code(r#"{"v":2,"type":"home"}"#), ErrorCode::InvalidArgument);
    }

    #[test]
    fn correlation_id_survives_rejection() {
        let (_, id) = parse_request(r#"{"type":"nope","id":7}"#).unwrap_err();
        assert_eq!(id, Some(Value::from(7)));
    }

    #[test]
    fn commands_round_trip_through_json() {
        let cmds = [
            Command::Jog {
                joint: 3,
                delta_ticks: -40,
            },
            Command::GotoJoints {
                q: [0.1, 0.2, 0.3, 0.4],
                w: Some(0.01),
            },
            Command::GotoPose {
                pose: ToolPose::new(0.2, 0.0, 0.1, 1.5),
                w: None,
            },
            Command::MoveLine {
                pose: ToolPose::new(0.2, 0.0, 0.1, 1.5),
                w: None,
                step: Some(0.01),
            },
            Command::Gripper { width_m: 0.02 },
            Command::Home,
            Command::Stop,
            Command::SetSpeedScale { s: 0.5 },
        ];
        for c in cmds {
            let text = c.to_json().to_string();
            assert_eq!(parse_request(&text).unwrap().command, c, "{text}");
        }
    }

    #[test]
    fn ack_shapes() {
        let ok = ServerMessage::Ack(Ack::accepted(4)).to_text();
        assert_eq!(ok, r#"{"kind":"ack","v":1,"ok":true,"seq":4}"#);
        let bad = ServerMessage::Ack(Ack::rejected(Rejection::new(ErrorCode::Unreachable, "x")));
        let v: Value = serde_json::from_str(&bad.to_text()).unwrap();
        assert_eq!(v["code"], "unreachable");
        assert_eq!(v["ok"], false);
    }
}
