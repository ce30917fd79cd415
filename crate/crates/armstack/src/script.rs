//! Motion scripts: one command per line, executed in order.
//!
//! ```text
//! # comment
//! speed 0.5                      # scale vmax by 0.5, amax by 0.25
//! move_joints q1 q2 q3 q4 [w]    # radians; optional jaw width in m
//! move_line x y z pitch [step]   # straight tool line, m / rad
//! gripper width_m
//! home
//! wait seconds
//! ```

use std::fmt;

use armstack_core::kinematics::{forward, ToolPose};
use armstack_core::robot_model::{JointVector, RobotDescription};
use armstack_core::transport::Transport;
use thiserror::Error;

use crate::controller::{home_configuration, plan_command, Controller};
use crate::wire::{Command, Mode, Rejection, RobotState};

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Command(Command),
    Wait(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptLine {
    /// 1-based line number in the source.
    pub line: usize,
    pub step: Step,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn numbers(line: usize, args: &[&str]) -> Result<Vec<f64>, ParseError> {
    args.iter()
        .map(|a| match a.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(ParseError {
                line,
                message: format!("not a number: {a:?}"),
            }),
        })
        .collect()
}

fn arity(
    line: usize,
    name: &str,
    got: usize,
    range: std::ops::RangeInclusive<usize>,
) -> Result<(), ParseError> {
    if range.contains(&got) {
        return Ok(());
    }
    let expected = if range.start() == range.end() {
        range.start().to_string()
    } else {
        format!("{} to {}", range.start(), range.end())
    };
    Err(ParseError {
        line,
        message: format!("{name} takes {expected} arguments, got {got}"),
    })
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptLine>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut words = content.split_whitespace();
        let Some(name) = words.next() else {
            continue;
        };
        let args: Vec<&str> = words.collect();
        let v = numbers(line, &args)?;
        let step = match name {
            "move_joints" => {
                arity(line, name, v.len(), 4..=5)?;
                Step::Command(Command::GotoJoints {
                    q: [v[0], v[1], v[2], v[3]],
                    w: v.get(4).copied(),
                })
            }
            "move_line" => {
                arity(line, name, v.len(), 4..=5)?;
                if v.get(4).is_some_and(|s| *s <= 0.0) {
                    return Err(ParseError {
                        line,
                        message: "step must be positive".into(),
                    });
                }
                Step::Command(Command::MoveLine {
                    pose: ToolPose::new(v[0], v[1], v[2], v[3]),
                    w: None,
                    step: v.get(4).copied(),
                })
            }
            "gripper" => {
                arity(line, name, v.len(), 1..=1)?;
                Step::Command(Command::Gripper { width_m: v[0] })
            }
            "home" => {
                arity(line, name, v.len(), 0..=0)?;
                Step::Command(Command::Home)
            }
            "speed" => {
                arity(line, name, v.len(), 1..=1)?;
                if !(v[0] > 0.0 && v[0] <= 1.0) {
                    return Err(ParseError {
                        line,
                        message: "speed must be in (0, 1]".into(),
                    });
                }
                Step::Command(Command::SetSpeedScale { s: v[0] })
            }
            "wait" => {
                arity(line, name, v.len(), 1..=1)?;
                if v[0] < 0.0 {
                    return Err(ParseError {
                        line,
                        message: "wait must not be negative".into(),
                    });
                }
                Step::Wait(v[0])
            }
            other => {
                return Err(ParseError {
                    line,
                    message: format!("unknown command {other:?}"),
                })
            }
        };
        out.push(ScriptLine { line, step });
    }
    Ok(out)
}

/// The tool pose a step is meant to end at, if it moves the arm.
pub fn target_pose(step: &Step, d: &RobotDescription) -> Option<ToolPose> {
    match step {
        Step::Command(Command::GotoJoints { q, .. }) => {
            Some(forward(&JointVector::new(*q, 0.0), d))
        }
        Step::Command(Command::MoveLine { pose, .. } | Command::GotoPose { pose, .. }) => {
            Some(*pose)
        }
        Step::Command(Command::Home) => Some(forward(&home_configuration(d), d)),
        _ => None,
    }
}

/// What happened on one script line.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LineReport {
    pub line: usize,
    pub kind: &'static str,
    /// Command seq assigned by the controller; waits have none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    /// Planned motion time, s.
    pub duration_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<crate::wire::Pose>,
    /// Pose read back once the arm settled (absent in dry runs).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reached: Option<crate::wire::Pose>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ScriptFailure {
    pub line: usize,
    pub rejection: Rejection,
}

impl fmt::Display for ScriptFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "line {}: {} ({})",
            self.line,
            self.rejection.code.as_str(),
            self.rejection.message
        )
    }
}

fn step_kind(step: &Step) -> &'static str {
    match step {
        Step::Command(c) => match c {
            Command::GotoJoints { .. } => "move_joints",
            other => other.type_name(),
        },
        Step::Wait(_) => "wait",
    }
}

/// Plans every line from `start` without touching any bus.
pub fn dry_run(
    lines: &[ScriptLine],
    d: &RobotDescription,
    start: JointVector,
) -> Result<Vec<LineReport>, ScriptFailure> {
    let mut at = start;
    let mut scale = 1.0;
    let mut out = Vec::new();
    for l in lines {
        let duration_s = match &l.step {
            Step::Wait(s) => *s,
            Step::Command(Command::SetSpeedScale { s }) => {
                scale = *s;
                0.0
            }
            Step::Command(cmd) => {
                let t = plan_command(d, &at, cmd, scale).map_err(|rejection| ScriptFailure {
                    line: l.line,
                    rejection,
                })?;
                at = t.goal();
                t.duration()
            }
        };
        out.push(LineReport {
            line: l.line,
            kind: step_kind(&l.step),
            seq: None,
            duration_s,
            target: target_pose(&l.step, d).map(Into::into),
            reached: None,
            error_m: None,
        });
    }
    Ok(out)
}

/// Executes the script on `controller`, ticking at `rate_hz` in simulated
/// time. Every published state is passed to `on_state`.
pub fn run<T: Transport>(
    controller: &mut Controller<T>,
    lines: &[ScriptLine],
    rate_hz: f64,
    mut on_state: impl FnMut(&RobotState),
    mut on_line: impl FnMut(&LineReport),
) -> Result<Vec<LineReport>, ScriptFailure> {
    let dt = 1.0 / rate_hz;
    let d = controller.description().clone();
    let mut out = Vec::new();
    for l in lines {
        let report = match &l.step {
            Step::Wait(s) => {
                let n = (s * rate_hz).ceil() as usize;
                for _ in 0..n {
                    let (_, state) = controller.control_tick(dt, Vec::new());
                    on_state(&state);
                }
                LineReport {
                    line: l.line,
                    kind: "wait",
                    seq: None,
                    duration_s: *s,
                    target: None,
                    reached: None,
                    error_m: None,
                }
            }
            Step::Command(cmd) => {
                let (acks, mut state) = controller.control_tick(dt, vec![cmd.clone()]);
                on_state(&state);
                let seq = acks
                    .into_iter()
                    .next()
                    .expect("one ack per command")
                    .map_err(|rejection| ScriptFailure {
                        line: l.line,
                        rejection,
                    })?;
                // the acknowledging tick already consumed one dt of the plan
                let duration_s = controller.remaining().map_or(0.0, |r| r + dt);
                // generous bound: planned time plus settling
                let budget = ((duration_s + 5.0) * rate_hz).ceil() as usize;
                let mut ticks = 0;
                while state.mode != Mode::Idle {
                    if state.mode == Mode::Fault || ticks > budget {
                        return Err(ScriptFailure {
                            line: l.line,
                            rejection: Rejection::new(
                                crate::wire::ErrorCode::Fault,
                                state
                                    .fault
                                    .clone()
                                    .unwrap_or_else(|| "motion did not finish".into()),
                            ),
                        });
                    }
                    (_, state) = controller.control_tick(dt, Vec::new());
                    on_state(&state);
                    ticks += 1;
                }
                let target = target_pose(&l.step, &d);
                let reached: ToolPose = state.pose.into();
                LineReport {
                    line: l.line,
                    kind: step_kind(&l.step),
                    seq: Some(seq),
                    duration_s,
                    target: target.map(Into::into),
                    reached: target.map(|_| reached.into()),
                    error_m: target.map(|t| t.position_distance(&reached)),
                }
            }
        };
        on_line(&report);
        out.push(report);
    }
    Ok(out)
}
