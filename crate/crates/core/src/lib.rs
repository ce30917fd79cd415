//! Control core for a desktop five-actuator arm: a yaw base, three pitch
//! joints sharing one vertical plane, and a parallel gripper.
//!
//! Everything in this crate is `no_std` + `alloc`:
//!
//! - [`robot_model`]: the robot description and tick/radian conversion
//! - [`kinematics`]: forward kinematics, Jacobian, analytic and DLS inverse kinematics
//! - [`dxl_protocol`]: Dynamixel Protocol 2.0 frames, CRC and an incremental framer
//! - [`servo_sim`]: a byte-accurate virtual servo bus
//! - [`motion`]: synchronized trapezoidal joint moves and Cartesian lines
//! - [`transport`]: the byte transport trait and a bus master built on it
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dxl_protocol;
pub mod kinematics;
pub mod motion;
pub mod robot_model;
pub mod servo_sim;
pub mod transport;

pub use kinematics::{Branch, IkSolution, ToolPose};
pub use robot_model::{JointConfig, JointVector, RobotDescription};
