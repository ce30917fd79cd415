//! Std side of the arm stack: serial transport, control loop, teleoperation
//! service, motion scripts and the command-line front end.

pub mod cli;
pub mod controller;
pub mod description;
pub mod script;
pub mod serial;
pub mod service;
pub mod wire;
