//! Robot description files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use armstack_core::robot_model::{RobotDescription, ValidationError};
use thiserror::Error;

/// The description shipped with the binary, used when no file is given.
pub const DEFAULT_DESCRIPTION: &str = include_str!("../descriptions/default.toml");

#[derive(Debug, Error)]
pub enum DescriptionError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid description: {0}")]
    Invalid(#[from] ValidationError),
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, column)
}

/// Parses and validates a description document.
pub fn parse_description(text: &str) -> Result<RobotDescription, DescriptionError> {
    let d: RobotDescription = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        DescriptionError::Parse {
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;
    d.validate()?;
    Ok(d)
}

pub fn load_description(path: &Path) -> Result<RobotDescription, DescriptionError> {
    let text = fs::read_to_string(path).map_err(|source| DescriptionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_description(&text)
}

/// Loads `path`, or the shipped description when `None`.
pub fn load_or_default(path: Option<&Path>) -> Result<RobotDescription, DescriptionError> {
    match path {
        Some(p) => load_description(p),
        None => parse_description(DEFAULT_DESCRIPTION),
    }
}

pub fn to_toml(d: &RobotDescription) -> String {
    toml::to_string(d).expect("descriptions always serialize")
}
