//! Tactile image value type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How much of the sensor's perception field a frame's contact covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContactKind {
    Adequate,
    Partial,
}

impl ContactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContactKind::Adequate => "adequate",
            ContactKind::Partial => "partial",
        }
    }
}

impl std::fmt::Display for ContactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ContactKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adequate" => Ok(ContactKind::Adequate),
            "partial" => Ok(ContactKind::Partial),
            other => Err(Error::config(format!("unknown contact kind `{other}`"))),
        }
    }
}

/// `H×W×C` intensity grid (row-major, channel innermost) with its label and
/// contact metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TactileImage<S = f64> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<S>,
    pub label: usize,
    pub contact_fraction: f64,
    pub contact_kind: ContactKind,
}

impl<S: Scalar> TactileImage<S> {
    /// Full-contact image; checks the buffer length and the `[0, 1]` range.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<S>, label: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || pixels.len() != height * width * channels {
            return Err(Error::Dimension {
                op: "tactile_image",
                lhs: vec![height, width, channels],
                rhs: vec![pixels.len()],
            });
        }
        if let Some(bad) = pixels.iter().find(|&&v| !(v >= S::zero() && v <= S::one())) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            label,
            contact_fraction: 1.0,
            contact_kind: ContactKind::Adequate,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> S {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }
}
