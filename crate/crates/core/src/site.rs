//! Identifiers for the places in a decoder where activations are observed or
//! quantized.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Q,
    K,
    V,
    Out,
    Gate,
    Up,
    Down,
    RmsnormIn,
    RmsnormPost,
}

impl SiteKind {
    pub const ALL: [SiteKind; 9] = [
        SiteKind::Q,
        SiteKind::K,
        SiteKind::V,
        SiteKind::Out,
        SiteKind::Gate,
        SiteKind::Up,
        SiteKind::Down,
        SiteKind::RmsnormIn,
        SiteKind::RmsnormPost,
    ];

    /// The seven linear projections of a block.
    pub const LINEAR: [SiteKind; 7] = [
        SiteKind::Q,
        SiteKind::K,
        SiteKind::V,
        SiteKind::Out,
        SiteKind::Gate,
        SiteKind::Up,
        SiteKind::Down,
    ];

    pub fn is_linear(self) -> bool {
        !matches!(self, SiteKind::RmsnormIn | SiteKind::RmsnormPost)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Q => "q",
            SiteKind::K => "k",
            SiteKind::V => "v",
            SiteKind::Out => "out",
            SiteKind::Gate => "gate",
            SiteKind::Up => "up",
            SiteKind::Down => "down",
            SiteKind::RmsnormIn => "rmsnorm_in",
            SiteKind::RmsnormPost => "rmsnorm_post",
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SiteKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownSite(format!("projection kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Input,
    Output,
}

impl Boundary {
    pub fn as_str(self) -> &'static str {
        match self {
            Boundary::Input => "input",
            Boundary::Output => "output",
        }
    }
}

/// A tap point: `layer` is 1-based, so a 32-layer model has layers `1..=32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
    pub boundary: Boundary,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind, boundary: Boundary) -> Self {
        Self { layer, kind, boundary }
    }

    pub fn input(layer: usize, kind: SiteKind) -> Self {
        Self::new(layer, kind, Boundary::Input)
    }

    pub fn output(layer: usize, kind: SiteKind) -> Self {
        Self::new(layer, kind, Boundary::Output)
    }

    /// Every site of a model with `n_layers` layers, in canonical order.
    pub fn all(n_layers: usize) -> impl Iterator<Item = SiteId> {
        (1..=n_layers).flat_map(|layer| {
            SiteKind::ALL.into_iter().flat_map(move |kind| {
                [Boundary::Input, Boundary::Output]
                    .into_iter()
                    .map(move |b| SiteId::new(layer, kind, b))
            })
        })
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}:{}", self.kind, self.layer, self.boundary.as_str())
    }
}
