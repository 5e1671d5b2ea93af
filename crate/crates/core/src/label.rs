use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Class index of "Live" in logits and probability vectors.
pub const LIVE_INDEX: usize = 1;
/// Class index of "Spoof".
pub const SPOOF_INDEX: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live,
    Spoof,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Live => LIVE_INDEX,
            Label::Spoof => SPOOF_INDEX,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Label::Live),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::Config(format!("unknown label `{other}`"))),
        }
    }
}

/// Per-patch supervision target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchLabel {
    Live,
    Spoof,
    /// Excluded from the patch loss (e.g. after a rotation broke the grid).
    Unlabeled,
}

impl PatchLabel {
    pub fn class_index(self) -> Option<usize> {
        match self {
            PatchLabel::Live => Some(LIVE_INDEX),
            PatchLabel::Spoof => Some(SPOOF_INDEX),
            PatchLabel::Unlabeled => None,
        }
    }
}

impl From<Label> for PatchLabel {
    fn from(label: Label) -> Self {
        match label {
            Label::Live => PatchLabel::Live,
            Label::Spoof => PatchLabel::Spoof,
        }
    }
}
