//! Shared enumerations used across the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
#[error("unrecognized {kind} `{value}`")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! string_enum {
    ($name:ident, $kind:literal, { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ParseEnumError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    other => Err(ParseEnumError { kind: $kind, value: other.to_string() }),
                }
            }
        }
    };
}

/// Source of an outcome measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    /// Survey / remote-sensing benchmark (poverty rate, canopy cover).
    Authoritative,
    /// Multimodal language model elicitation on street-view tiles.
    Mllm,
    /// Pixel-share semantic segmentation baseline.
    Segmentation,
}

string_enum!(Approach, "approach", {
    Authoritative => "authoritative",
    Mllm => "mllm",
    Segmentation => "segmentation",
});

impl Approach {
    pub const ALL: [Approach; 3] = [Approach::Authoritative, Approach::Mllm, Approach::Segmentation];
}

/// Historical appraisal grade grouping of a block group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HolcGroup {
    Redlined,
    Ideal,
    StableDeclining,
    Unassigned,
}

string_enum!(HolcGroup, "holc group", {
    Redlined => "redlined" | "D",
    Ideal => "ideal" | "A",
    StableDeclining => "stable_declining" | "B/C" | "BC",
    Unassigned => "unassigned" | "",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Poverty,
    Canopy,
    /// Sustainability index: z(canopy) − z(poverty).
    Si,
}

string_enum!(Outcome, "outcome", {
    Poverty => "poverty",
    Canopy => "canopy",
    Si => "si",
});

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Poverty, Outcome::Canopy, Outcome::Si];
}

/// Reference group the redlined block groups are contrasted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    VsIdeal,
    VsStableDeclining,
}

string_enum!(Comparison, "comparison", {
    VsIdeal => "vs_ideal",
    VsStableDeclining => "vs_stable_declining",
});

impl Comparison {
    pub const ALL: [Comparison; 2] = [Comparison::VsIdeal, Comparison::VsStableDeclining];

    pub fn reference(&self) -> HolcGroup {
        match self {
            Comparison::VsIdeal => HolcGroup::Ideal,
            Comparison::VsStableDeclining => HolcGroup::StableDeclining,
        }
    }
}

/// Analysis sample a panel is built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sample {
    VsIdeal,
    VsStableDeclining,
    /// Every kept block group regardless of grade.
    All,
}

string_enum!(Sample, "sample", {
    VsIdeal => "vs_ideal",
    VsStableDeclining => "vs_stable_declining",
    All => "all",
});

impl Sample {
    pub fn contains(&self, group: HolcGroup) -> bool {
        match self {
            Sample::VsIdeal => matches!(group, HolcGroup::Redlined | HolcGroup::Ideal),
            Sample::VsStableDeclining => {
                matches!(group, HolcGroup::Redlined | HolcGroup::StableDeclining)
            }
            Sample::All => true,
        }
    }
}

impl From<Comparison> for Sample {
    fn from(c: Comparison) -> Self {
        match c {
            Comparison::VsIdeal => Sample::VsIdeal,
            Comparison::VsStableDeclining => Sample::VsStableDeclining,
        }
    }
}
