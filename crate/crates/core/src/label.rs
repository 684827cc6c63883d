//! The fixed three-way label set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Clean,
    Offensive,
    Hate,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Clean, Label::Offensive, Label::Hate];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Clean => "CLEAN",
            Label::Offensive => "OFFENSIVE",
            Label::Hate => "HATE",
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
            "CLEAN" => Ok(Label::Clean),
            "OFFENSIVE" => Ok(Label::Offensive),
            "HATE" => Ok(Label::Hate),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}
