use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Semantic BEV classes, with their stable on-disk ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Vehicle,
    Pedestrian,
    Drivable,
    Lane,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Vehicle, Class::Pedestrian, Class::Drivable, Class::Lane];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Class> {
        Class::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Vehicle => "vehicle",
            Class::Pedestrian => "pedestrian",
            Class::Drivable => "drivable",
            Class::Lane => "lane",
        }
    }

    /// Display color: orange, blue, grey and red.
    pub fn color(self) -> [u8; 3] {
        match self {
            Class::Vehicle => [255, 140, 0],
            Class::Pedestrian => [30, 90, 255],
            Class::Drivable => [150, 150, 150],
            Class::Lane => [220, 20, 20],
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Class::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::UnknownClass(s.to_owned()))
    }
}
