use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Head,
    Medium,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Medium, Group::Tail];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Head => "head",
            Group::Medium => "medium",
            Group::Tail => "tail",
        })
    }
}

/// Head if `n > hi`, tail if `n < lo`, medium otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupThresholds {
    pub hi: usize,
    pub lo: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self { hi: 100, lo: 20 }
    }
}

pub fn group_split(counts: &[usize], thresholds: GroupThresholds) -> Result<Vec<Group>> {
    if thresholds.lo >= thresholds.hi {
        return Err(Error::config(format!(
            "tail threshold {} must be below head threshold {}",
            thresholds.lo, thresholds.hi
        )));
    }
    Ok(counts
        .iter()
        .map(|&n| {
            if n > thresholds.hi {
                Group::Head
            } else if n < thresholds.lo {
                Group::Tail
            } else {
                Group::Medium
            }
        })
        .collect())
}
