use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// The eight GroupToy activity labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActivityClass {
    ConvergeLeft,
    ConvergeRight,
    Scatter,
    Chase,
    HuddleBreak,
    CrossL2R,
    CrossR2L,
    LoneRunner,
}

impl ActivityClass {
    pub const COUNT: usize = 8;

    pub const ALL: [ActivityClass; Self::COUNT] = [
        ActivityClass::ConvergeLeft,
        ActivityClass::ConvergeRight,
        ActivityClass::Scatter,
        ActivityClass::Chase,
        ActivityClass::HuddleBreak,
        ActivityClass::CrossL2R,
        ActivityClass::CrossR2L,
        ActivityClass::LoneRunner,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivityClass::ConvergeLeft => "converge-left",
            ActivityClass::ConvergeRight => "converge-right",
            ActivityClass::Scatter => "scatter",
            ActivityClass::Chase => "chase",
            ActivityClass::HuddleBreak => "huddle-break",
            ActivityClass::CrossL2R => "cross-l2r",
            ActivityClass::CrossR2L => "cross-r2l",
            ActivityClass::LoneRunner => "lone-runner",
        }
    }

    /// Label of the horizontally mirrored clip. An involution.
    pub fn flipped(self) -> Self {
        match self {
            ActivityClass::ConvergeLeft => ActivityClass::ConvergeRight,
            ActivityClass::ConvergeRight => ActivityClass::ConvergeLeft,
            ActivityClass::CrossL2R => ActivityClass::CrossR2L,
            ActivityClass::CrossR2L => ActivityClass::CrossL2R,
            other => other,
        }
    }

    /// Right-oriented classes are rendered as mirrors of their left twin.
    pub(crate) fn is_mirrored_twin(self) -> bool {
        matches!(self, ActivityClass::ConvergeRight | ActivityClass::CrossR2L)
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for ActivityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown activity class {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_an_involution() {
        for c in ActivityClass::ALL {
            assert_eq!(c.flipped().flipped(), c);
        }
        assert_eq!(ActivityClass::ConvergeLeft.flipped(), ActivityClass::ConvergeRight);
        assert_eq!(ActivityClass::CrossL2R.flipped(), ActivityClass::CrossR2L);
        assert_eq!(ActivityClass::Scatter.flipped(), ActivityClass::Scatter);
    }

    #[test]
    fn names_roundtrip() {
        for c in ActivityClass::ALL {
            assert_eq!(c.name().parse::<ActivityClass>().unwrap(), c);
            assert_eq!(ActivityClass::from_index(c.index()), Some(c));
        }
        assert!(matches!("walk".parse::<ActivityClass>(), Err(Error::Schema(_))));
    }
}
