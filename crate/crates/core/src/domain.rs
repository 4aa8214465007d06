use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// MRI contrast, treated as an image domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainLabel {
    T1,
    T1c,
    T2,
    #[serde(rename = "F")]
    Flair,
}

impl DomainLabel {
    pub const ALL: [DomainLabel; 4] = [DomainLabel::T1, DomainLabel::T1c, DomainLabel::T2, DomainLabel::Flair];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Short display name (`T1`, `T1c`, `T2`, `F`).
    pub fn name(self) -> &'static str {
        match self {
            DomainLabel::T1 => "T1",
            DomainLabel::T1c => "T1c",
            DomainLabel::T2 => "T2",
            DomainLabel::Flair => "F",
        }
    }

    /// File stem used in dataset directories.
    pub fn file_stem(self) -> &'static str {
        match self {
            DomainLabel::T1 => "t1",
            DomainLabel::T1c => "t1c",
            DomainLabel::T2 => "t2",
            DomainLabel::Flair => "flair",
        }
    }

    /// The other three domains in ascending index order.
    pub fn inputs_for(target: DomainLabel) -> [DomainLabel; 3] {
        let mut out = [DomainLabel::T1; 3];
        let mut k = 0;
        for d in Self::ALL {
            if d != target {
                out[k] = d;
                k += 1;
            }
        }
        out
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(DomainLabel::T1),
            "t1c" | "t1ce" => Ok(DomainLabel::T1c),
            "t2" => Ok(DomainLabel::T2),
            "f" | "flair" => Ok(DomainLabel::Flair),
            _ => Err(Error::Usage(format!("unknown domain {s:?} (expected T1, T1c, T2 or F)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_are_fixed() {
        let idx: Vec<_> = DomainLabel::ALL.iter().map(|d| d.index()).collect();
        assert_eq!(idx, [0, 1, 2, 3]);
        assert_eq!(DomainLabel::from_index(3), Some(DomainLabel::Flair));
        assert_eq!(DomainLabel::from_index(4), None);
    }

    #[test]
    fn input_set_is_the_complement_in_index_order() {
        assert_eq!(
            DomainLabel::inputs_for(DomainLabel::T2),
            [DomainLabel::T1, DomainLabel::T1c, DomainLabel::Flair]
        );
    }

    #[test]
    fn parses_names_and_stems() {
        for d in DomainLabel::ALL {
            assert_eq!(d.name().parse::<DomainLabel>().unwrap(), d);
            assert_eq!(d.file_stem().parse::<DomainLabel>().unwrap(), d);
        }
        assert!("pd".parse::<DomainLabel>().is_err());
    }
}
