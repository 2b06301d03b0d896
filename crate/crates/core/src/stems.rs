use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const STEM_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    Bass,
    Drums,
    Guitar,
    Piano,
}

impl Stem {
    pub const ALL: [Stem; STEM_COUNT] = [Stem::Bass, Stem::Drums, Stem::Guitar, Stem::Piano];

    pub fn index(&self) -> usize {
        match self {
            Stem::Bass => 0,
            Stem::Drums => 1,
            Stem::Guitar => 2,
            Stem::Piano => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Stem> {
        Self::ALL.get(i).copied()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stem::Bass => "bass",
            Stem::Drums => "drums",
            Stem::Guitar => "guitar",
            Stem::Piano => "piano",
        }
    }

    pub fn one_hot(&self) -> [f32; STEM_COUNT] {
        let mut v = [0.0; STEM_COUNT];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Stem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown stem {s:?}; expected bass, drums, guitar or piano"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_parse() {
        assert_eq!(Stem::Bass.one_hot(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!("Piano".parse::<Stem>().unwrap(), Stem::Piano);
        assert!("kazoo".parse::<Stem>().is_err());
        for s in Stem::ALL {
            assert_eq!(Stem::from_index(s.index()), Some(s));
        }
    }
}
