use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, streams};

/// Fraction of the training pool used for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum DataRatio {
    P10,
    P20,
    P30,
    P100,
}

impl DataRatio {
    pub const ALL: [DataRatio; 4] = [DataRatio::P10, DataRatio::P20, DataRatio::P30, DataRatio::P100];

    pub fn percent(self) -> u32 {
        match self {
            DataRatio::P10 => 10,
            DataRatio::P20 => 20,
            DataRatio::P30 => 30,
            DataRatio::P100 => 100,
        }
    }

    /// `ceil(percent * n / 100)`.
    pub fn slice_len(self, n: usize) -> usize {
        (self.percent() as usize * n).div_ceil(100)
    }
}

impl TryFrom<u32> for DataRatio {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            10 => Ok(DataRatio::P10),
            20 => Ok(DataRatio::P20),
            30 => Ok(DataRatio::P30),
            100 => Ok(DataRatio::P100),
            other => Err(Error::Config(format!(
                "data ratio {other}% not in {{10, 20, 30, 100}}"
            ))),
        }
    }
}

impl From<DataRatio> for u32 {
    fn from(r: DataRatio) -> u32 {
        r.percent()
    }
}

/// Deterministic validation hold-out plus a shuffled training order whose
/// prefixes realize the data ratios.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub validation: Vec<usize>,
    pub train_order: Vec<usize>,
}

/// Share of scenes held out for validation, in percent.
pub const VALIDATION_PERCENT: usize = 15;

fn rank(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(derive_seed(seed, streams::SPLIT, &[]).to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

impl DatasetSplit {
    /// Orders scenes by a keyed hash of their ids; the first 15% (rounded up)
    /// are validation, the rest the training pool.
    pub fn new<S: AsRef<str>>(ids: &[S], split_seed: u64) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::Contract(
                "need at least two scenes to split".into(),
            ));
        }
        let mut order: Vec<(usize, [u8; 32])> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (i, rank(split_seed, id.as_ref())))
            .collect();
        order.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        let n_val = (ids.len() * VALIDATION_PERCENT).div_ceil(100).max(1);
        let validation = order[..n_val].iter().map(|(i, _)| *i).collect();
        let train_order = order[n_val..].iter().map(|(i, _)| *i).collect();
        Ok(Self {
            validation,
            train_order,
        })
    }

    pub fn train_slice(&self, ratio: DataRatio) -> &[usize] {
        &self.train_order[..ratio.slice_len(self.train_order.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("scene_{i:08}")).collect()
    }

    #[test]
    fn split_is_disjoint_and_nested() {
        let s = DatasetSplit::new(&ids(300), 5).unwrap();
        assert_eq!(s.validation.len(), 45);
        assert_eq!(s.train_order.len(), 255);
        let mut all: Vec<usize> = s.validation.iter().chain(&s.train_order).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert_eq!(s.train_slice(DataRatio::P10).len(), 26);
        assert_eq!(s.train_slice(DataRatio::P100).len(), 255);
        assert!(s.train_slice(DataRatio::P30).starts_with(s.train_slice(DataRatio::P20)));
    }

    #[test]
    fn ratio_whitelist() {
        assert!(DataRatio::try_from(50).is_err());
        assert_eq!(DataRatio::try_from(20).unwrap(), DataRatio::P20);
    }

    #[test]
    fn split_deterministic() {
        assert_eq!(
            DatasetSplit::new(&ids(50), 1).unwrap(),
            DatasetSplit::new(&ids(50), 1).unwrap()
        );
        assert_ne!(
            DatasetSplit::new(&ids(50), 1).unwrap(),
            DatasetSplit::new(&ids(50), 2).unwrap()
        );
    }
}
