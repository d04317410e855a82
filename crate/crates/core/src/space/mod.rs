//! Cell search space, architecture encodings, and the weight-sharing supernet.

mod checkpoint;
mod supernet;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint, CheckpointManifest};
pub use supernet::{
    count_flops, count_params, BnPolicy, BnRole, ConvBn, EdgeSlot, Forward, PathEdge, SpaceConfig, Subnet,
    Supernet, TrainMode,
};

/// Candidate operation on a cell edge. The discriminant is the encoding digit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv3x3 = 0,
    Conv1x1 = 1,
    AvgPool3x3 = 2,
    Identity = 3,
    Zero = 4,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [OpKind::Conv3x3, OpKind::Conv1x1, OpKind::AvgPool3x3, OpKind::Identity, OpKind::Zero];

    pub fn from_digit(d: u8) -> Result<Self> {
        Self::ALL
            .get(d as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("operation digit {d} out of range 0..5")))
    }

    pub fn digit(self) -> u8 {
        self as u8
    }

    pub fn is_conv(self) -> bool {
        matches!(self, OpKind::Conv3x3 | OpKind::Conv1x1)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3x3 => "conv3x3",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::AvgPool3x3 => "avgpool3x3",
            OpKind::Identity => "identity",
            OpKind::Zero => "zero",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const NUM_NODES: usize = 4;
pub const NUM_EDGES: usize = 6;
pub const NUM_OPS: usize = 5;
/// `5^6`.
pub const SPACE_SIZE: usize = 15_625;

/// Edges `(from, to)` in encoding order.
pub const EDGES: [(usize, usize); NUM_EDGES] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// One operation per edge, serialized as six digits `0..=4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchEncoding([u8; NUM_EDGES]);

impl ArchEncoding {
    pub fn from_digits(digits: &[u8]) -> Result<Self> {
        if digits.len() != NUM_EDGES {
            return Err(Error::invalid(format!("encoding needs {NUM_EDGES} digits, got {}", digits.len())));
        }
        let mut out = [0u8; NUM_EDGES];
        for (o, &d) in out.iter_mut().zip(digits) {
            OpKind::from_digit(d)?;
            *o = d;
        }
        Ok(Self(out))
    }

    pub fn encode(ops: [OpKind; NUM_EDGES]) -> Self {
        Self(ops.map(OpKind::digit))
    }

    pub fn decode(&self) -> [OpKind; NUM_EDGES] {
        self.0.map(|d| OpKind::ALL[d as usize])
    }

    pub fn digits(&self) -> [u8; NUM_EDGES] {
        self.0
    }

    pub fn op(&self, edge: usize) -> OpKind {
        OpKind::ALL[self.0[edge] as usize]
    }

    /// Base-5 index with the first edge as the most significant digit, so
    /// index order equals lexicographic string order.
    pub fn index(&self) -> usize {
        self.0.iter().fold(0, |acc, &d| acc * NUM_OPS + d as usize)
    }

    pub fn from_index(mut index: usize) -> Result<Self> {
        if index >= SPACE_SIZE {
            return Err(Error::invalid(format!("architecture index {index} out of range")));
        }
        let mut out = [0u8; NUM_EDGES];
        for d in out.iter_mut().rev() {
            *d = (index % NUM_OPS) as u8;
            index /= NUM_OPS;
        }
        Ok(Self(out))
    }

    pub fn uniform(rng: &mut RngState) -> Self {
        Self::from_index(rng.below(SPACE_SIZE)).expect("index in range")
    }

    pub fn count(&self, op: OpKind) -> usize {
        self.0.iter().filter(|&&d| d == op.digit()).count()
    }

    pub fn has_conv(&self) -> bool {
        self.decode().iter().any(|o| o.is_conv())
    }
}

impl fmt::Display for ArchEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits: Vec<u8> = s
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as u8).ok_or_else(|| Error::invalid(format!("bad encoding {s:?}"))))
            .collect::<Result<_>>()?;
        Self::from_digits(&digits)
    }
}

impl Serialize for ArchEncoding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ArchEncoding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All encodings in index order.
pub fn enumerate_space() -> impl Iterator<Item = ArchEncoding> {
    (0..SPACE_SIZE).map(|i| ArchEncoding::from_index(i).expect("index in range"))
}

/// Occurrences of each operation across every edge of `archs`, indexed by digit.
pub fn census_ops(archs: &[ArchEncoding]) -> [usize; NUM_OPS] {
    let mut counts = [0; NUM_OPS];
    for a in archs {
        for d in a.digits() {
            counts[d as usize] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn zero_digits_are_conv3x3_everywhere() {
        let a = ArchEncoding::from_digits(&[0; 6]).unwrap();
        assert!(a.decode().iter().all(|&o| o == OpKind::Conv3x3));
    }

    #[test]
    fn bad_digits_rejected() {
        assert!(ArchEncoding::from_digits(&[0, 1, 2, 3, 4, 5]).is_err());
        assert!(ArchEncoding::from_digits(&[0, 1]).is_err());
        assert!("01234".parse::<ArchEncoding>().is_err());
        assert!("01234a".parse::<ArchEncoding>().is_err());
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = RngState::new(3);
        for _ in 0..1000 {
            let digits: Vec<u8> = (0..6).map(|_| rng.below(5) as u8).collect();
            let a = ArchEncoding::from_digits(&digits).unwrap();
            assert_eq!(ArchEncoding::encode(a.decode()), a);
            assert_eq!(a.to_string().parse::<ArchEncoding>().unwrap(), a);
            assert_eq!(ArchEncoding::from_index(a.index()).unwrap(), a);
        }
    }

    #[test]
    fn space_has_15625_distinct_members() {
        let all: HashSet<ArchEncoding> = enumerate_space().collect();
        assert_eq!(all.len(), 15_625);
        let strings: Vec<String> = enumerate_space().map(|a| a.to_string()).collect();
        assert!(strings.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn census_counts() {
        let id = ArchEncoding::encode([OpKind::Identity; 6]);
        let c = census_ops(&[id; 10]);
        assert_eq!(c, [0, 0, 0, 60, 0]);
        let mut rng = RngState::new(1);
        let archs: Vec<_> = (0..10).map(|_| ArchEncoding::uniform(&mut rng)).collect();
        assert_eq!(census_ops(&archs).iter().sum::<usize>(), 60);
    }

    #[test]
    fn serde_uses_digit_string() {
        let a: ArchEncoding = "104230".parse().unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), "\"104230\"");
        assert_eq!(serde_json::from_str::<ArchEncoding>("\"104230\"").unwrap(), a);
    }
}
