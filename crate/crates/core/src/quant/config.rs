//! Training configurations (contiguous ranges of trained blocks) and the
//! per-block roles they induce.

use std::fmt;

use crate::error::{input_err, Result};

/// A contiguous, inclusive range `[first, last]` of trained blocks, or nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Configuration {
    range: Option<(usize, usize)>,
}

impl Configuration {
    pub fn empty() -> Self {
        Self { range: None }
    }

    pub fn range(first: usize, last: usize) -> Result<Self> {
        if first > last {
            return input_err(format!("configuration range [{first}, {last}] is reversed"));
        }
        Ok(Self { range: Some((first, last)) })
    }

    /// Every block of an `n_blocks` network.
    pub fn full(n_blocks: usize) -> Self {
        Self { range: n_blocks.checked_sub(1).map(|last| (0, last)) }
    }

    pub fn bounds(&self) -> Option<(usize, usize)> {
        self.range
    }

    pub fn first(&self) -> Option<usize> {
        self.range.map(|r| r.0)
    }

    pub fn last(&self) -> Option<usize> {
        self.range.map(|r| r.1)
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_none()
    }

    pub fn len(&self) -> usize {
        self.range.map_or(0, |(l, u)| u - l + 1)
    }

    pub fn contains(&self, block: usize) -> bool {
        self.range.is_some_and(|(l, u)| (l..=u).contains(&block))
    }

    pub fn blocks(&self) -> impl Iterator<Item = usize> {
        let (l, u) = self.range.map_or((1, 0), |r| r);
        l..=u
    }

    /// Trained-block-set inclusion.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        match (self.range, other.range) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some((l, u)), Some((ol, ou))) => ol <= l && u <= ou,
        }
    }

    pub fn is_strict_subset_of(&self, other: &Self) -> bool {
        self != other && self.is_subset_of(other)
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        match self.range {
            Some((_, u)) if u >= n_blocks => {
                input_err(format!("configuration {self} out of bounds for {n_blocks} blocks"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.range {
            Some((l, u)) => write!(f, "[{l}, {u}]"),
            None => write!(f, "[]"),
        }
    }
}

/// Role of a block under a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockType {
    /// (a) first trained block: forward + parameter gradients.
    FirstTrained,
    /// (b) later trained block: forward + parameter and input gradients.
    SubsequentTrained,
    /// (c) frozen, no trained block before it: forward only.
    FrozenBefore,
    /// (d) frozen after a trained block: forward + input gradient.
    FrozenAfter,
}

impl BlockType {
    pub fn is_trained(self) -> bool {
        matches!(self, BlockType::FirstTrained | BlockType::SubsequentTrained)
    }

    pub fn label(self) -> char {
        match self {
            BlockType::FirstTrained => 'a',
            BlockType::SubsequentTrained => 'b',
            BlockType::FrozenBefore => 'c',
            BlockType::FrozenAfter => 'd',
        }
    }
}

pub fn classify_blocks(config: &Configuration, n_blocks: usize) -> Result<Vec<BlockType>> {
    config.validate(n_blocks)?;
    let first = config.first();
    Ok((0..n_blocks)
        .map(|i| match first {
            None => BlockType::FrozenBefore,
            Some(l) if i < l => BlockType::FrozenBefore,
            Some(l) if i == l => BlockType::FirstTrained,
            Some(_) if config.contains(i) => BlockType::SubsequentTrained,
            Some(_) => BlockType::FrozenAfter,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(config: Configuration, n: usize) -> String {
        classify_blocks(&config, n).unwrap().into_iter().map(BlockType::label).collect()
    }

    #[test]
    fn single_trained_block() {
        assert_eq!(labels(Configuration::range(4, 4).unwrap(), 6), "ccccad");
    }

    #[test]
    fn two_trained_blocks() {
        assert_eq!(labels(Configuration::range(2, 3).unwrap(), 6), "ccabdd");
    }

    #[test]
    fn all_trained_and_empty() {
        assert_eq!(labels(Configuration::full(5), 5), "abbbb");
        assert_eq!(labels(Configuration::empty(), 3), "ccc");
    }

    #[test]
    fn out_of_bounds() {
        assert!(classify_blocks(&Configuration::range(2, 6).unwrap(), 6).is_err());
        assert!(Configuration::range(3, 2).is_err());
    }

    /// Exhaustive check of the four typing rules for every contiguous range of
    /// networks with up to eight blocks.
    #[test]
    fn typing_rules_exhaustive() {
        for n in 1..=8 {
            for l in 0..n {
                for u in l..n {
                    let c = Configuration::range(l, u).unwrap();
                    let types = classify_blocks(&c, n).unwrap();
                    for (i, t) in types.iter().enumerate() {
                        let trained = (l..=u).contains(&i);
                        let preceded = (0..i).any(|j| (l..=u).contains(&j));
                        let want = match (trained, preceded) {
                            (true, false) => BlockType::FirstTrained,
                            (true, true) => BlockType::SubsequentTrained,
                            (false, false) => BlockType::FrozenBefore,
                            (false, true) => BlockType::FrozenAfter,
                        };
                        assert_eq!(*t, want, "n={n} [{l},{u}] block {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn subset_relation() {
        let a = Configuration::range(1, 2).unwrap();
        let b = Configuration::range(0, 3).unwrap();
        assert!(a.is_strict_subset_of(&b));
        assert!(!b.is_subset_of(&a));
        assert!(!a.is_strict_subset_of(&a));
        assert!(Configuration::empty().is_subset_of(&a));
    }
}
