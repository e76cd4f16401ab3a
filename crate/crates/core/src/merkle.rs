//! Binary Merkle trees over ordered digest lists, with inclusion paths.
//!
//! Leaves are used as-is (they are already digests). Interior nodes are
//! `Digest::combine(left, right)`. When a level has an odd number of nodes the
//! last one is paired with itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MerkleError {
    #[error("cannot build a Merkle tree over an empty list")]
    EmptyList,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Which side the sibling sits on when folding a path upwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub sibling: Digest,
    pub side: Side,
}

pub type MerklePath = Vec<PathStep>;

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => Digest::combine(l, r),
            [l] => Digest::combine(l, l),
            _ => unreachable!(),
        })
        .collect()
}

pub fn merkle_root(leaves: &[Digest]) -> Result<Digest, MerkleError> {
    if leaves.is_empty() {
        return Err(MerkleError::EmptyList);
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    Ok(level[0])
}

pub fn merkle_path(leaves: &[Digest], index: usize) -> Result<MerklePath, MerkleError> {
    if leaves.is_empty() {
        return Err(MerkleError::EmptyList);
    }
    if index >= leaves.len() {
        return Err(MerkleError::IndexOutOfRange {
            index,
            len: leaves.len(),
        });
    }
    let mut path = Vec::new();
    let mut level = leaves.to_vec();
    let mut idx = index;
    while level.len() > 1 {
        let step = if idx.is_multiple_of(2) {
            let sibling = *level.get(idx + 1).unwrap_or(&level[idx]);
            PathStep {
                sibling,
                side: Side::Right,
            }
        } else {
            PathStep {
                sibling: level[idx - 1],
                side: Side::Left,
            }
        };
        path.push(step);
        level = next_level(&level);
        idx /= 2;
    }
    Ok(path)
}

pub fn verify_path(leaf: &Digest, path: &[PathStep], root: &Digest) -> bool {
    let folded = path.iter().fold(*leaf, |acc, step| match step.side {
        Side::Left => Digest::combine(&step.sibling, &acc),
        Side::Right => Digest::combine(&acc, &step.sibling),
    });
    folded == *root
}

/// A Merkle tree that keeps every level so single-leaf updates cost
/// `O(log n)` instead of a full rebuild.
#[derive(Debug, Clone, Default)]
pub struct IncrementalMerkle {
    levels: Vec<Vec<Digest>>,
}

impl IncrementalMerkle {
    pub fn build(leaves: Vec<Digest>) -> Self {
        if leaves.is_empty() {
            return Self { levels: Vec::new() };
        }
        let mut levels = vec![leaves];
        while levels.last().map_or(0, Vec::len) > 1 {
            let next = next_level(levels.last().unwrap());
            levels.push(next);
        }
        Self { levels }
    }

    pub fn len(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn root(&self) -> Option<Digest> {
        self.levels.last().map(|top| top[0])
    }

    pub fn update(&mut self, index: usize, leaf: Digest) {
        self.levels[0][index] = leaf;
        let mut idx = index;
        for depth in 0..self.levels.len() - 1 {
            let level = &self.levels[depth];
            let left = level[idx & !1];
            let right = *level.get(idx | 1).unwrap_or(&left);
            let parent = Digest::combine(&left, &right);
            idx /= 2;
            self.levels[depth + 1][idx] = parent;
        }
    }
}
