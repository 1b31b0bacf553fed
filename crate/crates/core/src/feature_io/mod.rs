//! Frame-feature datasets: the VPF on-disk format and a seeded synthetic
//! generator whose labels need both per-clip content and temporal motion.

mod synthetic;
mod vpf;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use vpf::{read_vpf, read_vpf_from, write_vpf, write_vpf_to, HEADER_LEN, MAGIC, VERSION};

/// One clip: `frames` is `T × D`, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub label: usize,
    pub clip_id: String,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clips: Vec<FeatureSequence>,
    pub num_classes: usize,
    pub dim: usize,
}

impl Dataset {
    /// Validates shared `dim`, label range and finiteness.
    pub fn new(clips: Vec<FeatureSequence>, num_classes: usize, dim: usize) -> Result<Self> {
        for (i, c) in clips.iter().enumerate() {
            if c.frames.rank() != 2 || c.dim() != dim {
                return Err(Error::Inconsistent(format!(
                    "clip {i} (`{}`) has shape {:?}, dataset dim is {dim}",
                    c.clip_id,
                    c.frames.shape()
                )));
            }
            if c.label >= num_classes {
                return Err(Error::Inconsistent(format!(
                    "clip {i} label {} outside 0..{num_classes}",
                    c.label
                )));
            }
            if !c.frames.is_finite() {
                return Err(Error::Inconsistent(format!("clip {i} has non-finite features")));
            }
        }
        Ok(Dataset {
            clips,
            num_classes,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Clip count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for c in &self.clips {
            counts[c.label] += 1;
        }
        counts
    }

    /// A dataset over the clips at `indices`, same classes and dim.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            clips: indices.iter().map(|&i| self.clips[i].clone()).collect(),
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }

    /// Shortest clip length, if any clips exist.
    pub fn min_len(&self) -> Option<usize> {
        self.clips.iter().map(FeatureSequence::len).min()
    }
}
