//! Seeded synthetic clips whose class is a (content, motion) pair.
//!
//! Channel layout of every generated frame:
//!
//! * `0..content_axis_count`: content block; class content `a` puts a
//!   constant 1 on channel `a` for every frame.
//! * `content_axis_count..content_axis_count + 2`: motion block; the pair
//!   `(sin θ_t, cos θ_t)` with `θ_t = 2π f t / T + φ`, `f` the class's
//!   motion frequency in cycles per clip and `φ` a per-clip random phase.
//! * remaining channels carry only noise.
//!
//! Every channel gets additive `N(0, noise_sigma²)` noise. With integer
//! frequencies the motion block averages to zero over the clip, so the
//! frame mean carries content but no motion information.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSequence};
use crate::error::{Error, Result};
use crate::params::{rng_stream, streams};
use crate::tensor::Tensor;

/// Width of the motion channel block.
pub const MOTION_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub t: usize,
    pub d: usize,
    pub content_axis_count: usize,
    pub motion_frequencies: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            clips_per_class: 32,
            t: 32,
            d: 64,
            content_axis_count: 4,
            motion_frequencies: vec![1.0, 3.0],
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.motion_frequencies.len();
        if self.num_classes == 0 || self.clips_per_class == 0 || self.t == 0 {
            return Err(Error::config("num_classes, clips_per_class and t must be positive"));
        }
        if m == 0 || self.content_axis_count == 0 {
            return Err(Error::config("need at least one content axis and one motion frequency"));
        }
        let distinct: HashSet<u64> = self.motion_frequencies.iter().map(|f| f.to_bits()).collect();
        if distinct.len() != m || self.motion_frequencies.iter().any(|f| !f.is_finite()) {
            return Err(Error::config("motion_frequencies must be finite and distinct"));
        }
        if self.content_axis_count * m < self.num_classes {
            return Err(Error::config(format!(
                "{} content axes × {m} motion frequencies cannot label {} classes",
                self.content_axis_count, self.num_classes
            )));
        }
        if self.d < self.content_axis_count + MOTION_CHANNELS {
            return Err(Error::config(format!(
                "d={} cannot hold {} content + {MOTION_CHANNELS} motion channels",
                self.d, self.content_axis_count
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }

    /// `(content axis, motion index)` of class `c`.
    pub fn class_factors(&self, c: usize) -> (usize, usize) {
        let m = self.motion_frequencies.len();
        (c / m, c % m)
    }

    pub fn motion_block(&self) -> std::ops::Range<usize> {
        self.content_axis_count..self.content_axis_count + MOTION_CHANNELS
    }
}

/// Generates `clips_per_class` clips per class in class-major order.
/// Values are rounded to `f32` so that a VPF round trip is lossless.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_stream(spec.seed, streams::SYNTHETIC);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let (t_len, d) = (spec.t, spec.d);
    let motion = spec.motion_block();
    let mut clips = Vec::with_capacity(spec.num_classes * spec.clips_per_class);
    for class in 0..spec.num_classes {
        let (content, m) = spec.class_factors(class);
        let freq = spec.motion_frequencies[m];
        for i in 0..spec.clips_per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut data = vec![0.0; t_len * d];
            for t in 0..t_len {
                let row = &mut data[t * d..(t + 1) * d];
                row[content] = 1.0;
                let theta = 2.0 * PI * freq * t as f64 / t_len as f64 + phase;
                row[motion.start] = theta.sin();
                row[motion.start + 1] = theta.cos();
                if spec.noise_sigma > 0.0 {
                    for v in row.iter_mut() {
                        *v += noise.sample(&mut rng);
                    }
                }
                for v in row.iter_mut() {
                    *v = *v as f32 as f64;
                }
            }
            clips.push(FeatureSequence {
                frames: Tensor::new(&[t_len, d], data)?,
                label: class,
                clip_id: format!(
                    "syn-c{class}-{i} content=0..{} motion={}..{}",
                    spec.content_axis_count, motion.start, motion.end
                ),
            });
        }
    }
    Dataset::new(clips, spec.num_classes, d)
}
