//! Procedural images with class-dependent spatial layout.
//!
//! Class `c` lights the quadrant `c % 4` in every channel and a horizontal
//! band `(c / 4) % 3` (vertical when `(c / 12)` is odd) in channel `c % 3`.
//! Layouts are distinct for up to 24 classes.

use serde::{Deserialize, Serialize};

use super::LabeledImages;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{SeededRng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_side: usize,
    pub classes: usize,
    pub samples_train: usize,
    pub samples_test: usize,
    pub noise_sigma: f64,
    /// Root seed of the generator, independent of the training seed so
    /// that every training seed sees the same data.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_side: 28,
            classes: 10,
            samples_train: 2000,
            samples_test: 500,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "synthetic classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.image_side < 2 {
            return Err(Error::Config(format!(
                "synthetic image_side must be >= 2, got {}",
                self.image_side
            )));
        }
        if self.samples_train == 0 || self.samples_test == 0 {
            return Err(Error::Config("synthetic splits must be non-empty".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Noise-free pattern of class `c`, `[3, side, side]`.
pub fn pattern(c: usize, side: usize) -> Vec<f64> {
    let half = side / 2;
    let (q, band, vertical, tint) = (c % 4, (c / 4) % 3, (c / 12) % 2 == 1, c % 3);
    let band_range = (band * side / 3, (band + 1) * side / 3);
    let mut out = vec![0.0; 3 * side * side];
    for ch in 0..3 {
        for r in 0..side {
            for col in 0..side {
                let mut v = 0.0;
                if (r < half) == (q < 2) && (col < half) == (q % 2 == 0) {
                    v += 1.0;
                }
                let along = if vertical { col } else { r };
                if ch == tint && along >= band_range.0 && along < band_range.1 {
                    v += 0.5;
                }
                out[(ch * side + r) * side + col] = v;
            }
        }
    }
    out
}

fn split(spec: &SyntheticSpec, count: usize, stream: Stream) -> Result<LabeledImages> {
    let mut rng = SeededRng::stream(spec.seed, stream);
    let patterns: Vec<Vec<f64>> = (0..spec.classes).map(|c| pattern(c, spec.image_side)).collect();
    let per = 3 * spec.image_side * spec.image_side;
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * per);
    for _ in 0..count {
        let c = rng.below(spec.classes as u64) as usize;
        labels.push(c);
        for &p in &patterns[c] {
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng.normal()
            } else {
                0.0
            };
            data.push(p + noise);
        }
    }
    let images = Tensor::new(vec![count, 3, spec.image_side, spec.image_side], data)?;
    LabeledImages::new(images, labels, spec.classes)
}

/// `(train, test)` drawn from disjoint streams of `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<(LabeledImages, LabeledImages)> {
    spec.validate()?;
    Ok((
        split(spec, spec.samples_train, Stream::SyntheticTrain)?,
        split(spec, spec.samples_test, Stream::SyntheticTest)?,
    ))
}
