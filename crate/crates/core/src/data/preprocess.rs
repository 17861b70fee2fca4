//! Intensity windowing, liver-based standardization and class weighting.

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Image, LabelScheme, Sample};
use crate::error::{Error, Result};

pub const HU_MIN: f32 = -160.0;
pub const HU_MAX: f32 = 240.0;
/// Floor applied to a class's pixel ratio before inverting it.
pub const MIN_CLASS_RATIO: f64 = 1e-6;

pub fn hu_window(image: &Image<f32>) -> Image<f32> {
    Image {
        height: image.height,
        width: image.width,
        data: image.data.iter().map(|v| v.clamp(HU_MIN, HU_MAX)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
}

/// `(x - mean) / std` over the whole image.
pub fn standardize(image: &Image<f32>, stats: IntensityStats) -> Result<Image<f32>> {
    if !(stats.std > 0.0) || !stats.mean.is_finite() {
        return Err(Error::Config(format!(
            "standardization needs a finite mean and positive std, got {stats:?}"
        )));
    }
    Ok(Image {
        height: image.height,
        width: image.width,
        data: image
            .data
            .iter()
            .map(|&v| ((v as f64 - stats.mean) / stats.std) as f32)
            .collect(),
    })
}

/// Mean and population std of windowed intensities under the liver masks.
pub fn liver_intensity_stats<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<IntensityStats> {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for s in samples {
        for (&v, &m) in s.image.data.iter().zip(&s.liver_mask.data) {
            if m != 0 {
                let v = v.clamp(HU_MIN, HU_MAX) as f64;
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset("no liver pixels to compute intensity statistics"));
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    Ok(IntensityStats { mean, std: var.sqrt() })
}

/// Weights inversely proportional to pixel frequency, normalized to average 1:
/// `w_c = K * (1/r_c) / sum_j (1/r_j)`.
pub fn class_weights_from_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    let inv: Vec<f64> = counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let mut r = if total == 0 { 0.0 } else { n as f64 / total as f64 };
            if r < MIN_CLASS_RATIO {
                warn!("class {c} has no pixels; clamping its ratio to {MIN_CLASS_RATIO}");
                r = MIN_CLASS_RATIO;
            }
            1.0 / r
        })
        .collect();
    let norm: f64 = inv.iter().sum();
    inv.iter().map(|v| k * v / norm).collect()
}

/// Same as [`class_weights_from_counts`] from explicit ratios (any positive scale).
pub fn class_weights_from_ratios(ratios: &[f64]) -> Vec<f64> {
    let k = ratios.len() as f64;
    let total: f64 = ratios.iter().sum();
    let inv: Vec<f64> = ratios
        .iter()
        .map(|&r| 1.0 / (r / total).max(MIN_CLASS_RATIO))
        .collect();
    let norm: f64 = inv.iter().sum();
    inv.iter().map(|v| k * v / norm).collect()
}

/// Per-class weights over the label maps of `samples`, mapped through `scheme`.
pub fn compute_class_weights<'a>(
    label_maps: impl IntoIterator<Item = &'a Image<u8>>,
    scheme: LabelScheme,
) -> Vec<f64> {
    let mut counts = vec![0u64; scheme.num_classes()];
    for map in label_maps {
        for &l in &map.data {
            counts[scheme.map(l) as usize] += 1;
        }
    }
    class_weights_from_counts(&counts)
}
