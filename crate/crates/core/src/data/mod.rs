//! Synthetic CT-phantom datasets, pre-processing, augmentation and fold splits.

pub mod augment;
pub mod folds;
pub mod io;
pub mod preprocess;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugConfig};
pub use folds::{make_folds, FoldSplit};
pub use io::{read_dataset, write_dataset};
pub use preprocess::{compute_class_weights, hu_window, liver_intensity_stats, standardize, IntensityStats};
pub use synth::{synth_generate, SynthSpec};

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const CYST: u8 = 2;
pub const HEMANGIOMA: u8 = 3;
pub const METASTASIS: u8 = 4;

/// Row-major 2-D array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copy of the window starting at `(top, left)`; panics if it leaves the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + width]);
        }
        Self { height, width, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionClass {
    Cyst,
    Hemangioma,
    Metastasis,
}

impl LesionClass {
    pub const ALL: [LesionClass; 3] = [LesionClass::Cyst, LesionClass::Hemangioma, LesionClass::Metastasis];

    /// Label value in the five-class label map.
    pub fn label(self) -> u8 {
        match self {
            LesionClass::Cyst => CYST,
            LesionClass::Hemangioma => HEMANGIOMA,
            LesionClass::Metastasis => METASTASIS,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            CYST => Some(LesionClass::Cyst),
            HEMANGIOMA => Some(LesionClass::Hemangioma),
            METASTASIS => Some(LesionClass::Metastasis),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LesionClass::Cyst => "cyst",
            LesionClass::Hemangioma => "hemangioma",
            LesionClass::Metastasis => "metastasis",
        }
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LesionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LesionClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown lesion class `{s}`")))
    }
}

/// One 2-D slice with exact ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub subject_id: u32,
    /// `None` for healthy slices.
    pub lesion_class: Option<LesionClass>,
    /// Hounsfield units.
    pub image: Image<f32>,
    pub liver_mask: Image<u8>,
    /// Values in `{0 background, 1 liver, 2 cyst, 3 hemangioma, 4 metastasis}`.
    pub label_map: Image<u8>,
}

impl Sample {
    /// Checks shapes, label range, lesion-inside-liver containment and that
    /// healthy slices carry no lesion labels.
    pub fn validate(&self) -> Result<()> {
        if !self.image.same_shape(&self.liver_mask) || !self.image.same_shape(&self.label_map) {
            return Err(Error::Shape(format!("sample {}: arrays differ in shape", self.id)));
        }
        for (&l, &m) in self.label_map.data.iter().zip(&self.liver_mask.data) {
            if l > METASTASIS {
                return Err(Error::Shape(format!("sample {}: label {l} out of range", self.id)));
            }
            if l != BACKGROUND && m == 0 {
                return Err(Error::Shape(format!("sample {}: labelled pixel outside the liver", self.id)));
            }
            if l == BACKGROUND && m != 0 {
                return Err(Error::Shape(format!("sample {}: liver pixel labelled background", self.id)));
            }
            if l >= CYST && self.lesion_class.is_none() {
                return Err(Error::Shape(format!("sample {}: healthy slice has lesion pixels", self.id)));
            }
        }
        Ok(())
    }

    pub fn has_lesion(&self) -> bool {
        self.label_map.data.iter().any(|&l| l >= CYST)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Large corpus used for segmentation pre-training; lesion types are
    /// collapsed to a single lesion label at training time.
    Pretrain,
    /// Small multi-class corpus used for fine-tuning and evaluation.
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Slice counts keyed by class name, with `healthy` for lesion-free slices.
    pub fn class_counts(&self) -> std::collections::BTreeMap<String, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for name in ["cyst", "hemangioma", "metastasis", "healthy"] {
            counts.insert(name.to_string(), 0);
        }
        for s in &self.samples {
            let key = s.lesion_class.map_or("healthy", LesionClass::name);
            *counts.get_mut(key).expect("known class") += 1;
        }
        counts
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Mapping from stored five-class labels to network targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// `{background, liver}`; lesions count as liver.
    Liver,
    /// `{background, liver, lesion}`.
    Segmentation,
    /// `{background, liver, cyst, hemangioma, metastasis}`.
    Classification,
}

impl LabelScheme {
    pub fn num_classes(self) -> usize {
        match self {
            LabelScheme::Liver => 2,
            LabelScheme::Segmentation => 3,
            LabelScheme::Classification => 5,
        }
    }

    pub fn map(self, label: u8) -> u8 {
        match self {
            LabelScheme::Liver => label.min(LIVER),
            LabelScheme::Segmentation => label.min(CYST),
            LabelScheme::Classification => label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_schemes_collapse_lesions() {
        assert_eq!((0..=4).map(|l| LabelScheme::Liver.map(l)).collect::<Vec<_>>(), [0, 1, 1, 1, 1]);
        assert_eq!((0..=4).map(|l| LabelScheme::Segmentation.map(l)).collect::<Vec<_>>(), [0, 1, 2, 2, 2]);
        assert_eq!((0..=4).map(|l| LabelScheme::Classification.map(l)).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
    }

    #[test]
    fn lesion_class_names_round_trip() {
        for c in LesionClass::ALL {
            assert_eq!(c.name().parse::<LesionClass>().unwrap(), c);
            assert_eq!(LesionClass::from_label(c.label()), Some(c));
        }
        assert!("tumour".parse::<LesionClass>().is_err());
    }

    #[test]
    fn validate_rejects_lesion_outside_liver() {
        let mut s = Sample {
            id: 0,
            subject_id: 0,
            lesion_class: Some(LesionClass::Cyst),
            image: Image::filled(2, 2, 0.0),
            liver_mask: Image::from_vec(2, 2, vec![1, 1, 0, 0]).unwrap(),
            label_map: Image::from_vec(2, 2, vec![1, 2, 0, 0]).unwrap(),
        };
        assert!(s.validate().is_ok());
        s.label_map.set(1, 0, CYST);
        assert!(s.validate().is_err());
    }
}
