//! On-disk dataset container: `manifest.json` plus one binary file per array.
//!
//! Every array file starts with a 16-byte header: the magic `CSCDTUNE`, then
//! little-endian `u16` version, element kind (1 = f32, 2 = u8), height and width.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::preprocess::IntensityStats;
use super::{Dataset, DatasetKind, Image, LesionClass, Sample};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 8] = b"CSCDTUNE";
const HEADER_LEN: usize = 16;
const KIND_F32: u16 = 1;
const KIND_U8: u16 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: u32,
    pub subject_id: u32,
    pub lesion_class: Option<LesionClass>,
    pub image: String,
    pub liver_mask: String,
    pub label_map: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub kind: DatasetKind,
    pub height: usize,
    pub width: usize,
    pub class_counts: BTreeMap<String, usize>,
    /// Liver intensity statistics of the training portion, when known.
    pub normalization: Option<IntensityStats>,
    pub samples: Vec<SampleRecord>,
}

/// Element types storable in array files.
pub trait Element: Copy + Default {
    const KIND: u16;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const KIND: u16 = KIND_F32;
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for u8 {
    const KIND: u16 = KIND_U8;
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

pub fn write_array<T: Element>(path: &Path, image: &Image<T>) -> Result<()> {
    let (h, w) = (image.height, image.width);
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::format(path, format!("{h}x{w} exceeds the header range")));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + image.data.len() * T::SIZE);
    buf.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, T::KIND, h as u16, w as u16] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &image.data {
        v.write_le(&mut buf);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_array<T: Element>(path: &Path) -> Result<Image<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "missing or corrupt header"));
    }
    let field = |i: usize| u16::from_le_bytes([bytes[8 + 2 * i], bytes[9 + 2 * i]]);
    let (version, kind, h, w) = (field(0), field(1), field(2) as usize, field(3) as usize);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version.into(),
            expected: FORMAT_VERSION.into(),
        });
    }
    if kind != T::KIND {
        return Err(Error::format(path, format!("element kind {kind}, expected {}", T::KIND)));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != h * w * T::SIZE {
        return Err(Error::format(
            path,
            format!("{h}x{w} array needs {} bytes, found {}", h * w * T::SIZE, body.len()),
        ));
    }
    let data = body.chunks_exact(T::SIZE).map(T::read_le).collect();
    Ok(Image { height: h, width: w, data })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `dataset` under `dir` (created if missing) and returns the manifest.
pub fn write_dataset(dataset: &Dataset, dir: &Path, normalization: Option<IntensityStats>) -> Result<DatasetManifest> {
    let first = dataset.samples.first().ok_or(Error::EmptyDataset("cannot write an empty dataset"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        s.validate()?;
        if !s.image.same_shape(&first.image) {
            return Err(Error::Shape(format!("sample {} differs in shape from sample {}", s.id, first.id)));
        }
        let names = [
            format!("{:05}_image.bin", s.id),
            format!("{:05}_liver.bin", s.id),
            format!("{:05}_label.bin", s.id),
        ];
        write_array(&dir.join(&names[0]), &s.image)?;
        write_array(&dir.join(&names[1]), &s.liver_mask)?;
        write_array(&dir.join(&names[2]), &s.label_map)?;
        let [image, liver_mask, label_map] = names;
        records.push(SampleRecord {
            id: s.id,
            subject_id: s.subject_id,
            lesion_class: s.lesion_class,
            image,
            liver_mask,
            label_map,
        });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION.into(),
        kind: dataset.kind,
        height: first.image.height,
        width: first.image.width,
        class_counts: dataset.class_counts(),
        normalization,
        samples: records,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.version != u32::from(FORMAT_VERSION) {
        return Err(Error::Version {
            path,
            found: manifest.version,
            expected: FORMAT_VERSION.into(),
        });
    }
    let total: usize = manifest.class_counts.values().sum();
    if total != manifest.samples.len() {
        return Err(Error::format(
            &path,
            format!("class counts sum to {total} but {} samples are listed", manifest.samples.len()),
        ));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for r in &manifest.samples {
        let file = |name: &str| -> PathBuf { dir.join(name) };
        let sample = Sample {
            id: r.id,
            subject_id: r.subject_id,
            lesion_class: r.lesion_class,
            image: read_array(&file(&r.image))?,
            liver_mask: read_array(&file(&r.liver_mask))?,
            label_map: read_array(&file(&r.label_map))?,
        };
        if sample.image.height != manifest.height || sample.image.width != manifest.width {
            return Err(Error::format(&file(&r.image), "shape differs from the manifest"));
        }
        sample.validate()?;
        samples.push(sample);
    }
    let dataset = Dataset {
        kind: manifest.kind,
        samples,
    };
    Ok((dataset, manifest))
}
