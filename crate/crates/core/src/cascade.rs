//! Two-stage inference and training: a liver network localizes the organ, a
//! lesion network segments and classifies inside the liver region.

use std::collections::{BTreeMap, VecDeque};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{hu_window, liver_intensity_stats, make_folds, standardize, Dataset, Image, IntensityStats, LabelScheme, LesionClass, Sample, CYST};
use crate::error::{Error, Result};
use crate::metrics::majority_lesion_class;
use crate::schedule::{build_schedule, predict_labels, run_schedule, Example, FreezeStyle, PhaseBudget, Protocol, ScheduleOutcome, TrainOptions, TrainSet};
use crate::unet::{UNet, UNetConfig};

/// Box sides are padded to multiples of this.
pub const ROI_MULTIPLE: usize = 16;
pub const DEFAULT_MARGIN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub margin: usize,
}

impl RoiBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
            margin: 0,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn crop<T: Copy>(&self, img: &Image<T>) -> Image<T> {
        img.crop(self.top, self.left, self.height, self.width)
    }
}

/// Inclusive bounding box `(ymin, ymax, xmin, xmax)` of the non-zero pixels.
pub fn bounding_box(mask: &Image<u8>) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) != 0 {
                bb = Some(match bb {
                    None => (y, y, x, x),
                    Some((a, b, c, d)) => (a.min(y), b.max(y), c.min(x), d.max(x)),
                });
            }
        }
    }
    bb
}

/// Grow `[lo, hi)` to a multiple of [`ROI_MULTIPLE`], extending past `hi`
/// first and shifting back when that leaves `[0, extent)`.
fn pad_span(lo: usize, hi: usize, extent: usize) -> (usize, usize) {
    let len = (hi - lo).div_ceil(ROI_MULTIPLE) * ROI_MULTIPLE;
    if len >= extent {
        return (0, extent);
    }
    let start = if lo + len > extent { extent - len } else { lo };
    (start, len)
}

fn roi_from_bbox(bb: (usize, usize, usize, usize), margin: usize, h: usize, w: usize) -> RoiBox {
    let (ymin, ymax, xmin, xmax) = bb;
    let (top, height) = pad_span(ymin.saturating_sub(margin), (ymax + 1 + margin).min(h), h);
    let (left, width) = pad_span(xmin.saturating_sub(margin), (xmax + 1 + margin).min(w), w);
    RoiBox {
        top,
        left,
        height,
        width,
        margin,
    }
}

/// Tight box around the liver, grown by `margin`, clipped to the image and
/// padded to multiples of 16. An empty mask yields the whole image.
pub fn extract_roi(mask: &Image<u8>, margin: usize) -> RoiBox {
    match bounding_box(mask) {
        Some(bb) => roi_from_bbox(bb, margin, mask.height, mask.width),
        None => {
            warn!("empty liver mask; using the full image as region of interest");
            RoiBox::full(mask.height, mask.width)
        }
    }
}

/// One box covering the liver on every slice of a subject.
pub fn union_roi(masks: &[&Image<u8>], margin: usize) -> Result<RoiBox> {
    let first = masks.first().ok_or(Error::EmptyDataset("no slices for region of interest"))?;
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for m in masks {
        if !m.same_shape(first) {
            return Err(Error::Shape("subject slices differ in shape".into()));
        }
        if let Some((a, b, c, d)) = bounding_box(m) {
            bb = Some(match bb {
                None => (a, b, c, d),
                Some((p, q, r, s)) => (p.min(a), q.max(b), r.min(c), s.max(d)),
            });
        }
    }
    Ok(match bb {
        Some(bb) => roi_from_bbox(bb, margin, first.height, first.width),
        None => {
            warn!("empty liver masks; using the full image as region of interest");
            RoiBox::full(first.height, first.width)
        }
    })
}

/// Fixed-size window centred on `roi` and shifted to stay inside the image.
pub fn fit_box(roi: &RoiBox, height: usize, width: usize, image_h: usize, image_w: usize) -> Result<RoiBox> {
    if height > image_h || width > image_w {
        return Err(Error::Shape(format!("{height}x{width} window exceeds {image_h}x{image_w} image")));
    }
    let place = |start: usize, len: usize, want: usize, extent: usize| {
        let centre2 = 2 * start + len;
        let lo = centre2.saturating_sub(want) / 2;
        lo.min(extent - want)
    };
    Ok(RoiBox {
        top: place(roi.top, roi.height, height, image_h),
        left: place(roi.left, roi.width, width, image_w),
        height,
        width,
        margin: roi.margin,
    })
}

/// Keeps the largest fully-connected component of a `[depth, height, width]`
/// binary volume (8-connectivity within a slice, 26 across slices). Ties go
/// to the component reached first in raster order.
pub fn largest_component(data: &[u8], dims: [usize; 3]) -> Vec<u8> {
    let [d, h, w] = dims;
    assert_eq!(data.len(), d * h * w);
    let mut label = vec![0u32; data.len()];
    let (mut best, mut best_size, mut next) = (0u32, 0usize, 0u32);
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), i / w % h, i % w);
            for nz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let j = (nz * h + ny) * w + nx;
                        if data[j] != 0 && label[j] == 0 {
                            label[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        if size > best_size {
            best = next;
            best_size = size;
        }
    }
    label.iter().map(|&l| u8::from(l != 0 && l == best)).collect()
}

/// Largest 8-connected component of a 2-D mask.
pub fn refine_liver_mask(mask: &Image<u8>) -> Image<u8> {
    Image {
        height: mask.height,
        width: mask.width,
        data: largest_component(&mask.data, [1, mask.height, mask.width]),
    }
}

/// Largest 26-connected component of a stack of slices.
pub fn refine_liver_volume(slices: &[Image<u8>]) -> Result<Vec<Image<u8>>> {
    let Some(first) = slices.first() else { return Ok(Vec::new()) };
    if slices.iter().any(|s| !s.same_shape(first)) {
        return Err(Error::Shape("volume slices differ in shape".into()));
    }
    let (h, w) = (first.height, first.width);
    let data: Vec<u8> = slices.iter().flat_map(|s| s.data.iter().copied()).collect();
    let kept = largest_component(&data, [slices.len(), h, w]);
    Ok(kept
        .chunks_exact(h * w)
        .map(|c| Image {
            height: h,
            width: w,
            data: c.to_vec(),
        })
        .collect())
}

/// Windowed and standardized network input.
pub fn prepare_image(image: &Image<f32>, stats: IntensityStats) -> Result<Image<f32>> {
    standardize(&hu_window(image), stats)
}

fn map_labels(labels: &Image<u8>, scheme: LabelScheme) -> Image<u8> {
    Image {
        height: labels.height,
        width: labels.width,
        data: labels.data.iter().map(|&l| scheme.map(l)).collect(),
    }
}

/// Full-frame examples for the liver network.
pub fn liver_examples(samples: &[&Sample], stats: IntensityStats) -> Result<TrainSet> {
    let ex = samples
        .iter()
        .map(|s| {
            Ok(Example {
                id: s.id,
                image: prepare_image(&s.image, stats)?,
                target: map_labels(&s.label_map, LabelScheme::Liver),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrainSet::new(ex, 2)
}

/// Geometry of the lesion-stage crops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub margin: usize,
    /// Side of the square window fed to the lesion network.
    pub crop_size: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            crop_size: 80,
        }
    }
}

impl CropConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.crop_size == 0 || self.crop_size % ROI_MULTIPLE != 0 || self.crop_size > image_size {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of {ROI_MULTIPLE} no larger than the image ({image_size})",
                self.crop_size
            )));
        }
        Ok(())
    }

    /// Window of `crop_size` centred on the ROI; a larger ROI is cut to it.
    pub fn window(&self, roi: &RoiBox, image_h: usize, image_w: usize) -> Result<RoiBox> {
        if roi.height > self.crop_size || roi.width > self.crop_size {
            warn!(
                "liver region {}x{} exceeds the {} crop; cropping the region",
                roi.height, roi.width, self.crop_size
            );
        }
        fit_box(roi, self.crop_size, self.crop_size, image_h, image_w)
    }
}

/// Lesion-stage crops around each subject's ground-truth liver region.
pub fn lesion_examples(samples: &[&Sample], stats: IntensityStats, scheme: LabelScheme, crop: CropConfig) -> Result<TrainSet> {
    let mut by_subject: BTreeMap<u32, Vec<&Image<u8>>> = BTreeMap::new();
    for s in samples {
        by_subject.entry(s.subject_id).or_default().push(&s.liver_mask);
    }
    let mut rois = BTreeMap::new();
    for (subject, masks) in &by_subject {
        rois.insert(*subject, union_roi(masks, crop.margin)?);
    }
    let ex = samples
        .iter()
        .map(|s| {
            let win = crop.window(&rois[&s.subject_id], s.image.height, s.image.width)?;
            Ok(Example {
                id: s.id,
                image: win.crop(&prepare_image(&s.image, stats)?),
                target: win.crop(&map_labels(&s.label_map, scheme)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrainSet::new(ex, scheme.num_classes())
}

/// Splits `indices` of `dataset` into `(train, validation)` by subject, with
/// roughly `1 / k` of the subjects held out.
pub fn split_validation(dataset: &Dataset, indices: &[usize], k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let sub = Dataset {
        kind: dataset.kind,
        samples: indices.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    let split = make_folds(&sub, k, seed)?;
    let val_local = split.test_indices(&sub, 0)?;
    let train_local = split.train_indices(&sub, 0)?;
    Ok((
        train_local.iter().map(|&i| indices[i]).collect(),
        val_local.iter().map(|&i| indices[i]).collect(),
    ))
}

/// Model, budget and optimizer options of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub model: UNetConfig,
    pub budget: PhaseBudget,
    pub train: TrainOptions,
    /// One in `validation_folds` subjects is held out for early stopping.
    pub validation_folds: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::default(),
            budget: PhaseBudget {
                lr0: 1e-4,
                max_epochs: 20,
                patience: 5,
            },
            train: TrainOptions::default(),
            validation_folds: 10,
        }
    }
}

/// A trained network with the intensity statistics its inputs were standardized with.
#[derive(Clone, Debug)]
pub struct TrainedStage {
    pub model: UNet<f32>,
    pub stats: IntensityStats,
    pub outcome: ScheduleOutcome,
}

fn all_indices(dataset: &Dataset) -> Vec<usize> {
    (0..dataset.len()).collect()
}

fn pick<'a>(dataset: &'a Dataset, idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &dataset.samples[i]).collect()
}

/// Liver localization network on full frames, background vs liver (lesions count as liver).
pub fn train_liver_fcn(pretrain: &Dataset, cfg: &StageConfig) -> Result<TrainedStage> {
    let (tr, va) = split_validation(pretrain, &all_indices(pretrain), cfg.validation_folds, cfg.train.seed)?;
    let (tr, va) = (pick(pretrain, &tr), pick(pretrain, &va));
    let stats = liver_intensity_stats(tr.iter().copied())?;
    let mut model = UNet::new(UNetConfig {
        num_classes: 2,
        ..cfg.model.clone()
    })?;
    let schedule = build_schedule(Protocol::Naive, model.config().encoder_blocks, cfg.budget, FreezeStyle::Cumulative)?;
    let outcome = run_schedule(&mut model, &liver_examples(&tr, stats)?, &liver_examples(&va, stats)?, &schedule, &cfg.train)?;
    Ok(TrainedStage { model, stats, outcome })
}

/// Background / liver / lesion network on liver crops; the transfer source.
pub fn train_lesion_fcn(pretrain: &Dataset, cfg: &StageConfig, crop: CropConfig) -> Result<TrainedStage> {
    let (tr, va) = split_validation(pretrain, &all_indices(pretrain), cfg.validation_folds, cfg.train.seed)?;
    let (tr, va) = (pick(pretrain, &tr), pick(pretrain, &va));
    let stats = liver_intensity_stats(tr.iter().copied())?;
    let mut model = UNet::new(UNetConfig {
        num_classes: 3,
        ..cfg.model.clone()
    })?;
    let schedule = build_schedule(Protocol::Naive, model.config().encoder_blocks, cfg.budget, FreezeStyle::Cumulative)?;
    let scheme = LabelScheme::Segmentation;
    let outcome = run_schedule(
        &mut model,
        &lesion_examples(&tr, stats, scheme, crop)?,
        &lesion_examples(&va, stats, scheme, crop)?,
        &schedule,
        &cfg.train,
    )?;
    Ok(TrainedStage { model, stats, outcome })
}

/// Five-class lesion classifier. Transfer protocols start from `pretrained`
/// with its head widened to five classes; `baseline` starts from a random
/// initialization of the same architecture.
pub fn finetune_lesion_classifier(
    pretrained: &UNet<f32>,
    train: &TrainSet,
    val: &TrainSet,
    protocol: Protocol,
    budget: PhaseBudget,
    style: FreezeStyle,
    opts: &TrainOptions,
) -> Result<(UNet<f32>, ScheduleOutcome)> {
    let mut model = if protocol.transfers_weights() {
        let mut m = pretrained.clone();
        m.swap_head(5, opts.seed)?;
        m
    } else {
        UNet::new(UNetConfig {
            num_classes: 5,
            seed: opts.seed,
            ..pretrained.config().clone()
        })?
    };
    let schedule = build_schedule(protocol, model.config().encoder_blocks, budget, style)?;
    let outcome = run_schedule(&mut model, train, val, &schedule, opts)?;
    Ok((model, outcome))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutput {
    #[serde(skip)]
    pub liver_mask: Image<u8>,
    /// Five-class labels, or `{0, 1, 2}` for a segmentation lesion model.
    #[serde(skip)]
    pub label_map: Image<u8>,
    pub roi: RoiBox,
    pub majority_class: Option<LesionClass>,
}

/// The two networks of the cascade and their input statistics.
#[derive(Clone, Debug)]
pub struct Cascade {
    pub liver: UNet<f32>,
    pub liver_stats: IntensityStats,
    pub lesion: UNet<f32>,
    pub lesion_stats: IntensityStats,
    pub crop: CropConfig,
}

impl Cascade {
    /// Runs all slices of one subject: liver masks are refined as a volume
    /// and share one region of interest.
    pub fn run_subject(&self, images: &[&Image<f32>]) -> Result<Vec<CascadeOutput>> {
        let first = images.first().ok_or(Error::EmptyDataset("no slices to segment"))?;
        let (h, w) = (first.height, first.width);
        let inputs = images
            .iter()
            .map(|img| prepare_image(img, self.liver_stats))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image<f32>> = inputs.iter().collect();
        let livers = refine_liver_volume(&predict_labels(&self.liver, &refs, 4)?)?;
        let masks: Vec<&Image<u8>> = livers.iter().collect();
        let roi = union_roi(&masks, self.crop.margin)?;
        let win = self.crop.window(&roi, h, w)?;
        let crops = images
            .iter()
            .map(|img| Ok(win.crop(&prepare_image(img, self.lesion_stats)?)))
            .collect::<Result<Vec<_>>>()?;
        let crop_refs: Vec<&Image<f32>> = crops.iter().collect();
        let lesion_maps = predict_labels(&self.lesion, &crop_refs, 4)?;
        Ok(livers
            .into_iter()
            .zip(lesion_maps)
            .map(|(liver_mask, pred)| {
                let mut label_map = liver_mask.clone();
                for y in 0..win.height {
                    for x in 0..win.width {
                        let (fy, fx) = (win.top + y, win.left + x);
                        if roi.contains(fy, fx) {
                            label_map.set(fy, fx, pred.get(y, x));
                        }
                    }
                }
                let majority_class = majority_lesion_class(&label_map);
                CascadeOutput {
                    liver_mask,
                    label_map,
                    roi,
                    majority_class,
                }
            })
            .collect())
    }

    pub fn run(&self, image: &Image<f32>) -> Result<CascadeOutput> {
        Ok(self.run_subject(&[image])?.remove(0))
    }
}

/// Runs [`Cascade::run_subject`] over every subject of `samples`, returning
/// outputs in input order.
pub fn run_cascade(cascade: &Cascade, samples: &[&Sample]) -> Result<Vec<CascadeOutput>> {
    let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_subject.entry(s.subject_id).or_default().push(i);
    }
    let mut out: Vec<Option<CascadeOutput>> = vec![None; samples.len()];
    for idx in by_subject.values() {
        let images: Vec<&Image<f32>> = idx.iter().map(|&i| &samples[i].image).collect();
        for (&i, o) in idx.iter().zip(cascade.run_subject(&images)?) {
            out[i] = Some(o);
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every sample visited")).collect())
}

/// Whether `label` is a lesion label in either label space.
pub fn is_lesion(label: u8) -> bool {
    label >= CYST
}
