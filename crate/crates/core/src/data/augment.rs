//! Online augmentation. Every draw is a pure function of
//! `(seed, sample id, epoch)`, so reruns and resumed runs see identical inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Rotation drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Zoom factor drawn from `1 ± zoom`.
    pub zoom: f64,
    /// Translation drawn from `±shift` of each extent.
    pub shift: f64,
    pub flip_prob: f64,
    /// Upper bound of the additive Gaussian noise std, in standardized units.
    pub noise_std: f64,
    /// Multiplicative intensity factor drawn from `1 ± intensity_scale`.
    pub intensity_scale: f64,
    /// Additive intensity offset drawn from `±intensity_shift`.
    pub intensity_shift: f64,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            zoom: 0.1,
            shift: 0.1,
            flip_prob: 0.5,
            noise_std: 0.05,
            intensity_scale: 0.1,
            intensity_shift: 0.1,
            seed: 0,
        }
    }
}

impl AugConfig {
    /// No-op augmentation.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            zoom: 0.0,
            shift: 0.0,
            flip_prob: 0.0,
            noise_std: 0.0,
            intensity_scale: 0.0,
            intensity_shift: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_deg", self.rotation_deg, 180.0),
            ("zoom", self.zoom, 0.9),
            ("shift", self.shift, 0.5),
            ("flip_prob", self.flip_prob, 1.0),
            ("noise_std", self.noise_std, 10.0),
            ("intensity_scale", self.intensity_scale, 0.9),
            ("intensity_shift", self.intensity_shift, 10.0),
        ];
        for (name, v, max) in ranges {
            if !(0.0..=max).contains(&v) {
                return Err(Error::Config(format!("augmentation `{name}` = {v} outside [0, {max}]")));
            }
        }
        Ok(())
    }
}

/// The concrete transform drawn for one `(sample, epoch)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugDraw {
    pub angle: f64,
    pub zoom: f64,
    pub shift_y: f64,
    pub shift_x: f64,
    pub flip: bool,
    pub noise_std: f64,
    pub scale: f64,
    pub offset: f64,
    noise_seed: u64,
}

impl AugDraw {
    pub fn draw(cfg: &AugConfig, sample_id: u32, epoch: u32) -> Self {
        let key = cfg.seed ^ (u64::from(sample_id) << 32 | u64::from(epoch)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut sym = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let angle = sym(cfg.rotation_deg).to_radians();
        let zoom = 1.0 + sym(cfg.zoom);
        let shift_y = sym(cfg.shift);
        let shift_x = sym(cfg.shift);
        let scale = 1.0 + sym(cfg.intensity_scale);
        let offset = sym(cfg.intensity_shift);
        let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
        let noise_std = if cfg.noise_std > 0.0 {
            rng.gen_range(0.0..=cfg.noise_std)
        } else {
            0.0
        };
        Self {
            angle,
            zoom,
            shift_y,
            shift_x,
            flip,
            noise_std,
            scale,
            offset,
            noise_seed: rng.gen(),
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.angle == 0.0 && self.zoom == 1.0 && self.shift_x == 0.0 && self.shift_y == 0.0 && !self.flip
    }

    /// Source coordinate sampled for output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let x = if self.flip { (w - 1 - x) as f64 } else { x as f64 };
        let dy = y as f64 - cy - self.shift_y * h as f64;
        let dx = x - cx - self.shift_x * w as f64;
        let (s, c) = self.angle.sin_cos();
        let sy = (c * dy - s * dx) / self.zoom;
        let sx = (s * dy + c * dx) / self.zoom;
        (cy + sy, cx + sx)
    }
}

/// Augmented copies of a standardized image and its masks. The same
/// geometric transform is applied to all three; masks use nearest-neighbour
/// sampling and out-of-frame pixels become `fill` / `0`.
pub fn augment(
    image: &Image<f32>,
    masks: &[&Image<u8>],
    cfg: &AugConfig,
    sample_id: u32,
    epoch: u32,
    fill: f32,
) -> (Image<f32>, Vec<Image<u8>>) {
    let d = AugDraw::draw(cfg, sample_id, epoch);
    let (h, w) = (image.height, image.width);
    let (mut img, out_masks) = if d.is_geometric_identity() {
        (image.clone(), masks.iter().map(|m| (*m).clone()).collect())
    } else {
        let mut img = Image::filled(h, w, fill);
        let mut out: Vec<Image<u8>> = masks.iter().map(|_| Image::filled(h, w, 0)).collect();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = d.source(y, x, h, w);
                img.set(y, x, bilinear(image, sy, sx, fill));
                let (ny, nx) = (sy.round(), sx.round());
                if ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 {
                    for (o, m) in out.iter_mut().zip(masks) {
                        o.set(y, x, m.get(ny as usize, nx as usize));
                    }
                }
            }
        }
        (img, out)
    };
    if d.scale != 1.0 || d.offset != 0.0 {
        let (scale, offset) = (d.scale as f32, d.offset as f32);
        img.data.iter_mut().for_each(|v| *v = *v * scale + offset);
    }
    if d.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(d.noise_seed);
        let normal = Normal::new(0.0, d.noise_std).expect("finite std");
        img.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
    }
    (img, out_masks)
}

fn bilinear(img: &Image<f32>, y: f64, x: f64, fill: f32) -> f32 {
    let (h, w) = (img.height as isize, img.width as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            fill
        } else {
            img.data[(yy * w + xx) as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1, x0 + 1) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthSpec};
    use crate::data::DatasetKind;

    fn ramp(h: usize, w: usize) -> Image<f32> {
        Image::from_vec(h, w, (0..h * w).map(|i| i as f32 * 0.1).collect()).unwrap()
    }

    #[test]
    fn identity_config_leaves_sample_unchanged() {
        let img = ramp(8, 6);
        let mask = Image::from_vec(8, 6, (0..48).map(|i| (i % 5) as u8).collect()).unwrap();
        let (out, masks) = augment(&img, &[&mask], &AugConfig::identity(), 3, 9, -5.0);
        assert_eq!(out, img);
        assert_eq!(masks[0], mask);
    }

    #[test]
    fn double_flip_restores_masks() {
        let cfg = AugConfig {
            flip_prob: 1.0,
            ..AugConfig::identity()
        };
        let mask = Image::from_vec(4, 5, (0..20).map(|i| (i % 5) as u8).collect()).unwrap();
        let (img, once) = augment(&ramp(4, 5), &[&mask], &cfg, 0, 0, 0.0);
        assert_ne!(once[0], mask);
        let (img2, twice) = augment(&img, &[&once[0]], &cfg, 0, 0, 0.0);
        assert_eq!(twice[0], mask);
        assert_eq!(img2, ramp(4, 5));
    }

    #[test]
    fn same_key_same_output_and_epochs_differ() {
        let cfg = AugConfig::default();
        let img = ramp(16, 16);
        let mask = Image::filled(16, 16, 1u8);
        let a = augment(&img, &[&mask], &cfg, 4, 2, 0.0);
        let b = augment(&img, &[&mask], &cfg, 4, 2, 0.0);
        let c = augment(&img, &[&mask], &cfg, 4, 3, 0.0);
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn labels_stay_in_domain_and_lesions_stay_in_liver() {
        let ds = synth_generate(&SynthSpec::counts(2, 2, 2, 1), DatasetKind::Target).unwrap();
        let cfg = AugConfig::default();
        for epoch in 0..15 {
            for s in &ds.samples {
                let (_, m) = augment(&s.image, &[&s.label_map, &s.liver_mask], &cfg, s.id, epoch, -1000.0);
                for (&l, &liver) in m[0].data.iter().zip(&m[1].data) {
                    assert!(l <= 4);
                    assert!(l == 0 || liver == 1);
                }
            }
        }
    }

    #[test]
    fn validate_rejects_out_of_range() {
        assert!(AugConfig::default().validate().is_ok());
        assert!(AugConfig { flip_prob: 1.5, ..AugConfig::default() }.validate().is_err());
        assert!(AugConfig { zoom: -0.1, ..AugConfig::default() }.validate().is_err());
    }
}
