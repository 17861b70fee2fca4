//! Abdominal CT-like phantoms with exact liver and lesion masks.
//!
//! Geometry is expressed for a 96-pixel frame and scaled to `image_size`.
//! Lesion phenotypes carry the usual radiological cues: cysts are dark,
//! homogeneous and sharply circular; hemangiomas have an intermediate
//! interior with a bright, slightly nodular peripheral rim; metastases have
//! an irregular boundary and a speckled, heterogeneous interior.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetKind, Image, LesionClass, Sample, LIVER};
use crate::error::{Error, Result};

pub const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub cysts: usize,
    pub hemangiomas: usize,
    pub metastases: usize,
    pub healthy: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Consecutive slices of one class share a subject (and its anatomy).
    pub slices_per_subject: usize,
    /// Lesions per lesion-bearing slice are drawn from `1..=max_lesions`.
    pub max_lesions: usize,
}

impl Default for SynthSpec {
    /// Sheba composition (75/71/93/93) scaled to 36 slices.
    fn default() -> Self {
        Self {
            cysts: 9,
            hemangiomas: 9,
            metastases: 9,
            healthy: 9,
            image_size: 96,
            seed: 7,
            slices_per_subject: 1,
            max_lesions: 1,
        }
    }
}

impl SynthSpec {
    pub fn counts(cysts: usize, hemangiomas: usize, metastases: usize, healthy: usize) -> Self {
        Self {
            cysts,
            hemangiomas,
            metastases,
            healthy,
            ..Self::default()
        }
    }

    pub fn total(&self) -> usize {
        self.cysts + self.hemangiomas + self.metastases + self.healthy
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 16 and at least 32, got {}",
                self.image_size
            )));
        }
        if self.total() == 0 {
            return Err(Error::Config("synthetic dataset spec has no slices".into()));
        }
        if self.slices_per_subject == 0 || self.max_lesions == 0 {
            return Err(Error::Config("slices_per_subject and max_lesions must be positive".into()));
        }
        Ok(())
    }
}

/// Anatomy shared by every slice of one subject.
struct Subject {
    body: Ellipse,
    liver: Ellipse,
    liver_wobble: [(f64, f64); 2],
    texture: Vec<(f64, f64, f64, f64)>,
    organs: Vec<(Ellipse, f64)>,
    spine: (f64, f64, f64),
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radial coordinate and polar angle of `(y, x)`.
    fn polar(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt(), v.atan2(u))
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        self.polar(y, x).0 <= 1.0
    }
}

struct Lesion {
    class: LesionClass,
    cy: f64,
    cx: f64,
    radius: f64,
    harmonics: [(f64, f64); 2],
}

impl Lesion {
    fn boundary(&self, theta: f64) -> f64 {
        match self.class {
            LesionClass::Metastasis => {
                let [(a1, p1), (a2, p2)] = self.harmonics;
                self.radius * (1.0 + a1 * (3.0 * theta + p1).sin() + a2 * (5.0 * theta + p2).sin())
            }
            _ => self.radius,
        }
    }

    /// Distance from centre and boundary radius in that direction.
    fn locate(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        (dy.hypot(dx), self.boundary(dy.atan2(dx)))
    }

    fn max_extent(&self) -> f64 {
        let [(a1, _), (a2, _)] = self.harmonics;
        match self.class {
            LesionClass::Metastasis => self.radius * (1.0 + a1 + a2),
            _ => self.radius,
        }
    }
}

fn sample_subject(rng: &mut ChaCha8Rng, size: f64) -> Subject {
    let s = size / 96.0;
    let body = Ellipse {
        cy: 48.0 * s + rng.gen_range(-1.5..1.5) * s,
        cx: 48.0 * s + rng.gen_range(-1.5..1.5) * s,
        ry: rng.gen_range(33.0..38.0) * s,
        rx: rng.gen_range(41.0..45.0) * s,
        angle: rng.gen_range(-0.05..0.05),
    };
    let liver = Ellipse {
        cy: rng.gen_range(41.0..47.0) * s,
        cx: rng.gen_range(31.0..36.0) * s,
        ry: rng.gen_range(12.0..15.5) * s,
        rx: rng.gen_range(14.0..18.0) * s,
        angle: rng.gen_range(-0.35..0.35),
    };
    let liver_wobble = [
        (rng.gen_range(0.0..0.05), rng.gen_range(0.0..2.0 * PI)),
        (rng.gen_range(0.0..0.03), rng.gen_range(0.0..2.0 * PI)),
    ];
    let texture = (0..4)
        .map(|_| {
            (
                rng.gen_range(2.0..5.0),
                rng.gen_range(0.05..0.2) / s,
                rng.gen_range(0.0..PI),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut organs = vec![(
        // spleen on the opposite side
        Ellipse {
            cy: rng.gen_range(40.0..50.0) * s,
            cx: rng.gen_range(66.0..72.0) * s,
            ry: rng.gen_range(6.0..9.0) * s,
            rx: rng.gen_range(5.0..8.0) * s,
            angle: rng.gen_range(-0.5..0.5),
        },
        rng.gen_range(45.0..60.0),
    )];
    for _ in 0..rng.gen_range(1..=3) {
        organs.push((
            Ellipse {
                cy: rng.gen_range(58.0..72.0) * s,
                cx: rng.gen_range(40.0..70.0) * s,
                ry: rng.gen_range(3.0..6.0) * s,
                rx: rng.gen_range(3.0..7.0) * s,
                angle: rng.gen_range(-1.0..1.0),
            },
            rng.gen_range(20.0..70.0),
        ));
    }
    let spine = (rng.gen_range(72.0..76.0) * s, rng.gen_range(46.0..50.0) * s, rng.gen_range(4.0..5.5) * s);
    Subject {
        body,
        liver,
        liver_wobble,
        texture,
        organs,
        spine,
    }
}

fn in_liver(subject: &Subject, liver: &Ellipse, y: f64, x: f64) -> bool {
    let (r, theta) = liver.polar(y, x);
    let [(a1, p1), (a2, p2)] = subject.liver_wobble;
    r <= 1.0 + a1 * (2.0 * theta + p1).sin() + a2 * (4.0 * theta + p2).sin()
}

fn place_lesion(
    rng: &mut ChaCha8Rng,
    class: LesionClass,
    liver_mask: &Image<u8>,
    taken: &[Lesion],
    s: f64,
) -> Result<Lesion> {
    let (h, w) = (liver_mask.height, liver_mask.width);
    let (ymin, ymax, xmin, xmax) = bbox(liver_mask).ok_or(Error::LesionPlacement(0))?;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let radius = match class {
            LesionClass::Cyst => rng.gen_range(3.5..6.5),
            LesionClass::Hemangioma => rng.gen_range(4.5..7.5),
            LesionClass::Metastasis => rng.gen_range(4.0..7.0),
        } * s;
        let lesion = Lesion {
            class,
            cy: rng.gen_range(ymin as f64..=ymax as f64),
            cx: rng.gen_range(xmin as f64..=xmax as f64),
            radius,
            harmonics: [
                (rng.gen_range(0.12..0.25), rng.gen_range(0.0..2.0 * PI)),
                (rng.gen_range(0.05..0.15), rng.gen_range(0.0..2.0 * PI)),
            ],
        };
        let reach = lesion.max_extent() + 1.5;
        let y0 = (lesion.cy - reach).floor() as isize;
        let y1 = (lesion.cy + reach).ceil() as isize;
        let x0 = (lesion.cx - reach).floor() as isize;
        let x1 = (lesion.cx + reach).ceil() as isize;
        if y0 < 0 || x0 < 0 || y1 >= h as isize || x1 >= w as isize {
            continue;
        }
        // every pixel within one pixel of the lesion must be liver
        let fits = (y0..=y1).all(|y| {
            (x0..=x1).all(|x| {
                let (d, b) = lesion.locate(y as f64, x as f64);
                d > b + 1.0 || liver_mask.get(y as usize, x as usize) == 1
            })
        });
        let separate = taken
            .iter()
            .all(|o| (o.cy - lesion.cy).hypot(o.cx - lesion.cx) > o.max_extent() + lesion.max_extent() + 2.0);
        if fits && separate {
            return Ok(lesion);
        }
    }
    Err(Error::LesionPlacement(PLACEMENT_ATTEMPTS))
}

fn bbox(mask: &Image<u8>) -> Option<(usize, usize, usize, usize)> {
    let mut out: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) != 0 {
                out = Some(match out {
                    None => (y, y, x, x),
                    Some((a, b, c, d)) => (a.min(y), b.max(y), c.min(x), d.max(x)),
                });
            }
        }
    }
    out
}

fn render_slice(
    rng: &mut ChaCha8Rng,
    subject: &Subject,
    class: Option<LesionClass>,
    size: usize,
    max_lesions: usize,
) -> Result<(Image<f32>, Image<u8>, Image<u8>)> {
    let s = size as f64 / 96.0;
    // per-slice jitter of the shared anatomy
    let mut liver = subject.liver;
    liver.ry *= rng.gen_range(0.92..1.08);
    liver.rx *= rng.gen_range(0.92..1.08);
    liver.cy += rng.gen_range(-1.5..1.5) * s;
    liver.cx += rng.gen_range(-1.5..1.5) * s;

    let mut liver_mask = Image::filled(size, size, 0u8);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if subject.body.contains(py, px) && in_liver(subject, &liver, py, px) {
                liver_mask.set(y, x, 1);
            }
        }
    }

    let mut lesions: Vec<Lesion> = Vec::new();
    if let Some(c) = class {
        let n = rng.gen_range(1..=max_lesions);
        for _ in 0..n {
            let lesion = place_lesion(rng, c, &liver_mask, &lesions, s)?;
            lesions.push(lesion);
        }
    }

    let noise = Normal::new(0.0, 8.0).expect("finite std");
    let mut image = Image::filled(size, size, -1000.0f32);
    let mut labels = Image::filled(size, size, 0u8);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let (rb, _) = subject.body.polar(py, px);
            let mut hu = if rb > 1.0 {
                -1000.0
            } else if rb > 0.92 {
                -100.0 // subcutaneous fat
            } else {
                let mut v = 40.0;
                for (organ, level) in &subject.organs {
                    if organ.contains(py, px) {
                        v = *level;
                    }
                }
                let (sy, sx, sr) = subject.spine;
                if (py - sy).hypot(px - sx) <= sr {
                    v = 450.0;
                }
                v
            };
            if liver_mask.get(y, x) == 1 {
                labels.set(y, x, LIVER);
                hu = 100.0
                    + subject
                        .texture
                        .iter()
                        .map(|&(amp, freq, dir, phase)| {
                            amp * (freq * (py * dir.sin() + px * dir.cos()) + phase).sin()
                        })
                        .sum::<f64>();
                for lesion in &lesions {
                    let (d, b) = lesion.locate(py, px);
                    if d > b {
                        continue;
                    }
                    labels.set(y, x, lesion.class.label());
                    hu = match lesion.class {
                        LesionClass::Cyst => 5.0,
                        LesionClass::Hemangioma => {
                            let rim = 1.8 * s;
                            if d >= b - rim {
                                let theta = (py - lesion.cy).atan2(px - lesion.cx);
                                175.0 + 25.0 * (6.0 * theta + lesion.harmonics[0].1).cos()
                            } else {
                                65.0
                            }
                        }
                        LesionClass::Metastasis => 45.0 + rng.gen_range(-40.0..40.0),
                    };
                }
            }
            if rb <= 1.0 {
                hu += noise.sample(rng);
            }
            image.set(y, x, hu as f32);
        }
    }
    Ok((image, liver_mask, labels))
}

/// Generate a dataset; a pure function of `spec`.
pub fn synth_generate(spec: &SynthSpec, kind: DatasetKind) -> Result<Dataset> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let plan = [
        (Some(LesionClass::Cyst), spec.cysts),
        (Some(LesionClass::Hemangioma), spec.hemangiomas),
        (Some(LesionClass::Metastasis), spec.metastases),
        (None, spec.healthy),
    ];
    let mut samples = Vec::with_capacity(spec.total());
    let mut subject_id = 0u32;
    for (class, count) in plan {
        let mut remaining = count;
        while remaining > 0 {
            let n = remaining.min(spec.slices_per_subject);
            let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
            let subject = sample_subject(&mut rng, spec.image_size as f64);
            for _ in 0..n {
                let (image, liver_mask, label_map) =
                    render_slice(&mut rng, &subject, class, spec.image_size, spec.max_lesions)?;
                samples.push(Sample {
                    id: samples.len() as u32,
                    subject_id,
                    lesion_class: class,
                    image,
                    liver_mask,
                    label_map,
                });
            }
            remaining -= n;
            subject_id += 1;
        }
    }
    Ok(Dataset { kind, samples })
}
