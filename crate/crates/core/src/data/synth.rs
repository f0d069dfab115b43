//! Procedural camouflage scenes.
//!
//! The background is smooth value noise around a random base colour. An object
//! of class `k` reuses that noise field, mixed with a class-specific oriented
//! grating, and is shifted by a class colour scaled by `1 − similarity`. At
//! similarity 1 the object shares the background's mean and variance, so only
//! the grating (which the references exhibit) tells the classes apart.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refcod_tensor::Tensor;

use super::{DataError, Reference, Sample};
use crate::config::{ObjectCount, SynthConfig};

/// Standard deviation of the luminance texture.
const TEXTURE_STD: f64 = 0.1;
/// Share of object variance carried by the class grating.
const GRATING_SHARE: f64 = 0.7;
/// Upper bound on the summed harmonic amplitudes of a blob outline.
const OUTLINE_WOBBLE: f64 = 0.3;
/// Radius multiplier for blobs in multi-object scenes.
const MULTI_SCALE: f64 = 0.7;
const PLACEMENT_TRIES: usize = 2000;

/// Texture parameters of one object class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureClass {
    pub orientation: f64,
    pub period: f64,
    pub colour: [f64; 3],
}

/// Class textures depend only on the class index and count, so they agree
/// across datasets generated with different seeds.
pub fn class_texture(class: usize, num_classes: usize) -> TextureClass {
    let phase = 2.0 * PI * class as f64 / num_classes as f64;
    TextureClass {
        orientation: PI * class as f64 / num_classes as f64,
        period: 5.0 + 1.5 * (class % 3) as f64,
        colour: [0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0].map(|shift| 0.3 * (phase + shift).cos()),
    }
}

/// A closed star-shaped outline `r(θ) = r0 · (1 + Σ a_j cos(jθ + φ_j))`.
#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn bound(&self) -> f64 {
        self.r0 * (1.0 + self.harmonics.iter().map(|h| h.0).sum::<f64>())
    }

    /// Pixel centres inside the outline.
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let theta = dy.atan2(dx);
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(j, &(a, phi))| a * ((j + 2) as f64 * theta + phi).cos())
            .sum();
        dx.hypot(dy) <= self.r0 * (1.0 + wobble)
    }
}

fn random_outline<R: Rng + ?Sized>(rng: &mut R) -> [(f64, f64); 3] {
    std::array::from_fn(|_| {
        (
            rng.random_range(0.0..OUTLINE_WOBBLE / 3.0),
            rng.random_range(0.0..2.0 * PI),
        )
    })
}

/// Places blobs with the given base radii so that no two bounding discs come
/// within two pixels of each other and every disc stays inside the image.
fn place_blobs<R: Rng + ?Sized>(
    radii: &[f64],
    size: usize,
    rng: &mut R,
) -> Result<Vec<Blob>, DataError> {
    let size = size as f64;
    for _ in 0..PLACEMENT_TRIES {
        let mut blobs: Vec<Blob> = Vec::with_capacity(radii.len());
        for &r0 in radii {
            let harmonics = random_outline(rng);
            let reach = r0 * (1.0 + harmonics.iter().map(|h| h.0).sum::<f64>()) + 1.0;
            let cx = rng.random_range(reach..=size - reach);
            let cy = rng.random_range(reach..=size - reach);
            let blob = Blob {
                cx,
                cy,
                r0,
                harmonics,
            };
            if blobs
                .iter()
                .all(|b| (b.cx - cx).hypot(b.cy - cy) > b.bound() + blob.bound() + 2.0)
            {
                blobs.push(blob);
            } else {
                break;
            }
        }
        if blobs.len() == radii.len() {
            return Ok(blobs);
        }
    }
    Err(DataError::Geometry(format!(
        "could not place {} objects with radii {radii:?} in a {size}px image",
        radii.len()
    )))
}

/// Smooth value noise: bilinear-smoothstep interpolation of random lattice
/// values at two octaves, standardised to zero mean and unit variance.
fn value_noise<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<f64> {
    let mut field = vec![0.0; size * size];
    for (cell, weight) in [(8usize, 1.0), (4usize, 0.5)] {
        let nodes = size / cell + 2;
        let lattice: Vec<f64> = (0..nodes * nodes)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..size {
            let gy = y as f64 / cell as f64;
            let (y0, ty) = (gy.floor() as usize, smooth(gy.fract()));
            for x in 0..size {
                let gx = x as f64 / cell as f64;
                let (x0, tx) = (gx.floor() as usize, smooth(gx.fract()));
                let at = |i: usize, j: usize| lattice[i * nodes + j];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                field[y * size + x] += weight * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    field.iter_mut().for_each(|v| *v = (*v - mean) / std);
    field
}

/// Renders a scene: `objects[i] = (class, blob)`. Returns the `[3, H, W]`
/// image and, per object, the set of covered pixel indices.
fn render<R: Rng + ?Sized>(
    size: usize,
    objects: &[(usize, Blob)],
    cfg: &SynthConfig,
    rng: &mut R,
) -> (Tensor, Vec<Vec<usize>>) {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let noise = value_noise(size, rng);
    let phases: Vec<f64> = objects
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let plane = size * size;
    let mut image = vec![0.0; 3 * plane];
    for (p, &n) in noise.iter().enumerate() {
        for c in 0..3 {
            image[c * plane + p] = base[c] + TEXTURE_STD * n;
        }
    }
    let mut covered = Vec::with_capacity(objects.len());
    for ((class, blob), phase) in objects.iter().zip(&phases) {
        let tex = class_texture(*class, cfg.num_classes);
        let (sin, cos) = tex.orientation.sin_cos();
        let freq = 2.0 * PI / tex.period;
        let mut pixels = Vec::new();
        for y in 0..size {
            for x in 0..size {
                if !blob.contains(x, y) {
                    continue;
                }
                let p = y * size + x;
                let grating = (freq * (x as f64 * cos + y as f64 * sin) + phase).sin();
                let texture = (1.0 - GRATING_SHARE.powi(2)).sqrt() * noise[p]
                    + GRATING_SHARE * 2f64.sqrt() * grating;
                for c in 0..3 {
                    image[c * plane + p] =
                        base[c] + (1.0 - cfg.similarity) * tex.colour[c] + TEXTURE_STD * texture;
                }
                pixels.push(p);
            }
        }
        covered.push(pixels);
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    (Tensor::from_vec(&[3, size, size], image), covered)
}

fn mask_of(size: usize, pixels: &[&Vec<usize>]) -> Tensor {
    let mut mask = vec![0.0; size * size];
    for p in pixels.iter().flat_map(|v| v.iter()) {
        mask[*p] = 1.0;
    }
    Tensor::from_vec(&[size, size], mask)
}

fn radius<R: Rng + ?Sized>(cfg: &SynthConfig, scale: f64, rng: &mut R) -> f64 {
    scale * rng.random_range(cfg.min_radius..=cfg.max_radius)
}

fn validate(cfg: &SynthConfig) -> Result<(), DataError> {
    let bad = |msg: String| Err(DataError::Geometry(msg));
    if cfg.num_classes == 0 || cfg.image_size == 0 {
        return bad("image size and class count must be positive".into());
    }
    if !(0.0..=1.0).contains(&cfg.similarity) {
        return bad(format!("similarity {} outside [0, 1]", cfg.similarity));
    }
    if cfg.distractors >= cfg.num_classes {
        return bad(format!(
            "{} distractor classes need more than {} classes",
            cfg.distractors, cfg.num_classes
        ));
    }
    if !(cfg.min_radius > 0.0 && cfg.min_radius <= cfg.max_radius) {
        return bad(format!(
            "radius range {}..{} is empty",
            cfg.min_radius, cfg.max_radius
        ));
    }
    let span = 2.0 * (cfg.max_radius * (1.0 + OUTLINE_WOBBLE) + 1.0);
    if span > cfg.image_size as f64 {
        return bad(format!(
            "objects up to {span:.1}px across do not fit a {}px image",
            cfg.image_size
        ));
    }
    Ok(())
}

/// Generates `num_scenes` scenes. In paired mode each scene yields one sample
/// per object class it contains; otherwise one sample for its target class.
/// Identical `(cfg, seed)` give bit-identical output.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>, DataError> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let mut samples = Vec::new();
    for scene in 0..cfg.num_scenes {
        let multiple = match cfg.objects {
            ObjectCount::Single => false,
            ObjectCount::Multiple => true,
            ObjectCount::Mixed => scene % 2 == 1,
        };
        let mut classes: Vec<usize> = (0..cfg.num_classes).collect();
        classes.shuffle(&mut rng);
        classes.truncate(cfg.distractors + 1);
        let (scale, per_class) = if multiple { (MULTI_SCALE, 2) } else { (1.0, 1) };
        let mut owners = Vec::new();
        let mut radii = Vec::new();
        for (i, &class) in classes.iter().enumerate() {
            let count = if i == 0 { per_class } else { 1 };
            for _ in 0..count {
                owners.push(class);
                radii.push(radius(cfg, scale, &mut rng));
            }
        }
        let blobs = place_blobs(&radii, size, &mut rng)?;
        let objects: Vec<(usize, Blob)> = owners.iter().copied().zip(blobs).collect();
        let (query, covered) = render(size, &objects, cfg, &mut rng);
        let targets = if cfg.paired {
            classes.clone()
        } else {
            vec![classes[0]]
        };
        for class in targets {
            let pixels: Vec<&Vec<usize>> = owners
                .iter()
                .zip(&covered)
                .filter(|(owner, _)| **owner == class)
                .map(|(_, px)| px)
                .collect();
            let references = (0..cfg.refs_per_sample)
                .map(|_| reference(cfg, class, &mut rng))
                .collect::<Result<_, _>>()?;
            samples.push(Sample {
                id: format!("scene{scene:04}_class{class}"),
                category: format!("class{class}"),
                query: query.clone(),
                references,
                gt: mask_of(size, &pixels),
            });
        }
    }
    Ok(samples)
}

/// A fresh background with a single object of `class`.
fn reference<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    class: usize,
    rng: &mut R,
) -> Result<Reference, DataError> {
    let r0 = radius(cfg, 1.0, rng);
    let blob = place_blobs(&[r0], cfg.image_size, rng)?.remove(0);
    let (image, covered) = render(cfg.image_size, &[(class, blob)], cfg, rng);
    Ok(Reference {
        image,
        mask: mask_of(cfg.image_size, &[&covered[0]]),
    })
}
