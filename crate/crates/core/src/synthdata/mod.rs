//! Synthetic dense-object scenes: elliptical blobs of a few visually
//! distinct classes on a noisy background.

mod io;
mod split;
mod target;

pub use io::{read_dataset, read_manifest, write_dataset, Manifest, ManifestEntry, MANIFEST_SCHEMA_VERSION};
pub use split::{DataRatio, DatasetSplit};
pub use target::{build_task_target, TaskMode, TaskTarget};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Image, InstanceMask, Shape, MIN_SIDE};
use crate::rng::{self, streams};

/// Appearance of one object class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    /// Mean intensity inside instances of this class.
    pub mean_intensity: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise_amplitude: f64,
    /// Ratio of major to minor semi-axis (>= 1).
    pub eccentricity: f64,
}

/// Parameters of the scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of instances drawn per class.
    pub instances_per_class: (usize, usize),
    /// Inclusive range of the major semi-axis, in pixels.
    pub radius_range: (usize, usize),
    pub textures: Vec<ClassTexture>,
    pub background_intensity: f64,
    pub background_noise: f64,
    pub overlap_allowed: bool,
    /// Placement attempts per instance before giving up.
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 2,
            instances_per_class: (3, 6),
            radius_range: (4, 6),
            textures: vec![
                ClassTexture {
                    mean_intensity: 0.45,
                    noise_amplitude: 0.06,
                    eccentricity: 1.0,
                },
                ClassTexture {
                    mean_intensity: 0.85,
                    noise_amplitude: 0.06,
                    eccentricity: 1.6,
                },
            ],
            background_intensity: 0.12,
            background_noise: 0.05,
            overlap_allowed: false,
            max_attempts: 400,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("scene spec: {m}")));
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return fail(format!("canvas must be at least {MIN_SIDE}x{MIN_SIDE}"));
        }
        if self.num_classes < 2 {
            return fail("need at least 2 classes".into());
        }
        if self.num_classes > usize::from(u8::MAX) {
            return fail("too many classes".into());
        }
        if self.textures.len() != self.num_classes {
            return fail(format!(
                "{} textures for {} classes",
                self.textures.len(),
                self.num_classes
            ));
        }
        let (lo, hi) = self.instances_per_class;
        if lo == 0 || lo > hi {
            return fail(format!("instances_per_class [{lo}, {hi}] invalid"));
        }
        let (rlo, rhi) = self.radius_range;
        if rlo < 2 || rlo > rhi {
            return fail(format!("radius_range [{rlo}, {rhi}] invalid"));
        }
        for t in &self.textures {
            if !(0.0..=1.0).contains(&t.mean_intensity) || t.noise_amplitude < 0.0 {
                return fail("texture intensity outside [0,1] or negative noise".into());
            }
            if t.eccentricity < 1.0 {
                return fail("eccentricity must be >= 1".into());
            }
        }
        for (i, a) in self.textures.iter().enumerate() {
            for b in &self.textures[i + 1..] {
                let gap = (a.mean_intensity - b.mean_intensity).abs();
                let noise = a.noise_amplitude.max(b.noise_amplitude);
                if gap < 2.0 * noise {
                    return fail(format!(
                        "classes not separable: intensity gap {gap} < 2 x noise {noise}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }
}

/// An image with its ground-truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub image: Image,
    pub instances: Vec<InstanceMask>,
    /// Class whose instances form the category-specific target.
    pub prompted_class: u8,
}

impl Scene {
    pub fn classes_present(&self) -> Vec<u8> {
        let mut classes: Vec<u8> = self.instances.iter().map(|i| i.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }

    pub fn instance(&self, id: u16) -> Option<&InstanceMask> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn instances_of_class(&self, class_id: u8) -> impl Iterator<Item = &InstanceMask> {
        self.instances.iter().filter(move |i| i.class_id == class_id)
    }
}

pub fn scene_id(seed: u64) -> String {
    format!("scene_{seed:08}")
}

fn ellipse_mask(
    shape: Shape,
    center: (f64, f64),
    semi_major: f64,
    semi_minor: f64,
    angle: f64,
) -> BinaryMask {
    let (sin, cos) = angle.sin_cos();
    let mut mask = BinaryMask::empty(shape);
    let reach = semi_major.ceil() as i64 + 1;
    let (cr, cc) = center;
    for r in (cr as i64 - reach)..=(cr as i64 + reach) {
        for c in (cc as i64 - reach)..=(cc as i64 + reach) {
            if !shape.contains(r, c) {
                continue;
            }
            let (dy, dx) = (r as f64 - cr, c as f64 - cc);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / semi_major).powi(2) + (v / semi_minor).powi(2) <= 1.0 {
                mask.set(r as usize, c as usize, true);
            }
        }
    }
    mask
}

/// Generates one scene. Deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let shape = spec.shape();
    let mut rng = rng::substream(seed, streams::DATA, &[]);

    let mut classes = Vec::new();
    for class in 0..spec.num_classes {
        let n = rng.random_range(spec.instances_per_class.0..=spec.instances_per_class.1);
        classes.extend(std::iter::repeat_n(class as u8, n));
    }
    // Interleave placement order so no class is systematically crowded out.
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }

    let mut occupied = BinaryMask::empty(shape);
    let mut instances = Vec::with_capacity(classes.len());
    for (k, &class) in classes.iter().enumerate() {
        let tex = spec.textures[usize::from(class)];
        let mut placed = None;
        for _ in 0..spec.max_attempts {
            let major = rng.random_range(spec.radius_range.0..=spec.radius_range.1) as f64;
            let minor = (major / tex.eccentricity).max(2.0);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let margin = major + 1.0;
            if 2.0 * margin >= shape.height as f64 || 2.0 * margin >= shape.width as f64 {
                break;
            }
            let center = (
                rng.random_range(margin..shape.height as f64 - margin),
                rng.random_range(margin..shape.width as f64 - margin),
            );
            let mask = ellipse_mask(shape, center, major, minor, angle);
            if mask.is_empty() {
                continue;
            }
            if !spec.overlap_allowed && mask.dilate(1).intersection_count(&occupied)? > 0 {
                continue;
            }
            placed = Some(mask);
            break;
        }
        let Some(mask) = placed else {
            return Err(Error::Generation(format!(
                "could not place instance {} of {} (class {class}) on a {}x{} canvas with radius {:?} after {} attempts",
                k + 1,
                classes.len(),
                shape.height,
                shape.width,
                spec.radius_range,
                spec.max_attempts
            )));
        };
        occupied.union_with(&mask)?;
        instances.push(InstanceMask::new((k + 1) as u16, class, mask)?);
    }

    let mut pixels = vec![0.0; shape.len()];
    for p in pixels.iter_mut() {
        let noise = rng.random_range(-1.0..=1.0);
        *p = spec.background_intensity + spec.background_noise * noise;
    }
    for inst in &instances {
        let tex = spec.textures[usize::from(inst.class_id)];
        for (r, c) in inst.mask().coords() {
            let noise = rng.random_range(-1.0..=1.0);
            pixels[shape.index(r, c)] = tex.mean_intensity + tex.noise_amplitude * noise;
        }
    }
    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }

    let present = {
        let mut c: Vec<u8> = instances.iter().map(|i| i.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let prompted_class = present[rng.random_range(0..present.len())];

    Ok(Scene {
        id: scene_id(seed),
        seed,
        image: Image::new(shape, pixels)?,
        instances,
        prompted_class,
    })
}

/// Generates `count` scenes with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_scenes(spec: &SceneSpec, base_seed: u64, count: usize) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(spec, base_seed + i))
        .collect()
}
