//! On-disk dataset layout:
//!
//! ```text
//! images/{id}.png   8-bit grayscale intensities
//! masks/{id}.png    16-bit instance ids, 0 = background
//! meta/{id}.json    instance id -> class id, seed, prompted class
//! manifest.json     schema version, spec echo, scene list, checksums
//! ```

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Image, InstanceMask, Shape};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub image: String,
    pub mask: String,
    pub meta: String,
    /// SHA-256 over image, mask and meta file bytes, in that order.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: SceneSpec,
    pub scenes: Vec<ManifestEntry>,
    /// SHA-256 over the spec echo and every entry digest.
    pub checksum: String,
}

impl Manifest {
    fn compute_checksum(spec: &SceneSpec, scenes: &[ManifestEntry]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(spec).expect("spec serializes"));
        for e in scenes {
            h.update(e.id.as_bytes());
            h.update(e.seed.to_le_bytes());
            h.update(e.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceMeta {
    id: u16,
    class_id: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    id: String,
    seed: u64,
    height: usize,
    width: usize,
    prompted_class: u8,
    instances: Vec<InstanceMeta>,
}

fn encode_png<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S>(
    buf: ImageBuffer<P, Vec<S>>,
    path: &Path,
) -> Result<Vec<u8>>
where
    [S]: image::EncodableLayout,
{
    let mut bytes = Cursor::new(Vec::new());
    buf.write_to(&mut bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(bytes.into_inner())
}

fn scene_files(scene: &Scene, dir: &Path) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
    let shape = scene.image.shape();
    let (w, h) = (shape.width as u32, shape.height as u32);

    let intensities: Vec<u8> = scene
        .image
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, intensities).expect("buffer sized");
    let image_bytes = encode_png(img, &dir.join("images"))?;

    let mut ids = vec![0u16; shape.len()];
    for inst in &scene.instances {
        for (i, bit) in inst.mask().bits().iter().enumerate() {
            if *bit {
                if ids[i] != 0 {
                    return Err(Error::Contract(format!(
                        "{}: overlapping instances cannot be stored as an instance-id mask",
                        scene.id
                    )));
                }
                ids[i] = inst.id;
            }
        }
    }
    let mask = ImageBuffer::<Luma<u16>, _>::from_raw(w, h, ids).expect("buffer sized");
    let mask_bytes = encode_png(mask, &dir.join("masks"))?;

    let meta = SceneMeta {
        id: scene.id.clone(),
        seed: scene.seed,
        height: shape.height,
        width: shape.width,
        prompted_class: scene.prompted_class,
        instances: scene
            .instances
            .iter()
            .map(|i| InstanceMeta {
                id: i.id,
                class_id: i.class_id,
            })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json(dir, e))?;
    Ok((image_bytes, mask_bytes, meta_bytes))
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes scenes under `dir` and returns the manifest (written last).
pub fn write_dataset(scenes: &[Scene], spec: &SceneSpec, dir: &Path) -> Result<Manifest> {
    for sub in ["images", "masks", "meta"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let (img, mask, meta) = scene_files(scene, dir)?;
        let entry = ManifestEntry {
            id: scene.id.clone(),
            seed: scene.seed,
            image: format!("images/{}.png", scene.id),
            mask: format!("masks/{}.png", scene.id),
            meta: format!("meta/{}.json", scene.id),
            sha256: digest(&[&img, &mask, &meta]),
        };
        write_file(&dir.join(&entry.image), &img)?;
        write_file(&dir.join(&entry.mask), &mask)?;
        write_file(&dir.join(&entry.meta), &meta)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        spec: spec.clone(),
        checksum: Manifest::compute_checksum(spec, &entries),
        scenes: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_file(&path, &bytes)?;
    Ok(manifest)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Corruption(format!("missing file {}", path.display()))
        }
        _ => Error::io(path, e),
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Corruption(format!(
            "unsupported manifest schema {}",
            manifest.schema_version
        )));
    }
    if Manifest::compute_checksum(&manifest.spec, &manifest.scenes) != manifest.checksum {
        return Err(Error::Corruption(format!(
            "{}: manifest checksum mismatch",
            path.display()
        )));
    }
    Ok(manifest)
}

fn decode(bytes: &[u8], path: &Path) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))
}

/// Reads a dataset written by [`write_dataset`], verifying every checksum.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let manifest = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let (ip, mp, tp) = (
            dir.join(&entry.image),
            dir.join(&entry.mask),
            dir.join(&entry.meta),
        );
        let (img, mask, meta) = (read_file(&ip)?, read_file(&mp)?, read_file(&tp)?);
        if digest(&[&img, &mask, &meta]) != entry.sha256 {
            return Err(Error::Corruption(format!("{}: checksum mismatch", entry.id)));
        }
        let meta: SceneMeta = serde_json::from_slice(&meta)
            .map_err(|e| Error::Corruption(format!("{}: {e}", tp.display())))?;
        let shape = Shape::new(meta.height, meta.width);

        let gray = decode(&img, &ip)?.to_luma8();
        let ids = decode(&mask, &mp)?.to_luma16();
        if (gray.height() as usize, gray.width() as usize) != (shape.height, shape.width)
            || (ids.height() as usize, ids.width() as usize) != (shape.height, shape.width)
        {
            return Err(Error::Corruption(format!("{}: image size mismatch", entry.id)));
        }
        let image = Image::new(
            shape,
            gray.as_raw().iter().map(|v| f64::from(*v) / 255.0).collect(),
        )?;
        let mut instances = Vec::with_capacity(meta.instances.len());
        for im in &meta.instances {
            let bits = ids.as_raw().iter().map(|v| *v == im.id).collect();
            let m = BinaryMask::from_bits(shape, bits)?;
            instances.push(
                InstanceMask::new(im.id, im.class_id, m)
                    .map_err(|e| Error::Corruption(format!("{}: {e}", entry.id)))?,
            );
        }
        scenes.push(Scene {
            id: meta.id,
            seed: meta.seed,
            image,
            instances,
            prompted_class: meta.prompted_class,
        });
    }
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_scenes;

    fn sample() -> (SceneSpec, Vec<Scene>) {
        let spec = SceneSpec::default();
        let scenes = generate_scenes(&spec, 100, 3).unwrap();
        (spec, scenes)
    }

    #[test]
    fn round_trip_masks_and_quantized_pixels() {
        let (spec, scenes) = sample();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&scenes, &spec, dir.path()).unwrap();
        assert_eq!(manifest.scenes.len(), 3);
        let (read_manifest, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(read_manifest, manifest);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.instances, b.instances);
            assert_eq!(a.prompted_class, b.prompted_class);
            for (x, y) in a.image.pixels().iter().zip(b.image.pixels()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn tampered_manifest_detected() {
        let (spec, scenes) = sample();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scenes, &spec, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("\"seed\": 101", "\"seed\": 999", 1)).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Corruption(_))));
    }

    #[test]
    fn tampered_file_detected() {
        let (spec, scenes) = sample();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&scenes, &spec, dir.path()).unwrap();
        let meta = dir.path().join(&m.scenes[0].meta);
        let mut bytes = fs::read(&meta).unwrap();
        bytes.push(b' ');
        fs::write(&meta, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Corruption(_))));
    }

    #[test]
    fn empty_directory_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Corruption(_))));
    }
}
