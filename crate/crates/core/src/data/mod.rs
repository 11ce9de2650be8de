//! Samples, synthetic scenes and PGM directory IO.

pub mod pgm;
pub mod scene;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::parallel;
use crate::tensor::Tensor;
pub use pgm::Gray;
pub use scene::{generate_scene, SceneConfig, CLASS_COUNT, CLASS_NAMES};

/// One image `[1, H, W]` with values in `[0, 1]` and its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub mask: Mask,
}

/// Seed of scene `index` in a synthetic set drawn with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub fn synthetic(count: usize, cfg: &SceneConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    parallel::map_range(count, |i| {
        let (image, mask) = generate_scene(scene_seed(cfg.seed, i), cfg)?;
        Ok(Sample {
            name: format!("scene_{i:04}"),
            image,
            mask,
        })
    })
    .into_iter()
    .collect()
}

pub fn image_to_gray(image: &Tensor) -> Gray {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Gray {
        width: w,
        height: h,
        pixels: image.data()[..h * w]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    }
}

pub fn gray_to_image(g: &Gray) -> Tensor {
    Tensor::from_fn(&[1, g.height, g.width], |i| g.pixels[i] as f64 / 255.0)
}

pub fn mask_to_gray(m: &Mask) -> Gray {
    Gray {
        width: m.width(),
        height: m.height(),
        pixels: m.labels().to_vec(),
    }
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    pgm::write(path, &mask_to_gray(m))
}

/// Reads a mask PGM whose grey levels are class ids.
pub fn read_mask(path: &Path, classes: usize) -> Result<Mask> {
    let g = pgm::read(path)?;
    if let Some(&bad) = g.pixels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Data {
            path: path.to_path_buf(),
            msg: format!("label {bad} out of range for {classes} classes"),
        });
    }
    Mask::new(g.height, g.width, g.pixels)
}

/// Writes `name.pgm` and `name_mask.pgm` into `dir`.
pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    pgm::write(
        &dir.join(format!("{}.pgm", s.name)),
        &image_to_gray(&s.image),
    )?;
    write_mask(&dir.join(format!("{}_mask.pgm", s.name)), &s.mask)
}

/// Loads every `name.pgm` / `name_mask.pgm` pair of `dir`, sorted by name.
pub fn load_directory(dir: &Path, classes: usize) -> Result<Vec<Sample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        match stem.strip_suffix("_mask") {
            Some(base) => masks.insert(base.to_string(), path),
            None => images.insert(stem, path),
        };
    }
    if let Some((_, path)) = masks.iter().find(|(k, _)| !images.contains_key(*k)) {
        return Err(Error::Data {
            path: path.clone(),
            msg: "mask has no matching image".into(),
        });
    }
    if images.is_empty() {
        log::warn!("no PGM image/mask pairs in {}", dir.display());
    }
    let mut out = Vec::with_capacity(images.len());
    for (name, img_path) in images {
        let mask_path = masks.remove(&name).ok_or_else(|| Error::Data {
            path: img_path.clone(),
            msg: format!("missing mask {name}_mask.pgm"),
        })?;
        let g = pgm::read(&img_path)?;
        let mask = read_mask(&mask_path, classes)?;
        if (g.height, g.width) != (mask.height(), mask.width()) {
            return Err(Error::Data {
                path: mask_path,
                msg: format!(
                    "size {}x{} does not match image {}x{}",
                    mask.height(),
                    mask.width(),
                    g.height,
                    g.width
                ),
            });
        }
        out.push(Sample {
            name,
            image: gray_to_image(&g),
            mask,
        });
    }
    Ok(out)
}

/// Seeded shuffle split; the held-out part takes `round(n·holdout)` samples.
pub fn split(samples: Vec<Sample>, holdout: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((samples.len() as f64) * holdout.clamp(0.0, 1.0)).round() as usize;
    let test_idx: std::collections::HashSet<usize> = idx[..n_test].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    (train, test)
}
