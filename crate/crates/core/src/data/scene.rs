//! Procedural SAR-like scenes: speckled sea, a dark elongated spill,
//! intermediate look-alike patches, a few bright ship pixels and an
//! occasional land region entering from one edge.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const SEA: u8 = 0;
pub const OIL: u8 = 1;
pub const LOOK_ALIKE: u8 = 2;
pub const SHIP: u8 = 3;
pub const LAND: u8 = 4;
pub const CLASS_COUNT: usize = 5;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["sea", "oil", "look-alike", "ship", "land"];

const SEA_LEVEL: f64 = 0.35;
const OIL_LEVEL: f64 = 0.1;
const LOOK_ALIKE_LEVEL: f64 = 0.2;
const SHIP_LEVEL: f64 = 0.95;
const LAND_LEVEL: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Mean share of pixels labelled oil.
    pub spill_fraction: f64,
    /// Mean share of pixels labelled look-alike.
    pub look_alike_fraction: f64,
    /// Probability that a scene contains land.
    pub land_probability: f64,
    /// Relative standard deviation of the multiplicative speckle.
    pub speckle: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            spill_fraction: 0.015,
            look_alike_fraction: 0.02,
            land_probability: 0.3,
            speckle: 0.2,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f.is_finite() && (0.0..=1.0).contains(&f);
        if self.height == 0 || self.width == 0 {
            return Err(Error::contract("scene extents must be positive"));
        }
        if !frac_ok(self.spill_fraction)
            || !frac_ok(self.look_alike_fraction)
            || !frac_ok(self.land_probability)
            || self.spill_fraction + self.look_alike_fraction > 0.5
        {
            return Err(Error::contract(format!(
                "invalid class fractions: spill {} look-alike {} land probability {}",
                self.spill_fraction, self.look_alike_fraction, self.land_probability
            )));
        }
        if !(self.speckle.is_finite() && self.speckle >= 0.0) {
            return Err(Error::contract(format!(
                "speckle must be >= 0, got {}",
                self.speckle
            )));
        }
        Ok(())
    }
}

/// Labels the `count` free pixels closest (in rotated-ellipse distance) to
/// a centre, producing a blob of exactly `count` pixels when room allows.
fn paint_blob(labels: &mut [u8], w: usize, count: usize, class: u8, rng: &mut ChaCha8Rng) {
    if count == 0 {
        return;
    }
    let h = labels.len() / w;
    let elong: f64 = rng.gen_range(1.5..4.0);
    let theta: f64 = rng.gen_range(0.0..PI);
    let margin = ((count as f64).sqrt() * 0.5).min(h.min(w) as f64 / 3.0);
    let cy = rng.gen_range(margin..h as f64 - margin);
    let cx = rng.gen_range(margin..w as f64 - margin);
    let (s, c) = theta.sin_cos();
    let wobble: f64 = rng.gen_range(0.0..0.3);
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut cand: Vec<(f64, usize)> = (0..labels.len())
        .filter(|&i| labels[i] == SEA)
        .map(|i| {
            let (dy, dx) = ((i / w) as f64 + 0.5 - cy, (i % w) as f64 + 0.5 - cx);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            let r = (u * u / elong + v * v * elong).sqrt();
            let ang = v.atan2(u);
            (r * (1.0 + wobble * (3.0 * ang + phase).sin()), i)
        })
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, i) in cand.iter().take(count) {
        labels[i] = class;
    }
}

fn paint_land(labels: &mut [u8], w: usize, rng: &mut ChaCha8Rng) {
    let h = labels.len() / w;
    let edge = rng.gen_range(0..4);
    let depth = rng.gen_range(0.1..0.25);
    let amp = rng.gen_range(0.02..0.06);
    let freq = rng.gen_range(1.0..3.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
            let (inward, along) = match edge {
                0 => (fy, fx),
                1 => (1.0 - fy, fx),
                2 => (fx, fy),
                _ => (1.0 - fx, fy),
            };
            if inward < depth + amp * (2.0 * PI * freq * along + phase).sin() {
                labels[y * w + x] = LAND;
            }
        }
    }
}

/// Number of pixels for a class whose mean share is `frac`, jittered by
/// ±30% per scene.
fn jittered_count(frac: f64, pixels: usize, rng: &mut ChaCha8Rng) -> usize {
    let j: f64 = rng.gen_range(0.7..1.3);
    (frac * pixels as f64 * j).round() as usize
}

/// Deterministic scene for `seed`: image `[1, H, W]` in `[0, 1]` and its
/// label mask.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<(Tensor, Mask)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![SEA; n];

    if rng.gen_bool(cfg.land_probability) {
        paint_land(&mut labels, w, &mut rng);
    }
    let spill = jittered_count(cfg.spill_fraction, n, &mut rng);
    paint_blob(&mut labels, w, spill, OIL, &mut rng);
    let blobs = rng.gen_range(1..=2);
    let look = jittered_count(cfg.look_alike_fraction, n, &mut rng);
    for b in 0..blobs {
        paint_blob(
            &mut labels,
            w,
            look / blobs + usize::from(b < look % blobs),
            LOOK_ALIKE,
            &mut rng,
        );
    }
    for _ in 0..rng.gen_range(1..=3) {
        let (y, x) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let len = rng.gen_range(1..=3);
        let vertical = rng.gen_bool(0.5);
        for k in 0..len {
            let (yy, xx) = if vertical { (y + k, x) } else { (y, x + k) };
            if yy < h && xx < w && labels[yy * w + xx] == SEA {
                labels[yy * w + xx] = SHIP;
            }
        }
    }

    let speckle = if cfg.speckle > 0.0 {
        let shape = 1.0 / (cfg.speckle * cfg.speckle);
        Some(Gamma::new(shape, 1.0 / shape).map_err(|e| Error::contract(e.to_string()))?)
    } else {
        None
    };
    let swell = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.05..0.2));
    let data = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let base = match l {
                OIL => OIL_LEVEL,
                LOOK_ALIKE => LOOK_ALIKE_LEVEL,
                SHIP => SHIP_LEVEL,
                LAND => LAND_LEVEL + 0.08 * ((0.3 * x).sin() * (0.23 * y).cos()),
                _ => SEA_LEVEL + 0.03 * (swell.1 * (x + 0.7 * y) + swell.0).sin(),
            };
            let noise = speckle.as_ref().map_or(1.0, |g| g.sample(&mut rng));
            (base * noise).clamp(0.0, 1.0)
        })
        .collect();
    let image = Tensor::new([1, h, w], data)?;
    Ok((image, Mask::new(h, w, labels)?))
}
