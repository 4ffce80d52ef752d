//! Synthetic identity images.
//!
//! Every identity owns a base pattern: a background colour taken from an
//! evenly spaced hue wheel plus a few coloured Gaussian blobs. Each image
//! renders the pattern under a random rotation, translation and brightness
//! shift by sampling the pattern at inverse-transformed pixel centres, then
//! adds Gaussian pixel noise and clamps to `[0, 1]`.
//!
//! Randomness comes from ChaCha8 seeded with the master seed; identity `i`
//! draws its pattern from stream `2i + 2` and its images from stream `2i + 3`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

use super::manifest::{Manifest, Record, Split};
use super::tensor_file;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub blobs: usize,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute shift in pixels along each axis.
    pub translation_px: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub query_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_identities: 10,
            images_per_identity: 40,
            height: 32,
            width: 32,
            channels: 3,
            seed: 0,
            blobs: 4,
            rotation_deg: 15.0,
            translation_px: 3.0,
            brightness: 0.1,
            noise_sigma: 0.02,
            train_fraction: 0.6,
            query_fraction: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.images_per_identity == 0 {
            return Err(Error::Config("need at least one identity and one image".into()));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.rotation_deg >= 0.0) || !(self.translation_px >= 0.0) || !(self.brightness >= 0.0) {
            return Err(Error::Config("transform ranges must be non-negative".into()));
        }
        let (t, q) = (self.train_fraction, self.query_fraction);
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&q) || t + q > 1.0 {
            return Err(Error::Config(format!("split fractions {t} + {q} exceed 1")));
        }
        Ok(())
    }

    /// Train, query and gallery counts per identity.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.images_per_identity;
        let train = ((self.train_fraction * n as f64).round() as usize).min(n);
        let query = ((self.query_fraction * n as f64).round() as usize).min(n - train);
        (train, query, n - train - query)
    }

    fn split_of(&self, index: usize) -> Split {
        let (train, query, _) = self.split_counts();
        if index < train {
            Split::Train
        } else if index < train + query {
            Split::Query
        } else {
            Split::Gallery
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    /// Centre relative to the image centre, in pixels.
    pub cy: f64,
    pub cx: f64,
    pub sigma_y: f64,
    pub sigma_x: f64,
    pub color: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub background: Vec<f64>,
    pub blobs: Vec<Blob>,
}

impl Pattern {
    /// Pattern colour at a point relative to the image centre.
    pub fn sample(&self, y: f64, x: f64) -> Vec<f64> {
        let mut out = self.background.clone();
        for b in &self.blobs {
            let dy = (y - b.cy) / b.sigma_y;
            let dx = (x - b.cx) / b.sigma_x;
            let w = (-0.5 * (dy * dy + dx * dx)).exp();
            for (o, &c) in out.iter_mut().zip(&b.color) {
                *o = *o * (1.0 - w) + c * w;
            }
        }
        out
    }
}

/// Per-image transform drawn from the configured ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub angle: f64,
    pub ty: f64,
    pub tx: f64,
    pub brightness: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        angle: 0.0,
        ty: 0.0,
        tx: 0.0,
        brightness: 0.0,
    };
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn base_pattern(config: &SyntheticConfig, identity: usize) -> Pattern {
    let mut rng = stream(config.seed, 2 * identity as u64 + 2);
    let c = config.channels;
    let hue = (identity as f64 + rng.random_range(0.0..0.25)) / config.n_identities as f64;
    let rgb = hsv_to_rgb(hue, 0.75, 0.85);
    let background = (0..c).map(|k| if k < 3 { rgb[k] } else { rng.random() }).collect();
    let (h, w) = (config.height as f64, config.width as f64);
    let blobs = (0..config.blobs)
        .map(|_| Blob {
            cy: rng.random_range(-0.3..0.3) * h,
            cx: rng.random_range(-0.3..0.3) * w,
            sigma_y: rng.random_range(0.08..0.2) * h,
            sigma_x: rng.random_range(0.08..0.2) * w,
            color: (0..c).map(|_| rng.random()).collect(),
        })
        .collect();
    Pattern { background, blobs }
}

fn draw_transform(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Transform {
    let sym = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    Transform {
        angle: sym(rng, config.rotation_deg).to_radians(),
        ty: sym(rng, config.translation_px),
        tx: sym(rng, config.translation_px),
        brightness: sym(rng, config.brightness),
    }
}

/// Renders `pattern` under `transform` as an `[H, W, C]` image without noise.
pub fn render(config: &SyntheticConfig, pattern: &Pattern, transform: Transform) -> Tensor {
    let (h, w, c) = (config.height, config.width, config.channels);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = transform.angle.sin_cos();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let v = y as f64 - cy - transform.ty;
            let u = x as f64 - cx - transform.tx;
            let pu = cos * u + sin * v;
            let pv = -sin * u + cos * v;
            data.extend(
                pattern
                    .sample(pv, pu)
                    .into_iter()
                    .map(|p| (p + transform.brightness).clamp(0.0, 1.0)),
            );
        }
    }
    Tensor::new(vec![h, w, c], data).expect("rendered pixels are finite")
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub identity: usize,
    pub index: usize,
    pub split: Split,
    pub image: Tensor,
}

impl SyntheticImage {
    pub fn id_string(&self) -> String {
        format!("{:03}", self.identity)
    }

    pub fn file_name(&self) -> String {
        format!("id{:03}_{:03}.ftns", self.identity, self.index)
    }
}

/// All images of one identity, in index order.
pub fn identity_images(config: &SyntheticConfig, identity: usize) -> Result<Vec<SyntheticImage>> {
    config.validate()?;
    let pattern = base_pattern(config, identity);
    let mut rng = stream(config.seed, 2 * identity as u64 + 3);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(config.images_per_identity);
    for index in 0..config.images_per_identity {
        let t = draw_transform(config, &mut rng);
        let mut image = render(config, &pattern, t);
        for v in image.data_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        out.push(SyntheticImage {
            identity,
            index,
            split: config.split_of(index),
            image,
        });
    }
    Ok(out)
}

/// Every image of the dataset, identity-major.
pub fn generate_images(config: &SyntheticConfig) -> Result<Vec<SyntheticImage>> {
    config.validate()?;
    let mut all = Vec::new();
    for i in 0..config.n_identities {
        all.extend(identity_images(config, i)?);
    }
    Ok(all)
}

/// Writes `images/idXXX_YYY.ftns` files and `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic(config: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut records = Vec::new();
    for img in generate_images(config)? {
        let rel = format!("images/{}", img.file_name());
        tensor_file::write_tensor(out_dir.join(&rel), &img.image)?;
        records.push(Record {
            id: img.id_string(),
            path: rel,
            split: img.split,
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_counts() {
        assert_eq!(SyntheticConfig::default().split_counts(), (24, 4, 12));
    }

    #[test]
    fn identity_transform_samples_pattern_at_pixel_centres() {
        let cfg = SyntheticConfig {
            height: 5,
            width: 5,
            ..Default::default()
        };
        let p = base_pattern(&cfg, 2);
        let img = render(&cfg, &p, Transform::IDENTITY);
        let expect = p.sample(0.0, 0.0);
        let centre = &img.data()[(2 * 5 + 2) * 3..(2 * 5 + 3) * 3];
        for (a, b) in centre.iter().zip(expect) {
            assert_eq!(*a, b.clamp(0.0, 1.0));
        }
    }

    #[test]
    fn identities_get_distinct_patterns() {
        let cfg = SyntheticConfig::default();
        let a = base_pattern(&cfg, 0);
        let b = base_pattern(&cfg, 1);
        assert_ne!(a, b);
        assert_eq!(a, base_pattern(&cfg, 0));
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let cfg = SyntheticConfig {
            images_per_identity: 5,
            brightness: 0.5,
            noise_sigma: 0.3,
            ..Default::default()
        };
        for img in identity_images(&cfg, 0).unwrap() {
            assert!(img.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
