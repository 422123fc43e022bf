//! Synthetic identity world.
//!
//! An identity is a unit vector `f` in `R^D`. Its face sprite is a linear
//! image of `f` through a fixed orthonormal basis of Walsh patterns, so the
//! feature extractor is an exact linear decode. Scenes place sprites at
//! nose-tip anchors over a caption-styled background.

mod dataset;
mod scene;

pub use dataset::{
    build_dataset, identity_pool, load_manifest, sample_locations, DatasetConfig, DatasetManifest, DatasetMeta, ManifestRecord,
    MANIFEST_FILE, META_FILE,
};
pub use scene::{background, SceneAnnotation, World};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::util;

/// Mid-gray around which sprite codes are rendered.
pub const SPRITE_BASE: f32 = 0.5;
/// Largest excursion from [`SPRITE_BASE`] any unit feature can produce.
pub const SPRITE_SWING: f32 = 0.45;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityFeature {
    pub values: Vec<f32>,
    /// Pool index, or -1 for features not drawn from a pool.
    pub id_label: i64,
}

impl IdentityFeature {
    /// Normalizes `values`; a zero vector maps to the first axis.
    pub fn from_raw(mut values: Vec<f32>, id_label: i64) -> Self {
        let n = values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 1e-12 && n.is_finite() {
            for v in &mut values {
                *v = (*v as f64 / n) as f32;
            }
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
            if let Some(v) = values.first_mut() {
                *v = 1.0;
            }
        }
        Self { values, id_label }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &IdentityFeature) -> f32 {
        util::cosine(&self.values, &other.values)
    }
}

/// Gaussian direction, normalized. Deterministic in `seed`.
pub fn sample_identity(seed: u64, dim: usize) -> IdentityFeature {
    let mut rng = util::rng(seed);
    let raw = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    IdentityFeature::from_raw(raw, -1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSprite {
    pub pixels: RgbImage,
    pub source_feature: IdentityFeature,
}

/// Sylvester Hadamard rows reordered by sequency (number of sign changes).
fn walsh_rows(n: usize) -> Vec<Vec<f32>> {
    let mut h = vec![vec![1.0f32]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    h.sort_by_key(|row| row.windows(2).filter(|w| w[0] != w[1]).count());
    h
}

/// Fixed linear sprite code: feature `k` drives channel `k % 3` through 2-d
/// pattern `k / 3`.
#[derive(Clone, Debug)]
pub struct SpriteCodec {
    dim: usize,
    size: usize,
    gain: f32,
    /// Orthonormal `size * size` patterns, low sequency first.
    patterns: Vec<Vec<f32>>,
}

impl SpriteCodec {
    pub fn new(dim: usize, size: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if size < 8 || !size.is_power_of_two() {
            return Err(Error::Config(format!("sprite size {size} must be a power of two and at least 8")));
        }
        let n_patterns = dim.div_ceil(3);
        if n_patterns > size * size {
            return Err(Error::Config(format!("sprite size {size} cannot encode {dim} feature values")));
        }
        let rows = walsh_rows(size);
        let mut pairs: Vec<(usize, usize)> = (0..size).flat_map(|u| (0..size).map(move |v| (u, v))).collect();
        pairs.sort_by_key(|&(u, v)| (u + v, u));
        let norm = 1.0 / size as f32;
        let patterns = pairs[..n_patterns]
            .iter()
            .map(|&(u, v)| {
                let mut p = Vec::with_capacity(size * size);
                for y in 0..size {
                    for x in 0..size {
                        p.push(rows[u][x] * rows[v][y] * norm);
                    }
                }
                p
            })
            .collect();
        // Walsh patterns have constant magnitude 1/size, so every pixel sees
        // the same worst case over unit features.
        let per_channel = dim.div_ceil(3) as f32;
        let gain = SPRITE_SWING * size as f32 / per_channel.sqrt();
        Ok(Self { dim, size, gain, patterns })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn gain(&self) -> f32 {
        self.gain
    }

    /// Pixel value offsets `pixel - SPRITE_BASE` for coefficients `f`.
    fn encode(&self, f: &[f32]) -> Vec<f32> {
        let hw = self.size * self.size;
        let mut out = vec![0.0f32; hw * 3];
        for (k, &fk) in f.iter().enumerate() {
            let (c, pat) = (k % 3, &self.patterns[k / 3]);
            for p in 0..hw {
                out[p * 3 + c] += self.gain * fk * pat[p];
            }
        }
        out
    }

    pub fn render_face(&self, f: &IdentityFeature) -> Result<FaceSprite> {
        if f.dim() != self.dim {
            return Err(Error::Shape(format!("feature has dimension {}, codec expects {}", f.dim(), self.dim)));
        }
        let data = self.encode(&f.values).into_iter().map(|v| SPRITE_BASE + v).collect();
        Ok(FaceSprite { pixels: RgbImage::new(self.size, self.size, data)?, source_feature: f.clone() })
    }

    /// Unnormalized linear decode of a crop.
    pub fn decode_raw(&self, crop: &RgbImage) -> Result<Vec<f32>> {
        if crop.width() != self.size || crop.height() != self.size {
            return Err(Error::Shape(format!(
                "crop is {}x{}, sprites are {}x{}",
                crop.width(),
                crop.height(),
                self.size,
                self.size
            )));
        }
        let px = crop.data();
        let hw = self.size * self.size;
        Ok((0..self.dim)
            .map(|k| {
                let (c, pat) = (k % 3, &self.patterns[k / 3]);
                let dot: f64 = (0..hw).map(|p| (px[p * 3 + c] - SPRITE_BASE) as f64 * pat[p] as f64).sum();
                (dot / self.gain as f64) as f32
            })
            .collect())
    }

    pub fn extract_feature(&self, crop: &RgbImage) -> Result<IdentityFeature> {
        Ok(IdentityFeature::from_raw(self.decode_raw(crop)?, -1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_seed;

    fn codec() -> SpriteCodec {
        SpriteCodec::new(64, 32).unwrap()
    }

    #[test]
    fn walsh_patterns_are_orthonormal() {
        let c = SpriteCodec::new(48, 8).unwrap();
        for (i, a) in c.patterns.iter().enumerate() {
            for (j, b) in c.patterns.iter().enumerate() {
                let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5, "patterns {i},{j}: {dot}");
            }
        }
        assert!(c.patterns[0].iter().all(|&v| v == c.patterns[0][0]), "first pattern is flat");
    }

    #[test]
    fn identity_sampling() {
        let a = sample_identity(7, 64);
        assert_eq!(a, sample_identity(7, 64));
        let n: f64 = a.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let feats: Vec<_> = (1..=1000).map(|s| sample_identity(s, 64)).collect();
        let mut min = f32::MAX;
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                min = min.min(feats[i].cosine(&feats[j]));
            }
        }
        assert!(min < 0.9);
    }

    #[test]
    fn round_trip_and_range() {
        let c = codec();
        for s in 0..100 {
            let f = sample_identity(derive_seed(3, "rt", s), 64);
            let sprite = c.render_face(&f).unwrap();
            assert!(sprite.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(c.extract_feature(&sprite.pixels).unwrap().cosine(&f) >= 0.99);
        }
    }

    #[test]
    fn worst_case_feature_stays_in_range() {
        // The feature aligned with every pattern's sign at pixel 0 of channel 0.
        let c = SpriteCodec::new(12, 8).unwrap();
        let raw: Vec<f32> = (0..12).map(|k| if k % 3 == 0 { c.patterns[k / 3][0].signum() } else { 0.0 }).collect();
        let f = IdentityFeature::from_raw(raw, -1);
        let px = c.render_face(&f).unwrap().pixels;
        assert!((px.get(0, 0)[0] - (SPRITE_BASE + SPRITE_SWING)).abs() < 1e-5);
    }

    #[test]
    fn injectivity() {
        let c = codec();
        let f = sample_identity(11, 64);
        let neg = IdentityFeature::from_raw(f.values.iter().map(|v| -v).collect(), -1);
        assert_ne!(c.render_face(&f).unwrap().pixels, c.render_face(&neg).unwrap().pixels);
        let sprites: Vec<_> = (0..100).map(|s| c.render_face(&sample_identity(1000 + s, 64)).unwrap().pixels).collect();
        for i in 0..sprites.len() {
            for j in i + 1..sprites.len() {
                let d: f32 = sprites[i].data().iter().zip(sprites[j].data()).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn degenerate_and_noisy_crops() {
        let c = codec();
        let zero = RgbImage::filled(32, 32, [0.0; 3]);
        let out = c.extract_feature(&zero).unwrap();
        let n: f32 = out.values.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5 && out.values.iter().all(|v| v.is_finite()));
        let mut rng = util::rng(5);
        let mut worst = 1.0f32;
        for s in 0..50 {
            let f = sample_identity(derive_seed(9, "noise", s), 64);
            let mut px = c.render_face(&f).unwrap().pixels;
            for v in px.data_mut() {
                let z: f32 = StandardNormal.sample(&mut rng);
                *v += 0.05 * z;
            }
            worst = worst.min(c.extract_feature(&px).unwrap().cosine(&f));
        }
        assert!(worst >= 0.9, "worst noisy round trip {worst}");
    }

    #[test]
    fn config_errors() {
        assert!(SpriteCodec::new(64, 4).is_err());
        assert!(SpriteCodec::new(64, 12).is_err());
        assert!(SpriteCodec::new(0, 8).is_err());
        assert!(codec().extract_feature(&RgbImage::filled(16, 16, [0.5; 3])).is_err());
        assert!(codec().render_face(&sample_identity(1, 8)).is_err());
    }
}
