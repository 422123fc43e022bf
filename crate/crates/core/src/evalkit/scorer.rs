//! Caption-alignment scorer: projections onto per-label centroids of a
//! coarse, mean-free color layout, turned into a probability with a softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Grid cells per side for pooling.
const GRID: usize = 4;

/// Mean color of each cell of a `GRID x GRID` partition minus the image's
/// mean color, `3 * GRID^2` values.
pub fn pooled_features(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width(), img.height());
    let mut sums = vec![0.0f64; 3 * GRID * GRID];
    let mut counts = vec![0usize; GRID * GRID];
    for y in 0..h {
        let gy = y * GRID / h;
        for x in 0..w {
            let cell = gy * GRID + x * GRID / w;
            let px = img.get(x, y);
            for c in 0..3 {
                sums[cell * 3 + c] += px[c] as f64;
            }
            counts[cell] += 1;
        }
    }
    let cells: Vec<f64> = sums.iter().enumerate().map(|(i, s)| s / counts[i / 3].max(1) as f64).collect();
    let mut mean = [0.0f64; 3];
    for (i, v) in cells.iter().enumerate() {
        mean[i % 3] += v / (GRID * GRID) as f64;
    }
    cells.iter().enumerate().map(|(i, v)| (v - mean[i % 3]) as f32).collect()
}

/// Softmax temperature on projection logits.
const TEMPERATURE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextScorer {
    centroids: Vec<Vec<f32>>,
}

impl TextScorer {
    /// Fits class centroids from labeled images in `[0, 1]`.
    pub fn fit<'a>(samples: impl IntoIterator<Item = (&'a RgbImage, usize)>, num_styles: usize) -> Result<Self> {
        let feats: Vec<(Vec<f32>, usize)> = samples.into_iter().map(|(img, l)| (pooled_features(img), l)).collect();
        let dim = 3 * GRID * GRID;
        let mut sums = vec![vec![0.0f64; dim]; num_styles];
        let mut counts = vec![0usize; num_styles];
        for (f, l) in &feats {
            if *l >= num_styles {
                return Err(Error::Invalid(format!("caption label {l} outside 0..{num_styles}")));
            }
            sums[*l].iter_mut().zip(f).for_each(|(s, &v)| *s += v as f64);
            counts[*l] += 1;
        }
        if let Some(l) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Precondition(format!("no training image for caption label {l}")));
        }
        let centroids: Vec<Vec<f32>> =
            sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| (v / c as f64) as f32).collect()).collect();
        if centroids.iter().any(|c| c.iter().all(|&v| v == 0.0)) {
            return Err(Error::Precondition("a caption label has a flat mean layout".into()));
        }
        Ok(Self { centroids })
    }

    pub fn num_styles(&self) -> usize {
        self.centroids.len()
    }

    /// Softmax over the image's projection coefficient on each centroid.
    pub fn probabilities(&self, img: &RgbImage) -> Vec<f64> {
        let f = pooled_features(img);
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>();
        let logits: Vec<f64> = self.centroids.iter().map(|c| dot(&f, c) / dot(c, c) / TEMPERATURE).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn score(&self, img: &RgbImage, label: usize) -> Result<f64> {
        if label >= self.num_styles() {
            return Err(Error::Invalid(format!("caption label {label} outside 0..{}", self.num_styles())));
        }
        Ok(self.probabilities(img)[label])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthid::{background, sample_identity, World};
    use crate::util::rng;
    use rand::Rng;

    fn scene(label: usize, seed: u64) -> RgbImage {
        let w = World::new(16, 16, 4).unwrap();
        let ids = vec![sample_identity(seed, 16)];
        w.generate_scene(&ids, &[(20, 20)], label, (48, 48), seed % 2 == 0, seed).unwrap().0
    }

    #[test]
    fn own_label_wins_on_held_out_scenes() {
        let train: Vec<(RgbImage, usize)> = (0..40).map(|i| (scene(i % 4, i as u64), i % 4)).collect();
        let s = TextScorer::fit(train.iter().map(|(im, l)| (im, *l)), 4).unwrap();
        let held: Vec<(RgbImage, usize)> = (0..40).map(|i| (scene(i % 4, 1000 + i as u64), i % 4)).collect();
        let wins = held
            .iter()
            .filter(|(im, l)| {
                let own = s.score(im, *l).unwrap();
                (0..4).all(|k| own >= s.score(im, k).unwrap())
            })
            .count();
        assert!(wins as f64 >= 0.95 * held.len() as f64, "{wins}/40");
        assert!(s.score(&held[0].0, 4).is_err());
        assert_eq!(s.probabilities(&held[1].0), s.probabilities(&held[1].0));
    }

    #[test]
    fn uniform_noise_is_near_chance() {
        let train: Vec<(RgbImage, usize)> = (0..4).map(|l| (background(l, 4, 48, 48, l as u64), l)).collect();
        let s = TextScorer::fit(train.iter().map(|(im, l)| (im, *l)), 4).unwrap();
        let mut r = rng(5);
        let noise = RgbImage::new(48, 48, (0..48 * 48 * 3).map(|_| r.random::<f32>()).collect()).unwrap();
        let p = s.probabilities(&noise);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 0.15), "{p:?}");
    }

    #[test]
    fn missing_label_is_rejected() {
        let img = background(0, 4, 16, 16, 0);
        assert!(TextScorer::fit([(&img, 0)], 2).is_err());
        assert!(TextScorer::fit([(&img, 3)], 2).is_err());
    }
}
