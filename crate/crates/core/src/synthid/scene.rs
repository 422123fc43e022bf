use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FaceSprite, IdentityFeature, SpriteCodec};
use crate::error::{Error, Result};
use crate::pose::{self, Skeleton};
use crate::raster::{clamp_box_start, RgbImage};
use crate::util;

const BACKGROUND_MEAN: f32 = 0.5;
const BACKGROUND_AMPLITUDE: f32 = 0.3;
const BACKGROUND_NOISE: f32 = 0.02;
const BODY_COLOR: [f32; 3] = [0.12, 0.12, 0.16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    /// Nose-tip anchors as `(x, y)` pixel coordinates.
    pub locations: Vec<(usize, usize)>,
    pub identities: Vec<IdentityFeature>,
    pub caption_label: usize,
    pub pose_skeletons: Option<Vec<Skeleton>>,
}

/// Caption-styled background: a zero-mean color pattern plus faint noise.
///
/// Style `k` picks a hue from an evenly spaced wheel and one of four equal
/// energy spatial patterns, so styles differ in both color and layout.
pub fn background(label: usize, num_styles: usize, height: usize, width: usize, seed: u64) -> RgbImage {
    let theta = std::f32::consts::TAU * label as f32 / num_styles.max(1) as f32;
    let third = std::f32::consts::TAU / 3.0;
    let color = [theta.cos(), (theta - third).cos(), (theta + third).cos()];
    let tau = std::f32::consts::TAU;
    let noise = Normal::new(0.0f32, BACKGROUND_NOISE).expect("valid std");
    let mut rng = util::rng(seed);
    let mut img = RgbImage::filled(width, height, [0.0; 3]);
    for y in 0..height {
        let v = y as f32 / height as f32;
        for x in 0..width {
            let u = x as f32 / width as f32;
            let pattern = match label % 4 {
                0 => (tau * u).cos(),
                1 => (tau * v).cos(),
                2 => (tau * (u + v)).cos(),
                _ => std::f32::consts::SQRT_2 * (tau * u).cos() * (tau * v).cos(),
            };
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let val = BACKGROUND_MEAN + BACKGROUND_AMPLITUDE * color[c] * pattern + noise.sample(&mut rng);
                rgb[c] = val.clamp(0.0, 1.0);
            }
            img.set(x, y, rgb);
        }
    }
    img
}

/// The rendering context for scenes: sprite code plus caption vocabulary.
#[derive(Clone, Debug)]
pub struct World {
    pub codec: SpriteCodec,
    pub num_styles: usize,
}

impl World {
    pub fn new(feature_dim: usize, sprite_size: usize, num_styles: usize) -> Result<Self> {
        if num_styles == 0 {
            return Err(Error::Config("at least one caption style is required".into()));
        }
        Ok(Self { codec: SpriteCodec::new(feature_dim, sprite_size)?, num_styles })
    }

    pub fn sprite_size(&self) -> usize {
        self.codec.size()
    }

    pub fn render_face(&self, f: &IdentityFeature) -> Result<FaceSprite> {
        self.codec.render_face(f)
    }

    pub fn extract_feature(&self, crop: &RgbImage) -> Result<IdentityFeature> {
        self.codec.extract_feature(crop)
    }

    /// Stroke radius used for bodies and pose images at this sprite size.
    pub fn stroke_radius(&self) -> usize {
        (self.sprite_size() / 16).max(1)
    }

    /// Checks anchors are in bounds and that the (inward-clamped) sprite
    /// boxes do not overlap.
    pub fn check_layout(&self, locations: &[(usize, usize)], height: usize, width: usize) -> Result<()> {
        let s = self.sprite_size();
        if s > height || s > width {
            return Err(Error::Config(format!("{width}x{height} canvas cannot hold {s}x{s} sprites")));
        }
        for (i, &(x, y)) in locations.iter().enumerate() {
            if x >= width || y >= height {
                return Err(Error::Invalid(format!("location {i} ({x}, {y}) is outside the {width}x{height} canvas")));
            }
        }
        let starts: Vec<(usize, usize)> = locations
            .iter()
            .map(|&(x, y)| (clamp_box_start(x as i64, s, width), clamp_box_start(y as i64, s, height)))
            .collect();
        for i in 0..starts.len() {
            for j in i + 1..starts.len() {
                let (a, b) = (starts[i], starts[j]);
                if a.0.abs_diff(b.0) < s && a.1.abs_diff(b.1) < s {
                    return Err(Error::Overlap {
                        first: i,
                        second: j,
                        detail: format!(
                            "faces at {:?} and {:?} are closer than the sprite size {s}",
                            locations[i], locations[j]
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Renders a scene: background for `caption_label`, optional stick
    /// bodies, then each identity's sprite centered on its anchor.
    pub fn generate_scene(
        &self,
        identities: &[IdentityFeature],
        locations: &[(usize, usize)],
        caption_label: usize,
        canvas: (usize, usize),
        with_pose: bool,
        seed: u64,
    ) -> Result<(RgbImage, SceneAnnotation)> {
        let (height, width) = canvas;
        if identities.len() != locations.len() {
            return Err(Error::Invalid(format!(
                "{} identities but {} locations",
                identities.len(),
                locations.len()
            )));
        }
        if caption_label >= self.num_styles {
            return Err(Error::Invalid(format!("caption label {caption_label} outside {} styles", self.num_styles)));
        }
        self.check_layout(locations, height, width)?;
        let sprites = identities.iter().map(|f| self.render_face(f)).collect::<Result<Vec<_>>>()?;

        let mut img = background(caption_label, self.num_styles, height, width, util::derive_seed(seed, "bg", 0));
        let skeletons = with_pose.then(|| {
            let mut rng = util::rng(util::derive_seed(seed, "pose", 0));
            locations.iter().map(|&a| Skeleton::for_anchor(a, self.sprite_size(), &mut rng)).collect::<Vec<_>>()
        });
        if let Some(sk) = &skeletons {
            for skel in sk {
                for (a, b) in skel.limbs() {
                    pose::stroke(a, b, self.stroke_radius(), width, height, |x, y| img.set(x, y, BODY_COLOR));
                }
            }
        }
        let s = self.sprite_size();
        for (sprite, &(x, y)) in sprites.iter().zip(locations) {
            let x0 = clamp_box_start(x as i64, s, width);
            let y0 = clamp_box_start(y as i64, s, height);
            img.paste(&sprite.pixels, x0, y0);
        }
        let ann = SceneAnnotation {
            locations: locations.to_vec(),
            identities: identities.to_vec(),
            caption_label,
            pose_skeletons: skeletons,
        };
        Ok((img, ann))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthid::sample_identity;

    fn world() -> World {
        World::new(64, 32, 4).unwrap()
    }

    #[test]
    fn centered_face_round_trips() {
        let w = world();
        let f = sample_identity(21, 64);
        let (img, ann) = w.generate_scene(&[f.clone()], &[(64, 64)], 2, (128, 128), true, 9).unwrap();
        assert_eq!(ann.locations, vec![(64, 64)]);
        let crop = img.crop_centered(64, 64, 32).unwrap();
        assert!(w.extract_feature(&crop).unwrap().cosine(&f) >= 0.99);
    }

    #[test]
    fn empty_scene_is_background() {
        let w = world();
        let (img, ann) = w.generate_scene(&[], &[], 1, (64, 96), false, 3).unwrap();
        assert_eq!(img, background(1, 4, 64, 96, util::derive_seed(3, "bg", 0)));
        assert!(ann.identities.is_empty() && ann.pose_skeletons.is_none());
    }

    #[test]
    fn scenes_are_deterministic() {
        let w = world();
        let ids = [sample_identity(1, 64), sample_identity(2, 64)];
        let locs = [(20, 20), (90, 70)];
        let a = w.generate_scene(&ids, &locs, 0, (128, 128), true, 5).unwrap();
        let b = w.generate_scene(&ids, &locs, 0, (128, 128), true, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlap_names_the_pair() {
        let w = world();
        let ids = [sample_identity(1, 64), sample_identity(2, 64), sample_identity(3, 64)];
        let err = w.generate_scene(&ids, &[(20, 20), (90, 90), (100, 80)], 0, (128, 128), false, 1).unwrap_err();
        match err {
            Error::Overlap { first, second, .. } => assert_eq!((first, second), (1, 2)),
            other => panic!("unexpected {other}"),
        }
        assert!(w.generate_scene(&ids[..1], &[(128, 3)], 0, (128, 128), false, 1).is_err());
    }

    #[test]
    fn styles_differ() {
        let a = background(0, 4, 32, 32, 1);
        let b = background(1, 4, 32, 32, 1);
        assert_ne!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
