//! Conditioning images: ID patches placed on a black (or pose) canvas.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::KEEP_BASE;
use crate::pose::{self, Skeleton};
use crate::projector::IdPatch;
use crate::raster::{clamp_box_start, RgbImage};

/// Background value of conditioning images.
pub const BLACK: f32 = -1.0;

/// Limb colors in `[-1, 1]`, cycled by limb index.
const LIMB_COLORS: [[f32; 3]; 8] = [
    [1.0, -1.0, -1.0],
    [1.0, 0.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [0.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub anchor: (usize, usize),
    /// Top-left corner of the patch box.
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub identity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningImage {
    pub pixels: RgbImage,
    pub placements: Vec<Placement>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseImage {
    pub pixels: RgbImage,
    pub skeletons: Vec<Skeleton>,
    /// Set when some stroke pixels fell outside the canvas and were dropped.
    pub clipped: bool,
}

/// Patch boxes for `locations`, clamped inward, in identity order.
pub fn placements(locations: &[(usize, usize)], patch: usize, canvas: (usize, usize)) -> Result<Vec<Placement>> {
    let (h, w) = canvas;
    if h == 0 || w == 0 {
        return Err(Error::Invalid("canvas has an empty dimension".into()));
    }
    if patch == 0 || patch > h || patch > w {
        return Err(Error::Invalid(format!("patch of size {patch} does not fit a {w}x{h} canvas")));
    }
    Ok(locations
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Placement {
            anchor: (x, y),
            x0: clamp_box_start(x as i64, patch, w),
            y0: clamp_box_start(y as i64, patch, h),
            size: patch,
            identity: i,
        })
        .collect())
}

/// Copies each patch (overwrite, later on top) centered at its location.
/// Pixels outside every patch box come from `base`, or black.
pub fn compose_canvas(
    patches: &[IdPatch],
    locations: &[(usize, usize)],
    canvas: (usize, usize),
    base: Option<&RgbImage>,
) -> Result<ConditioningImage> {
    if patches.len() != locations.len() {
        return Err(Error::Invalid(format!("{} patches but {} locations", patches.len(), locations.len())));
    }
    let (h, w) = canvas;
    let size = patches.first().map_or(1, |p| p.pixels.width());
    if let Some(p) = patches.iter().find(|p| p.pixels.width() != size || p.pixels.height() != size) {
        return Err(Error::Shape(format!("patch of label {} is not {size}x{size}", p.source_label)));
    }
    let placed = placements(locations, size, canvas)?;
    let mut pixels = match base {
        Some(b) if (b.height(), b.width()) != canvas => {
            return Err(Error::Shape(format!("base is {}x{}, canvas is {w}x{h}", b.width(), b.height())))
        }
        Some(b) => b.clone(),
        None => RgbImage::filled(w, h, [BLACK; 3]),
    };
    for (p, pl) in patches.iter().zip(&placed) {
        pixels.paste(&p.pixels, pl.x0, pl.y0);
    }
    Ok(ConditioningImage { pixels, placements: placed })
}

/// [`compose_canvas`] with a required base condition (pose, edges, ...).
pub fn overlay_alternate_condition(
    base: &RgbImage,
    patches: &[IdPatch],
    locations: &[(usize, usize)],
) -> Result<ConditioningImage> {
    compose_canvas(patches, locations, (base.height(), base.width()), Some(base))
}

/// Draws every limb with a square brush in its fixed color on black.
pub fn rasterize_pose(skeletons: &[Skeleton], canvas: (usize, usize), stroke_radius: usize) -> PoseImage {
    let (h, w) = canvas;
    let mut pixels = RgbImage::filled(w, h, [BLACK; 3]);
    let mut clipped = false;
    for skel in skeletons {
        for (li, (a, b)) in skel.limbs().enumerate() {
            let color = LIMB_COLORS[li % LIMB_COLORS.len()];
            clipped |= pose::stroke(a, b, stroke_radius, w, h, |x, y| pixels.set(x, y, color));
        }
    }
    if clipped {
        log::debug!("pose strokes clipped at the {w}x{h} canvas border");
    }
    PoseImage { pixels, skeletons: skeletons.to_vec(), clipped }
}

/// Index map for [`crate::nn::Graph::overlay`] that writes patch values into
/// a batch of `[B, 3, H, W]` canvases.
///
/// The source tensor holds every patch of the batch back to back, each as
/// planar `3 x P x P`, in the order of `layouts` then identity index.
pub fn overlay_map(layouts: &[Vec<(usize, usize)>], patch: usize, canvas: (usize, usize)) -> Result<Vec<u32>> {
    let (h, w) = canvas;
    let mut map = vec![KEEP_BASE; layouts.len() * 3 * h * w];
    let pp = patch * patch;
    let mut src = 0usize;
    for (b, locs) in layouts.iter().enumerate() {
        for pl in placements(locs, patch, canvas)? {
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        let dst = ((b * 3 + c) * h + pl.y0 + py) * w + pl.x0 + px;
                        map[dst] = (src + c * pp + py * patch + px) as u32;
                    }
                }
            }
            src += 3 * pp;
        }
    }
    Ok(map)
}

impl ConditioningImage {
    /// Writes `<stem>.png` (affine `[-1, 1] -> [0, 255]`) and
    /// `<stem>.placements.json`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}.png"));
        self.pixels.save_png(&png, -1.0, 1.0)?;
        let json = dir.join(format!("{stem}.placements.json"));
        fs::write(&json, serde_json::to_vec_pretty(&self.placements)?).map_err(|e| Error::io(&json, e))?;
        Ok((png, json))
    }

    /// Reads back the box of placement `i`.
    pub fn read_patch(&self, i: usize) -> RgbImage {
        let p = &self.placements[i];
        self.pixels.crop(p.x0, p.y0, p.size, p.size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, ParamStore, Tensor};
    use crate::pose::bresenham;

    fn patch(size: usize, v: f32, label: i64) -> IdPatch {
        IdPatch { pixels: RgbImage::filled(size, size, [v, -v, v * 0.5]), source_label: label }
    }

    #[test]
    fn placement_arithmetic() {
        let c = compose_canvas(&[patch(16, 0.5, 0)], &[(64, 64)], (128, 128), None).unwrap();
        for y in 0..128 {
            for x in 0..128 {
                let inside = (56..72).contains(&x) && (56..72).contains(&y);
                assert_eq!(c.pixels.get(x, y)[1] != BLACK, inside, "({x},{y})");
            }
        }
        let c = compose_canvas(&[patch(16, 0.5, 0)], &[(4, 64)], (128, 128), None).unwrap();
        assert_eq!((c.placements[0].x0, c.placements[0].y0), (0, 56));
    }

    #[test]
    fn empty_and_overlap() {
        let c = compose_canvas(&[], &[], (32, 32), None).unwrap();
        assert!(c.pixels.data().iter().all(|&v| v == BLACK));
        let base = RgbImage::filled(32, 32, [0.25; 3]);
        assert_eq!(overlay_alternate_condition(&base, &[], &[]).unwrap().pixels, base);
        let ps = [patch(8, 0.5, 0), patch(8, 0.9, 1)];
        let c = compose_canvas(&ps, &[(10, 10), (14, 12)], (32, 32), None).unwrap();
        assert_eq!(c.read_patch(1), ps[1].pixels);
        assert_eq!(c.pixels.get(10, 10), ps[1].pixels.get(0, 0));
        assert_eq!(c.pixels.get(6, 6), ps[0].pixels.get(0, 0));
    }

    #[test]
    fn base_preserved_and_equivalent() {
        let mut base = RgbImage::filled(32, 32, [0.0; 3]);
        base.set(0, 0, [0.7, 0.1, -0.2]);
        let ps = [patch(8, 0.3, 0)];
        let a = overlay_alternate_condition(&base, &ps, &[(20, 20)]).unwrap();
        let b = compose_canvas(&ps, &[(20, 20)], (32, 32), Some(&base)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels.get(0, 0), [0.7, 0.1, -0.2]);
    }

    #[test]
    fn errors() {
        assert!(compose_canvas(&[patch(8, 0.1, 0)], &[], (32, 32), None).is_err());
        assert!(compose_canvas(&[patch(64, 0.1, 0)], &[(1, 1)], (32, 32), None).is_err());
        assert!(compose_canvas(&[], &[], (0, 32), None).is_err());
    }

    #[test]
    fn single_limb_matches_line_oracle() {
        let sk = Skeleton { chains: vec![vec![[3, 4], [20, 11]]] };
        let img = rasterize_pose(&[sk.clone()], (32, 32), 1);
        assert!(!img.clipped);
        let mut want = std::collections::HashSet::new();
        for [x, y] in bresenham([3, 4], [20, 11]) {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    want.insert((x + dx, y + dy));
                }
            }
        }
        for y in 0..32 {
            for x in 0..32 {
                let lit = img.pixels.get(x, y) != [BLACK; 3];
                assert_eq!(lit, want.contains(&(x as i32, y as i32)));
            }
        }
        assert_eq!(rasterize_pose(&[sk.clone()], (32, 32), 1), img);
        assert!(rasterize_pose(&[], (8, 8), 1).pixels.data().iter().all(|&v| v == BLACK));
        assert!(rasterize_pose(&[sk], (8, 8), 1).clipped);
    }

    #[test]
    fn overlay_map_agrees_with_compose() {
        let (h, w, p) = (20, 24, 6);
        let locs = vec![vec![(2, 3), (12, 10)], vec![(23, 19)]];
        let mut patches = Vec::new();
        let mut flat = Vec::new();
        for (i, _) in locs.iter().flatten().enumerate() {
            let chw: Vec<f32> = (0..3 * p * p).map(|k| ((k + 31 * i) % 17) as f32 / 17.0).collect();
            patches.push(IdPatch { pixels: RgbImage::from_chw(p, p, &chw).unwrap(), source_label: i as i64 });
            flat.extend(chw);
        }
        let map = overlay_map(&locs, p, (h, w)).unwrap();
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store);
        let base = g.constant(Tensor::full([2, 3, h, w], BLACK));
        let src = g.constant(Tensor::new([flat.len()], flat));
        let out = g.overlay(base, src, map);
        let data = g.value(out).data();
        let mut k = 0;
        for (b, l) in locs.iter().enumerate() {
            let want = compose_canvas(&patches[k..k + l.len()], l, (h, w), None).unwrap().pixels.to_chw();
            assert_eq!(&data[b * 3 * h * w..(b + 1) * 3 * h * w], want.as_slice());
            k += l.len();
        }
    }
}
