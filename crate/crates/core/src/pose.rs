//! Stick-figure skeletons and the line primitive shared by scene rendering
//! and pose rasterization.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// One person's pose as polylines of integer keypoints; each consecutive
/// pair inside a chain is one limb.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub chains: Vec<Vec<[i32; 2]>>,
}

impl Skeleton {
    pub fn limbs(&self) -> impl Iterator<Item = ([i32; 2], [i32; 2])> + '_ {
        self.chains.iter().flat_map(|c| c.windows(2).map(|w| (w[0], w[1])))
    }

    /// Upper-body figure hanging below a nose-tip anchor, scaled to the face
    /// size and jittered by `rng`.
    pub fn for_anchor<R: Rng + ?Sized>(anchor: (usize, usize), face_size: usize, rng: &mut R) -> Self {
        let s = face_size as f32;
        let (x, y) = (anchor.0 as f32, anchor.1 as f32);
        let mut j = |scale: f32| rng.random_range(-scale..=scale) * s;
        let pt = |dx: f32, dy: f32| [(x + dx).round() as i32, (y + dy).round() as i32];
        let neck = pt(0.0, 0.62 * s);
        let (rsh, lsh) = (pt(-0.5 * s, 0.78 * s), pt(0.5 * s, 0.78 * s));
        let relb = pt(-0.72 * s + j(0.1), 1.2 * s + j(0.12));
        let lelb = pt(0.72 * s + j(0.1), 1.2 * s + j(0.12));
        let rwr = pt(-0.6 * s + j(0.25), 1.62 * s + j(0.2));
        let lwr = pt(0.6 * s + j(0.25), 1.62 * s + j(0.2));
        let (rhip, lhip) = (pt(-0.25 * s, 1.85 * s), pt(0.25 * s, 1.85 * s));
        let nose = pt(0.0, 0.0);
        Self {
            chains: vec![
                vec![nose, neck],
                vec![neck, rsh, relb, rwr],
                vec![neck, lsh, lelb, lwr],
                vec![neck, rhip],
                vec![neck, lhip],
            ],
        }
    }
}

/// Integer Bresenham line covering all octants, endpoints included.
pub fn bresenham(a: [i32; 2], b: [i32; 2]) -> Vec<[i32; 2]> {
    let (mut x0, mut y0) = (a[0] as i64, a[1] as i64);
    let (x1, y1) = (b[0] as i64, b[1] as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push([x0 as i32, y0 as i32]);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

/// Calls `paint(x, y)` for every in-bounds pixel of the segment thickened by
/// a square brush of the given radius. Returns whether any brush pixel fell
/// outside the canvas.
pub fn stroke(
    a: [i32; 2],
    b: [i32; 2],
    radius: usize,
    width: usize,
    height: usize,
    mut paint: impl FnMut(usize, usize),
) -> bool {
    let r = radius as i64;
    let mut clipped = false;
    for [px, py] in bresenham(a, b) {
        for yy in py as i64 - r..=py as i64 + r {
            for xx in px as i64 - r..=px as i64 + r {
                if xx < 0 || yy < 0 || xx >= width as i64 || yy >= height as i64 {
                    clipped = true;
                    continue;
                }
                paint(xx as usize, yy as usize);
            }
        }
    }
    clipped
}
