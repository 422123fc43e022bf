//! Evaluation: identity resemblance, identity-position association, caption
//! alignment and generation time, plus report and plot output.

mod plot;
mod protocol;
mod scorer;

pub use plot::{emit_comparison, emit_report, PLOT_FILES};
pub use protocol::{run_protocol, Aggregates, EvalConfig, EvalReport, NBreakdown, SceneRecord, REPORT_SCHEMA_VERSION};
pub use scorer::{pooled_features, TextScorer};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::synthid::{IdentityFeature, World};
use crate::util::{derive_seed, rng};

/// `size x size` crops centered on each anchor, clamped inward.
pub fn crop_faces(image: &RgbImage, locations: &[(usize, usize)], size: usize) -> Result<Vec<RgbImage>> {
    if size == 0 || size > image.width() || size > image.height() {
        return Err(Error::Invalid(format!("crop size {size} does not fit a {}x{} image", image.width(), image.height())));
    }
    locations
        .iter()
        .map(|&(x, y)| {
            if x >= image.width() || y >= image.height() {
                return Err(Error::Invalid(format!("anchor ({x}, {y}) outside the image")));
            }
            image.crop_centered(x as i64, y as i64, size)
        })
        .collect()
}

/// The evaluation-side face embedder: the oracle decoder followed by a fixed
/// near-orthogonal linear map, so evaluation features differ from the
/// features the model was conditioned on.
#[derive(Clone, Debug)]
pub struct EvalExtractor {
    world: World,
    /// Row-major `D x D`.
    map: Vec<f64>,
    dim: usize,
}

impl EvalExtractor {
    pub const DEFAULT_SEED: u64 = 0x5eed_e7a1;
    pub const DEFAULT_NOISE: f64 = 0.1;

    pub fn new(world: World, seed: u64, noise: f64) -> Self {
        let dim = world.codec.dim();
        let mut r = rng(derive_seed(seed, "eval-extractor", 0));
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut r)).collect() };
        // Gram-Schmidt on a Gaussian matrix gives a random orthogonal basis.
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while q.len() < dim {
            let mut v = gauss(dim);
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                q.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let perturb = gauss(dim * dim);
        let scale = noise / (dim as f64).sqrt();
        let map = q.into_iter().flatten().zip(perturb).map(|(a, p)| a + scale * p).collect();
        Self { world, map, dim }
    }

    pub fn for_world(world: World) -> Self {
        Self::new(world, Self::DEFAULT_SEED, Self::DEFAULT_NOISE)
    }

    pub fn crop_size(&self) -> usize {
        self.world.sprite_size()
    }

    fn apply(&self, f: &[f32]) -> Vec<f32> {
        let mut out: Vec<f64> =
            self.map.chunks_exact(self.dim).map(|row| row.iter().zip(f).map(|(a, &b)| a * b as f64).sum()).collect();
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            out.iter_mut().for_each(|v| *v /= n);
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Embedding of a face crop.
    pub fn embed(&self, crop: &RgbImage) -> Result<Vec<f32>> {
        Ok(self.apply(&self.world.extract_feature(crop)?.values))
    }

    /// Embedding of a reference identity, equal to embedding its rendered face.
    pub fn embed_reference(&self, f: &IdentityFeature) -> Result<Vec<f32>> {
        if f.dim() != self.dim {
            return Err(Error::Shape(format!("reference has {} dims, extractor expects {}", f.dim(), self.dim)));
        }
        Ok(self.apply(&f.values))
    }
}

/// Cosine similarities between generated faces (rows) and input faces.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Shape(format!("similarity matrix row of length {} in a {n}-row matrix", r.len())));
        }
        Ok(Self { n, data: rows.into_iter().flatten().collect() })
    }

    pub fn from_embeddings(generated: &[Vec<f32>], inputs: &[Vec<f32>]) -> Result<Self> {
        if generated.len() != inputs.len() {
            return Err(Error::Shape(format!("{} generated faces, {} input faces", generated.len(), inputs.len())));
        }
        Self::new(generated.iter().map(|g| inputs.iter().map(|f| crate::util::cosine(g, f) as f64).collect()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Most similar input face for generated face `i`; ties go to the lowest index.
    pub fn argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

/// Fraction of generated faces whose most similar input is their own.
pub fn association_accuracy(s: &SimilarityMatrix) -> Result<f64> {
    if s.n == 0 {
        return Err(Error::Invalid("association accuracy needs at least one face".into()));
    }
    let hits = (0..s.n).filter(|&i| s.argmax(i) == i).count();
    Ok(hits as f64 / s.n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resemblance {
    pub scores: Vec<f64>,
    /// `None` for an empty input.
    pub mean: Option<f64>,
}

/// Per-face cosine between the generated crop's and the reference's embeddings.
pub fn resemblance(ex: &EvalExtractor, crops: &[RgbImage], refs: &[IdentityFeature]) -> Result<Resemblance> {
    if crops.len() != refs.len() {
        return Err(Error::Shape(format!("{} crops but {} references", crops.len(), refs.len())));
    }
    let scores: Vec<f64> = crops
        .iter()
        .zip(refs)
        .map(|(c, r)| Ok(crate::util::cosine(&ex.embed(c)?, &ex.embed_reference(r)?) as f64))
        .collect::<Result<_>>()?;
    let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    Ok(Resemblance { scores, mean })
}
