//! Ancestral sampling with the two-phase token schedule: the first part of
//! the trajectory sees ID patches only, the rest sees patches and tokens.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condimage::rasterize_pose;
use crate::diffusion_core::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{CondOptions, IdPatchModel, Projected, SceneCond};
use crate::nn::{Graph, ParamStore, Tensor};
use crate::pose::Skeleton;
use crate::raster::RgbImage;
use crate::synthid::IdentityFeature;
use crate::trainer::{Checkpoint, Stage};
use crate::util::{derive_seed, rng};

fn yes() -> bool {
    true
}

fn default_steps() -> usize {
    50
}

fn default_fraction() -> f64 {
    0.2
}

fn default_guidance() -> f64 {
    3.0
}

fn default_stroke() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub identities: Vec<IdentityFeature>,
    pub locations: Vec<(usize, usize)>,
    pub caption_label: usize,
    #[serde(default)]
    pub pose: Option<Vec<Skeleton>>,
    #[serde(default = "default_stroke")]
    pub pose_stroke_radius: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Withhold ID tokens for the leading part of the trajectory.
    #[serde(default = "yes")]
    pub two_stage: bool,
    #[serde(default = "default_fraction")]
    pub stage_boundary_fraction: f64,
    /// Classifier-free guidance on the caption; 1 disables it.
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    /// Ablation switches: drop the patch or token projection at inference.
    #[serde(default = "yes")]
    pub use_patches: bool,
    #[serde(default = "yes")]
    pub use_tokens: bool,
}

impl GenerationRequest {
    pub fn new(identities: Vec<IdentityFeature>, locations: Vec<(usize, usize)>, caption_label: usize, seed: u64) -> Self {
        Self {
            identities,
            locations,
            caption_label,
            pose: None,
            pose_stroke_radius: default_stroke(),
            seed,
            steps: default_steps(),
            two_stage: true,
            stage_boundary_fraction: default_fraction(),
            guidance: default_guidance(),
            use_patches: true,
            use_tokens: true,
        }
    }

    /// Number of leading iterations that run without ID tokens.
    pub fn tokenless_steps(&self) -> usize {
        if !self.use_tokens {
            self.steps
        } else if self.two_stage {
            (self.stage_boundary_fraction * self.steps as f64).floor() as usize
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedImage {
    /// `[0, 1]` RGB.
    pub pixels: RgbImage,
    pub request: GenerationRequest,
    pub seconds: f64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    request: &'a GenerationRequest,
    seed: u64,
    seconds: f64,
    config_hash: &'a str,
}

impl GeneratedImage {
    /// Writes `<stem>.png` and a `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str, config_hash: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}.png"));
        self.pixels.save_png(&png, 0.0, 1.0)?;
        let json = dir.join(format!("{stem}.json"));
        let side = Sidecar { request: &self.request, seed: self.request.seed, seconds: self.seconds, config_hash };
        std::fs::write(&json, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&json, e))?;
        Ok((png, json))
    }
}

/// Evenly spaced training timesteps, descending, `steps` of them.
pub fn timestep_subset(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Invalid(format!("{steps} sampling steps with a {total}-step schedule")));
    }
    if steps == 1 {
        return Ok(vec![total - 1]);
    }
    Ok((0..steps).rev().map(|i| ((i * (total - 1)) as f64 / (steps - 1) as f64).round() as usize).collect())
}

/// One ancestral update from `ts[i]` to `ts[i + 1]` (or to `x0` after the
/// last index) given the predicted noise.
pub fn denoise_step<R: Rng + ?Sized>(
    sched: &NoiseSchedule,
    ts: &[usize],
    i: usize,
    x_t: &Tensor<f32>,
    eps: &Tensor<f32>,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let t = *ts.get(i).ok_or_else(|| Error::Invalid(format!("step index {i} outside {} steps", ts.len())))?;
    sched.check_t(t)?;
    if x_t.shape() != eps.shape() {
        return Err(Error::Shape(format!("x_t {:?} vs eps {:?}", x_t.shape(), eps.shape())));
    }
    if !x_t.all_finite() || !eps.all_finite() {
        return Err(Error::Numerical(format!("non-finite input at step {i} (t = {t})")));
    }
    let ab = sched.alpha_bars[t];
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0: Vec<f64> =
        x_t.data().iter().zip(eps.data()).map(|(&x, &e)| ((x as f64 - sb * e as f64) / sa).clamp(-1.0, 1.0)).collect();
    let Some(&prev) = ts.get(i + 1) else {
        return Ok(Tensor::new(x_t.shape().to_vec(), x0.into_iter().map(|v| v as f32).collect()));
    };
    sched.check_t(prev)?;
    let ab_prev = sched.alpha_bars[prev];
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
    let out = x_t
        .data()
        .iter()
        .zip(x0)
        .map(|(&x, x0)| {
            let z: f64 = rng.sample(StandardNormal);
            (c0 * x0 + ct * x as f64 + sigma * z) as f32
        })
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), out))
}

/// A checkpoint instantiated for inference.
pub struct Sampler {
    pub model: IdPatchModel,
    pub store: ParamStore<f32>,
    pub stage: Stage,
    config_hash: String,
}

impl Sampler {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self { model: ckpt.instantiate()?, store: ckpt.params.clone(), stage: ckpt.stage, config_hash: ckpt.config_hash() })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn validate(&self, req: &GenerationRequest) -> Result<()> {
        let c = &self.model.cfg;
        if req.identities.len() != req.locations.len() {
            return Err(Error::Invalid(format!(
                "{} identities but {} locations",
                req.identities.len(),
                req.locations.len()
            )));
        }
        if let Some((i, &(x, y))) = req.locations.iter().enumerate().find(|(_, &(x, y))| x >= c.width || y >= c.height) {
            return Err(Error::Invalid(format!("location {i} ({x}, {y}) outside the {}x{} canvas", c.width, c.height)));
        }
        if let Some(f) = req.identities.iter().find(|f| f.dim() != c.projector.feature_dim) {
            return Err(Error::Shape(format!("identity feature has {} dims, checkpoint expects {}", f.dim(), c.projector.feature_dim)));
        }
        if req.caption_label >= c.num_styles {
            return Err(Error::Invalid(format!("caption label {} outside 0..{}", req.caption_label, c.num_styles)));
        }
        if !(0.0..=1.0).contains(&req.stage_boundary_fraction) {
            return Err(Error::Invalid(format!("stage boundary fraction {} outside [0, 1]", req.stage_boundary_fraction)));
        }
        if !req.guidance.is_finite() {
            return Err(Error::Invalid("guidance scale must be finite".into()));
        }
        timestep_subset(self.model.schedule.len(), req.steps)?;
        if req.use_tokens && self.stage == Stage::One && !req.identities.is_empty() {
            return Err(Error::Precondition("ID tokens need a stage-2 or single-stage checkpoint; set use_tokens = false".into()));
        }
        if let Some(p) = &req.pose {
            if p.len() != req.identities.len() {
                return Err(Error::Invalid("one pose skeleton per identity is required".into()));
            }
        }
        Ok(())
    }

    pub fn sample(&self, req: &GenerationRequest) -> Result<GeneratedImage> {
        self.validate(req)?;
        let start = Instant::now();
        let c = &self.model.cfg;
        let (h, w) = (c.height, c.width);
        let scene = SceneCond {
            features: req.identities.iter().map(|f| f.values.clone()).collect(),
            locations: req.locations.clone(),
            caption: req.caption_label,
            base: req.pose.as_ref().map(|p| rasterize_pose(p, (h, w), req.pose_stroke_radius).pixels),
        };
        let guided = req.guidance != 1.0;
        let scenes: Vec<SceneCond> = if guided { vec![scene.clone(), scene] } else { vec![scene] };
        let text: Vec<bool> = if guided { vec![true, false] } else { vec![true] };

        // Projections are fixed for the whole trajectory.
        let (patches, tokens) = {
            let mut g = Graph::new(&self.store);
            let p = self.model.project(&mut g, &scenes[..1], req.use_tokens);
            (p.patches.map(|v| g.value(v).clone()), p.tokens.map(|v| g.value(v).clone()))
        };
        let dup = |t: Tensor<f32>| {
            if !guided {
                return t;
            }
            let mut shape = t.shape().to_vec();
            shape[0] *= 2;
            let data = t.data().iter().chain(t.data()).copied().collect();
            Tensor::new(shape, data)
        };
        let patches = patches.map(dup);
        let tokens = tokens.map(dup);

        let ts = timestep_subset(self.model.schedule.len(), req.steps)?;
        let tokenless = req.tokenless_steps();
        let mut r = rng(derive_seed(req.seed, "sample", 0));
        let n = 3 * h * w;
        let mut x = Tensor::new([1, 3, h, w], (0..n).map(|_| r.sample::<f32, _>(StandardNormal)).collect());
        for (i, &t) in ts.iter().enumerate() {
            let use_tokens = req.use_tokens && i >= tokenless;
            let eps = {
                let mut g = Graph::new(&self.store);
                let proj = Projected {
                    patches: patches.clone().map(|p| g.constant(p)),
                    tokens: tokens.clone().filter(|_| use_tokens).map(|p| g.constant(p)),
                };
                let opts = CondOptions { patches: req.use_patches, tokens: use_tokens, text: text.clone() };
                let xin = if guided { dup(x.clone()) } else { x.clone() };
                let xv = g.constant(xin);
                let tt = vec![t; scenes.len()];
                let out = self.model.eps(&mut g, xv, &tt, &scenes, &proj, &opts, true);
                let v = g.value(out).data();
                let e: Vec<f32> = if guided {
                    let s = req.guidance as f32;
                    v[..n].iter().zip(&v[n..]).map(|(&c, &u)| u + s * (c - u)).collect()
                } else {
                    v.to_vec()
                };
                Tensor::new([1, 3, h, w], e)
            };
            x = denoise_step(&self.model.schedule, &ts, i, &x, &eps, &mut r)?;
        }
        let pixels = RgbImage::from_chw(w, h, x.data())?.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0));
        if !pixels.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("sampler produced non-finite pixels".into()));
        }
        let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        Ok(GeneratedImage { pixels, request: req.clone(), seconds })
    }
}

/// Convenience wrapper that instantiates the checkpoint for one request.
pub fn sample(req: &GenerationRequest, ckpt: &Checkpoint) -> Result<GeneratedImage> {
    Sampler::new(ckpt)?.sample(req)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n: usize,
    pub runs: usize,
    pub mean_seconds: f64,
    pub min_seconds: f64,
}

/// Mean generation time per identity count. `make(n)` builds the request
/// for `n` identities; model loading is outside the timed region.
pub fn benchmark_generation(
    sampler: &Sampler,
    n_values: &[usize],
    runs: usize,
    make: impl Fn(usize) -> GenerationRequest,
) -> Result<Vec<TimingRow>> {
    let runs = runs.max(3);
    let mut rows = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let req = make(n);
        // Warm-up run, not timed.
        sampler.sample(&req)?;
        let times: Vec<f64> = (0..runs).map(|_| sampler.sample(&req).map(|g| g.seconds)).collect::<Result<_>>()?;
        rows.push(TimingRow {
            n,
            runs,
            mean_seconds: times.iter().sum::<f64>() / runs as f64,
            min_seconds: times.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    Ok(rows)
}
