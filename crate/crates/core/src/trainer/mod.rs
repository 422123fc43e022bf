//! Two-stage training: patches only, then patches plus ID tokens.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condimage::rasterize_pose;
use crate::diffusion_core::ldm_loss;
use crate::error::{Error, Result};
use crate::model::{CondOptions, IdPatchModel, ModelConfig, SceneCond};
use crate::nn::{clip_global_norm, cosine_lr, AdamW, Graph, ParamStore, Tensor};
use crate::raster::load_rgb8;
use crate::synthid::{DatasetManifest, ManifestRecord};
use crate::util::{derive_seed, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Patches only; the token head is left out of the graph.
    #[serde(rename = "1")]
    One,
    /// Patches and ID tokens, fine-tuning a stage-1 result.
    #[serde(rename = "2")]
    Two,
    /// Patches and ID tokens from the first step.
    #[serde(rename = "single")]
    Single,
}

impl Stage {
    pub fn uses_tokens(self) -> bool {
        !matches!(self, Stage::One)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "single" => Ok(Stage::Single),
            other => Err(Error::Config(format!("unknown stage {other:?}; expected 1, 2 or single"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Single => "single",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Probability of replacing a sample's caption with the null caption.
    pub text_dropout: f64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub log_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-4,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            text_dropout: 0.1,
            stage1_steps: 6000,
            stage2_steps: 6000,
            log_every: 50,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("text_dropout and min_lr_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One training run's inputs.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub hyper: TrainerConfig,
    pub model: ModelConfig,
    pub seed: u64,
    /// Line-delimited JSON loss log, appended to when set.
    pub metrics: Option<PathBuf>,
}

/// Training images held in memory as 8-bit RGB.
pub struct TrainingData {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub num_styles: usize,
    pub stroke_radius: usize,
    pub records: Vec<ManifestRecord>,
    pixels: Vec<Vec<u8>>,
}

impl TrainingData {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let c = &manifest.meta.config;
        let world = c.world()?;
        let mut pixels = Vec::with_capacity(manifest.records.len());
        for i in 0..manifest.records.len() {
            let (w, h, bytes) = load_rgb8(&manifest.image_path(i))?;
            if (h, w) != (c.height, c.width) {
                return Err(Error::Invalid(format!("{} has the wrong size", manifest.image_path(i).display())));
            }
            pixels.push(bytes);
        }
        Ok(Self {
            height: c.height,
            width: c.width,
            feature_dim: c.feature_dim,
            num_styles: c.num_styles,
            stroke_radius: world.stroke_radius(),
            records: manifest.records.clone(),
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_model(&self, m: &ModelConfig) -> Result<()> {
        if (m.height, m.width) != (self.height, self.width) {
            return Err(Error::Config(format!(
                "model canvas {}x{} differs from dataset {}x{}",
                m.width, m.height, self.width, self.height
            )));
        }
        if m.projector.feature_dim != self.feature_dim || m.num_styles != self.num_styles {
            return Err(Error::Config("model feature_dim/num_styles differ from the dataset".into()));
        }
        Ok(())
    }

    /// Scene conditioning for record `i`, with its pose image as base.
    pub fn scene(&self, i: usize) -> SceneCond {
        let r = &self.records[i];
        SceneCond {
            features: r.identity_vectors.clone(),
            locations: r.locations.clone(),
            caption: r.caption_label,
            base: r.pose.as_ref().map(|p| rasterize_pose(p, (self.height, self.width), self.stroke_radius).pixels),
        }
    }

    /// Planar `[B, 3, H, W]` images mapped to `[-1, 1]`.
    pub fn images(&self, idx: &[usize]) -> Tensor<f32> {
        let hw = self.height * self.width;
        let mut data = vec![0.0f32; idx.len() * 3 * hw];
        for (b, &i) in idx.iter().enumerate() {
            let px = &self.pixels[i];
            for p in 0..hw {
                for c in 0..3 {
                    data[(b * 3 + c) * hw + p] = px[p * 3 + c] as f32 / 127.5 - 1.0;
                }
            }
        }
        Tensor::new([idx.len(), 3, self.height, self.width], data)
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f32>,
}

/// Batch indices, timesteps, noise and caption-dropout flags for one step.
pub struct StepBatch {
    pub idx: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
    pub text: Vec<bool>,
}

pub fn step_batch(cfg: &TrainConfig, data: &TrainingData, step: u64) -> StepBatch {
    let mut r = rng(derive_seed(cfg.seed, &format!("batch-{}", cfg.stage.tag()), step));
    let b = cfg.hyper.batch_size;
    let idx: Vec<usize> = (0..b).map(|_| r.random_range(0..data.len())).collect();
    let t: Vec<usize> = (0..b).map(|_| r.random_range(0..cfg.model.schedule.steps)).collect();
    let text = (0..b).map(|_| r.random::<f64>() >= cfg.hyper.text_dropout).collect();
    let n = b * 3 * data.height * data.width;
    let eps = Tensor::new([b, 3, data.height, data.width], (0..n).map(|_| r.sample::<f32, _>(StandardNormal)).collect());
    StepBatch { idx, t, eps, text }
}

/// Loss of one batch under `stage`'s conditioning rules, without updating.
pub fn batch_loss(model: &IdPatchModel, store: &ParamStore<f32>, data: &TrainingData, stage: Stage, b: &StepBatch) -> Result<f32> {
    let scenes: Vec<SceneCond> = b.idx.iter().map(|&i| data.scene(i)).collect();
    let x0 = data.images(&b.idx);
    let mut g = Graph::new(store);
    let proj = model.project(&mut g, &scenes, stage.uses_tokens());
    let opts = CondOptions { patches: true, tokens: stage.uses_tokens(), text: b.text.clone() };
    let loss = ldm_loss(&mut g, &model.schedule, &x0, &b.t, &b.eps, |g, xt| {
        model.eps(g, xt, &b.t, &scenes, &proj, &opts, true)
    })?;
    Ok(g.value(loss).item())
}

/// Runs `cfg.steps` optimizer steps from `init` (or a fresh model).
pub fn train(cfg: &TrainConfig, data: &TrainingData, init: Option<&Checkpoint>) -> Result<TrainRun> {
    cfg.hyper.validate()?;
    cfg.model.validate()?;
    data.check_model(&cfg.model)?;
    if data.is_empty() {
        return Err(Error::Precondition("training dataset is empty".into()));
    }
    let (model, mut store, start_step) = match init {
        Some(c) => {
            if c.model != cfg.model {
                return Err(Error::Precondition("initial checkpoint was trained with a different model config".into()));
            }
            (c.instantiate()?, c.params.clone(), c.step)
        }
        None => {
            let (m, s) = IdPatchModel::build::<f32>(&cfg.model, derive_seed(cfg.seed, "model", 0))?;
            (m, s, 0)
        }
    };
    let mut opt = AdamW::new(&store, cfg.hyper.weight_decay);
    let mut log = match &cfg.metrics {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some(OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?)
        }
        None => None,
    };
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let b = step_batch(cfg, data, step);
        let scenes: Vec<SceneCond> = b.idx.iter().map(|&i| data.scene(i)).collect();
        let x0 = data.images(&b.idx);
        let opts = CondOptions { patches: true, tokens: cfg.stage.uses_tokens(), text: b.text.clone() };
        let (loss, mut grads) = {
            let mut g = Graph::new(&store);
            let proj = model.project(&mut g, &scenes, cfg.stage.uses_tokens());
            let loss = ldm_loss(&mut g, &model.schedule, &x0, &b.t, &b.eps, |g, xt| {
                model.eps(g, xt, &b.t, &scenes, &proj, &opts, true)
            })?;
            let value = g.value(loss).item();
            (value, g.backward(loss).into_params())
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "stage {} diverged: loss {loss} at step {step} (batch {:?}, t {:?})",
                cfg.stage.tag(),
                b.idx,
                b.t
            )));
        }
        let gnorm = clip_global_norm(&mut grads, cfg.hyper.grad_clip);
        let lr = cosine_lr(cfg.hyper.lr, step, cfg.steps, cfg.hyper.warmup_steps, cfg.hyper.min_lr_ratio);
        opt.step(&mut store, &grads, lr);
        losses.push(loss);
        if let Some(f) = log.as_mut() {
            let line = serde_json::json!({
                "stage": cfg.stage.tag(),
                "step": start_step + step + 1,
                "loss": loss,
                "lr": lr,
                "grad_norm": gnorm,
            });
            writeln!(f, "{line}").map_err(|e| Error::io(cfg.metrics.as_ref().expect("open log"), e))?;
        }
        if cfg.hyper.log_every > 0 && (step + 1) % cfg.hyper.log_every == 0 {
            let k = cfg.hyper.log_every as usize;
            let recent = &losses[losses.len() - k..];
            log::info!(
                "stage {} step {}/{} loss {:.5} lr {:.2e}",
                cfg.stage.tag(),
                step + 1,
                cfg.steps,
                recent.iter().sum::<f32>() / k as f32,
                lr
            );
        }
    }
    if !store.all_finite() {
        return Err(Error::Numerical(format!("stage {} produced non-finite parameters", cfg.stage.tag())));
    }
    let checkpoint =
        Checkpoint { model: cfg.model.clone(), stage: cfg.stage, step: start_step + cfg.steps, seed: cfg.seed, params: store };
    Ok(TrainRun { checkpoint, losses })
}

pub fn train_stage1(cfg: &TrainConfig, data: &TrainingData) -> Result<TrainRun> {
    if cfg.stage != Stage::One {
        return Err(Error::Precondition(format!("train_stage1 called with stage {}", cfg.stage.tag())));
    }
    train(cfg, data, None)
}

pub fn train_stage2(cfg: &TrainConfig, data: &TrainingData, init: &Checkpoint) -> Result<TrainRun> {
    if cfg.stage != Stage::Two {
        return Err(Error::Precondition(format!("train_stage2 called with stage {}", cfg.stage.tag())));
    }
    if !matches!(init.stage, Stage::One | Stage::Two) {
        return Err(Error::Precondition(format!(
            "stage 2 needs a stage-1 or stage-2 checkpoint, got stage {}",
            init.stage.tag()
        )));
    }
    train(cfg, data, Some(init))
}

pub fn train_single_stage(cfg: &TrainConfig, data: &TrainingData) -> Result<TrainRun> {
    if cfg.stage != Stage::Single {
        return Err(Error::Precondition(format!("train_single_stage called with stage {}", cfg.stage.tag())));
    }
    train(cfg, data, None)
}

/// Mean of a window of losses.
pub fn mean_loss(losses: &[f32]) -> f32 {
    losses.iter().sum::<f32>() / losses.len().max(1) as f32
}
