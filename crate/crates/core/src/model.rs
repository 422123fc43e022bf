//! The full conditioning system: projector, denoiser and the caption
//! embedding table, sharing one parameter store.

use serde::{Deserialize, Serialize};

use crate::condimage::{overlay_map, BLACK};
use crate::diffusion_core::{make_schedule, Context, Denoiser, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Float, Graph, ParamId, ParamStore, Segment, Tensor, Var};
use crate::projector::{Projector, ProjectorConfig};
use crate::raster::RgbImage;
use crate::util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 256, beta_min: 1e-4, beta_max: 0.04 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub num_styles: usize,
    /// Text tokens per caption label.
    pub text_tokens: usize,
    pub projector: ProjectorConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            num_styles: 4,
            text_tokens: 8,
            projector: ProjectorConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        self.denoiser.validate()?;
        make_schedule(self.schedule.steps, self.schedule.beta_min, self.schedule.beta_max)?;
        if self.projector.d_text != self.denoiser.d_text {
            return Err(Error::Config(format!(
                "projector d_text {} differs from denoiser d_text {}",
                self.projector.d_text, self.denoiser.d_text
            )));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("canvas {}x{} must have sides divisible by 4", self.width, self.height)));
        }
        if self.projector.patch_size > self.height.min(self.width) {
            return Err(Error::Config("patch larger than canvas".into()));
        }
        if self.text_tokens == 0 || self.num_styles == 0 {
            return Err(Error::Config("text_tokens and num_styles must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        util::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Per-scene conditioning inputs.
#[derive(Clone, Debug)]
pub struct SceneCond {
    pub features: Vec<Vec<f32>>,
    pub locations: Vec<(usize, usize)>,
    pub caption: usize,
    /// Base condition in `[-1, 1]` (a pose image); black when absent.
    pub base: Option<RgbImage>,
}

/// Which conditioning paths are active.
#[derive(Clone, Debug)]
pub struct CondOptions {
    pub patches: bool,
    pub tokens: bool,
    /// Per-sample: `false` substitutes the null caption (guidance/dropout).
    pub text: Vec<bool>,
}

impl CondOptions {
    pub fn all(batch: usize) -> Self {
        Self { patches: true, tokens: true, text: vec![true; batch] }
    }
}

/// Projector results for a batch, either live on the graph or as constants.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    /// `[sum N, 3 P P]`.
    pub patches: Option<Var>,
    /// `[sum N * M, d_text]`.
    pub tokens: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct IdPatchModel {
    pub cfg: ModelConfig,
    pub projector: Projector,
    pub denoiser: Denoiser,
    /// `[(num_styles + 1) * L, d_text]`; the last block is the null caption.
    pub text_table: ParamId,
    pub schedule: NoiseSchedule,
}

impl IdPatchModel {
    pub fn build<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = util::rng(util::derive_seed(seed, "init", 0));
        let projector = Projector::new(&mut store, &cfg.projector, &mut rng)?;
        let denoiser = Denoiser::new(&mut store, &cfg.denoiser, &mut rng)?;
        let rows = (cfg.num_styles + 1) * cfg.text_tokens;
        let text_table = store.add("text.table", Tensor::randn([rows, cfg.denoiser.d_text], 1.0, &mut rng));
        let schedule = make_schedule(cfg.schedule.steps, cfg.schedule.beta_min, cfg.schedule.beta_max)?;
        Ok((Self { cfg: cfg.clone(), projector, denoiser, text_table, schedule }, store))
    }

    /// Rebuilds the module layout for `cfg` without keeping the initial
    /// values (they are replaced by a checkpoint).
    pub fn layout(cfg: &ModelConfig) -> Result<(Self, ParamStore<f32>)> {
        Self::build(cfg, 0)
    }

    /// Runs the projector over every identity of the batch.
    pub fn project<T: Float>(&self, g: &mut Graph<'_, T>, scenes: &[SceneCond], tokens: bool) -> Projected {
        let d = self.cfg.projector.feature_dim;
        let flat: Vec<f64> = scenes.iter().flat_map(|s| s.features.iter().flatten()).map(|&v| v as f64).collect();
        let n = flat.len() / d;
        if n == 0 {
            return Projected { patches: None, tokens: None };
        }
        let feats = g.constant(Tensor::new([n, d], flat.into_iter().map(T::of).collect()));
        let out = self.projector.forward(g, feats, tokens);
        Projected { patches: Some(out.patches), tokens: out.tokens }
    }

    /// Conditioning image batch and cross-attention context.
    pub fn condition<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        scenes: &[SceneCond],
        proj: &Projected,
        opts: &CondOptions,
    ) -> (Var, Context) {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let b = scenes.len();
        assert_eq!(opts.text.len(), b, "one text flag per sample");
        let mut base = Vec::with_capacity(b * 3 * h * w);
        for s in scenes {
            match &s.base {
                Some(img) => {
                    assert!(img.height() == h && img.width() == w, "base image size");
                    base.extend(img.to_chw().into_iter().map(|v| T::of(v as f64)));
                }
                None => base.extend(std::iter::repeat(T::of(BLACK as f64)).take(3 * h * w)),
            }
        }
        let mut cond = g.constant(Tensor::new([b, 3, h, w], base));
        if let (true, Some(p)) = (opts.patches, proj.patches) {
            let layouts: Vec<Vec<(usize, usize)>> = scenes.iter().map(|s| s.locations.clone()).collect();
            let map = overlay_map(&layouts, self.cfg.projector.patch_size, (h, w)).expect("validated canvas");
            cond = g.overlay(cond, p, map);
        }

        let l = self.cfg.text_tokens;
        let m = self.cfg.projector.num_latents;
        let table = g.param(self.text_table);
        let table_rows = (self.cfg.num_styles + 1) * l;
        let source = match (opts.tokens, proj.tokens) {
            (true, Some(t)) => g.concat_rows(&[table, t]),
            _ => table,
        };
        let mut idx = Vec::new();
        let mut segments = Vec::with_capacity(b);
        let mut id_row = 0;
        for (s, &text) in scenes.iter().zip(&opts.text) {
            let label = if text { s.caption } else { self.cfg.num_styles };
            assert!(label <= self.cfg.num_styles, "caption label out of range");
            let start = idx.len();
            idx.extend(label * l..(label + 1) * l);
            let n = s.features.len();
            if opts.tokens && proj.tokens.is_some() {
                idx.extend(table_rows + id_row * m..table_rows + (id_row + n) * m);
            }
            id_row += n;
            segments.push(Segment::new(start, idx.len() - start));
        }
        let tokens = g.select_rows(source, idx);
        (cond, Context { tokens, segments })
    }

    /// ε prediction for a batch; `use_control = false` drops the control
    /// branch entirely.
    #[allow(clippy::too_many_arguments)]
    pub fn eps<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x_t: Var,
        t: &[usize],
        scenes: &[SceneCond],
        proj: &Projected,
        opts: &CondOptions,
        use_control: bool,
    ) -> Var {
        let (cond, ctx) = self.condition(g, scenes, proj, opts);
        self.denoiser.forward(g, x_t, t, use_control.then_some(cond), &ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthid::sample_identity;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 16,
            num_styles: 2,
            text_tokens: 2,
            projector: ProjectorConfig { feature_dim: 6, d_model: 8, context_tokens: 2, num_latents: 2, d_text: 8, patch_size: 4, depth: 1, heads: 2, ff_mult: 2, normalize_patch: true },
            denoiser: DenoiserConfig { widths: [8, 8, 8], d_text: 8, heads: 2, groups: 4, stem_width: 4 },
            schedule: ScheduleConfig { steps: 10, beta_min: 0.01, beta_max: 0.3 },
        }
    }

    fn scene(n: usize, seed: u64) -> SceneCond {
        SceneCond {
            features: (0..n).map(|i| sample_identity(seed + i as u64, 6).values).collect(),
            locations: (0..n).map(|i| (2 + 5 * i, 3 + 4 * i)).collect(),
            caption: 1,
            base: None,
        }
    }

    #[test]
    fn context_layout() {
        let (m, store) = IdPatchModel::build::<f32>(&tiny(), 1).unwrap();
        let scenes = [scene(2, 1), scene(0, 9), scene(1, 4)];
        let mut g = Graph::new(&store);
        let proj = m.project(&mut g, &scenes, true);
        let opts = CondOptions { patches: true, tokens: true, text: vec![true, false, true] };
        let (cond, ctx) = m.condition(&mut g, &scenes, &proj, &opts);
        assert_eq!(g.shape(cond), [3, 3, 16, 16]);
        assert_eq!(ctx.segments, vec![Segment::new(0, 6), Segment::new(6, 2), Segment::new(8, 4)]);
        // Sample 1 uses the null caption rows.
        let table = store.get(m.text_table).data();
        let rows = g.value(ctx.tokens).data();
        assert_eq!(&rows[6 * 8..8 * 8], &table[2 * 2 * 8..3 * 2 * 8]);
        // Sample 2's ID rows equal the projector's third identity block.
        let tok = g.value(proj.tokens.unwrap()).data();
        assert_eq!(&rows[10 * 8..12 * 8], &tok[2 * 2 * 8..3 * 2 * 8]);

        let (_, no_tok) = m.condition(&mut g, &scenes, &proj, &CondOptions { tokens: false, ..opts });
        assert_eq!(no_tok.segments, vec![Segment::new(0, 2), Segment::new(2, 2), Segment::new(4, 2)]);
    }

    #[test]
    fn build_is_deterministic() {
        let (_, a) = IdPatchModel::build::<f32>(&tiny(), 5).unwrap();
        let (_, b) = IdPatchModel::build::<f32>(&tiny(), 5).unwrap();
        let (_, c) = IdPatchModel::build::<f32>(&tiny(), 6).unwrap();
        assert_eq!(a.value_hash(), b.value_hash());
        assert_ne!(a.value_hash(), c.value_hash());
        assert_eq!(a.signature(), c.signature());
    }
}
