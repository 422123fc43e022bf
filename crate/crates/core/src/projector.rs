//! Dual projection of identity features into ID patches and ID tokens.
//!
//! A small perceiver resampler turns each feature into `M` latent vectors.
//! Both heads read the same latents: the token head maps each latent to one
//! text-width token, the patch head maps the flattened latents to a `P x P`
//! RGB patch squashed by `tanh`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Float, Graph, LayerNorm, Linear, ParamId, ParamStore, Segment, Tensor, Var};
use crate::raster::RgbImage;
use crate::synthid::IdentityFeature;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    /// Context tokens the feature is expanded into before resampling.
    pub context_tokens: usize,
    pub num_latents: usize,
    pub d_text: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Standardize each patch's pre-activation before `tanh`, so a patch
    /// cannot fade into the black canvas.
    pub normalize_patch: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            d_model: 64,
            context_tokens: 4,
            num_latents: 16,
            d_text: 128,
            patch_size: 16,
            depth: 2,
            heads: 4,
            ff_mult: 2,
            normalize_patch: true,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        let zero = [self.feature_dim, self.d_model, self.context_tokens, self.num_latents, self.d_text, self.patch_size, self.heads];
        if zero.contains(&0) {
            return Err(Error::Config("projector dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdPatch {
    /// `P x P` RGB in `[-1, 1]`.
    pub pixels: RgbImage,
    pub source_label: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdTokenBlock {
    /// `[M, d_text]`.
    pub tokens: Tensor<f32>,
}

#[derive(Clone, Debug)]
struct Block {
    ln_q: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    in_proj: Linear,
    ctx_ln: LayerNorm,
    latents: ParamId,
    blocks: Vec<Block>,
    out_ln: LayerNorm,
    pub token_head: Linear,
    pub patch_head: Linear,
}

/// Graph handles produced by [`Projector::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ProjectorOutput {
    /// `[N * M, d_model]`.
    pub latents: Var,
    /// `[N * M, d_text]`, when requested.
    pub tokens: Option<Var>,
    /// `[N, 3 * P * P]`, planar per patch, in `[-1, 1]`.
    pub patches: Var,
}

impl Projector {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ProjectorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let name = |s: &str| format!("projector.{s}");
        let in_proj = Linear::new(store, &name("in"), cfg.feature_dim, cfg.context_tokens * d, true, rng);
        let ctx_ln = LayerNorm::new(store, &name("ctx_ln"), d);
        let latents = store.add(name("latents"), Tensor::randn([cfg.num_latents, d], 1.0, rng));
        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = |s: &str| name(&format!("block{i}.{s}"));
                Block {
                    ln_q: LayerNorm::new(store, &n("ln_q"), d),
                    q: Linear::new(store, &n("q"), d, d, false, rng),
                    k: Linear::new(store, &n("k"), d, d, false, rng),
                    v: Linear::new(store, &n("v"), d, d, false, rng),
                    o: Linear::new(store, &n("o"), d, d, true, rng),
                    ln_ff: LayerNorm::new(store, &n("ln_ff"), d),
                    ff1: Linear::new(store, &n("ff1"), d, cfg.ff_mult * d, true, rng),
                    ff2: Linear::new(store, &n("ff2"), cfg.ff_mult * d, d, true, rng),
                }
            })
            .collect();
        let out_ln = LayerNorm::new(store, &name("out_ln"), d);
        let token_head = Linear::new(store, &name("token_head"), d, cfg.d_text, true, rng);
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let patch_head = Linear::new(store, &name("patch_head"), cfg.num_latents * d, patch_dim, true, rng);
        Ok(Self { cfg: cfg.clone(), in_proj, ctx_ln, latents, blocks, out_ln, token_head, patch_head })
    }

    /// Resampler trunk plus both heads for a `[N, D]` batch of features.
    /// The token head is skipped when `with_tokens` is false, so it receives
    /// no gradient.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, feats: Var, with_tokens: bool) -> ProjectorOutput {
        let latents = self.resample(g, feats);
        let n = g.shape(feats)[0];
        let tokens = with_tokens.then(|| self.token_head.forward(g, latents));
        let flat = g.reshape(latents, [n, self.cfg.num_latents * self.cfg.d_model]);
        let mut raw = self.patch_head.forward(g, flat);
        if self.cfg.normalize_patch {
            let width = 3 * self.cfg.patch_size * self.cfg.patch_size;
            let one = g.constant(Tensor::full([width], T::one()));
            let zero = g.constant(Tensor::zeros([width]));
            raw = g.layer_norm(raw, one, zero);
        }
        let patches = g.tanh(raw);
        ProjectorOutput { latents, tokens, patches }
    }

    /// `[N, D]` features to `[N * M, d_model]` latents.
    pub fn resample<T: Float>(&self, g: &mut Graph<'_, T>, feats: Var) -> Var {
        let c = &self.cfg;
        let s = g.shape(feats).to_vec();
        assert!(s.len() == 2 && s[1] == c.feature_dim, "projector expects [N, {}] features, got {s:?}", c.feature_dim);
        let (n, d, m, nc) = (s[0], c.d_model, c.num_latents, c.context_tokens);
        let ctx = self.in_proj.forward(g, feats);
        let ctx = g.reshape(ctx, [n * nc, d]);
        let ctx = self.ctx_ln.forward(g, ctx);
        let base = g.param(self.latents);
        let mut lat = g.select_rows(base, (0..n).flat_map(|_| 0..m).collect());
        let q_seg: Vec<Segment> = (0..n).map(|i| Segment::new(i * m, m)).collect();
        let kv_seg: Vec<Segment> = (0..n).map(|i| Segment::new(i * (nc + m), nc + m)).collect();
        // Interleave [ctx_i; latents_i] so each identity's keys are contiguous.
        let kv_idx: Vec<usize> = (0..n).flat_map(|i| (i * nc..(i + 1) * nc).chain(n * nc + i * m..n * nc + (i + 1) * m)).collect();
        for b in &self.blocks {
            let lq = b.ln_q.forward(g, lat);
            let both = g.concat_rows(&[ctx, lq]);
            let kv = g.select_rows(both, kv_idx.clone());
            let q = b.q.forward(g, lq);
            let k = b.k.forward(g, kv);
            let v = b.v.forward(g, kv);
            let a = g.attention(q, k, v, q_seg.clone(), kv_seg.clone(), c.heads);
            let a = b.o.forward(g, a);
            lat = g.add(lat, a);
            let h = b.ln_ff.forward(g, lat);
            let h = b.ff1.forward(g, h);
            let h = g.silu(h);
            let h = b.ff2.forward(g, h);
            lat = g.add(lat, h);
        }
        self.out_ln.forward(g, lat)
    }

    fn check(&self, f: &IdentityFeature) -> Result<()> {
        if f.dim() != self.cfg.feature_dim {
            return Err(Error::Shape(format!(
                "feature has dimension {}, projector expects {}",
                f.dim(),
                self.cfg.feature_dim
            )));
        }
        Ok(())
    }

    fn run(&self, store: &ParamStore<f32>, feats: &[IdentityFeature], tokens: bool) -> Result<(Tensor<f32>, Option<Tensor<f32>>, Tensor<f32>)> {
        for f in feats {
            self.check(f)?;
        }
        let mut g = Graph::new(store);
        let flat: Vec<f32> = feats.iter().flat_map(|f| f.values.iter().copied()).collect();
        let x = g.constant(Tensor::new([feats.len(), self.cfg.feature_dim], flat));
        let out = self.forward(&mut g, x, tokens);
        Ok((g.value(out.latents).clone(), out.tokens.map(|t| g.value(t).clone()), g.value(out.patches).clone()))
    }

    /// `[M, d_model]` latent block for one feature.
    pub fn resampler_forward(&self, store: &ParamStore<f32>, f: &IdentityFeature) -> Result<Tensor<f32>> {
        Ok(self.run(store, std::slice::from_ref(f), false)?.0)
    }

    pub fn project_patch(&self, store: &ParamStore<f32>, f: &IdentityFeature) -> Result<IdPatch> {
        Ok(self.project_patches(store, std::slice::from_ref(f))?.remove(0))
    }

    pub fn project_patches(&self, store: &ParamStore<f32>, feats: &[IdentityFeature]) -> Result<Vec<IdPatch>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let (_, _, p) = self.run(store, feats, false)?;
        let ps = self.cfg.patch_size;
        p.data()
            .chunks(3 * ps * ps)
            .zip(feats)
            .map(|(chw, f)| Ok(IdPatch { pixels: RgbImage::from_chw(ps, ps, chw)?, source_label: f.id_label }))
            .collect()
    }

    pub fn project_tokens(&self, store: &ParamStore<f32>, f: &IdentityFeature) -> Result<IdTokenBlock> {
        let (_, t, _) = self.run(store, std::slice::from_ref(f), true)?;
        Ok(IdTokenBlock { tokens: t.expect("tokens requested") })
    }
}

/// Pearson correlation between two patches' pixel values.
pub fn patch_correlation(a: &IdPatch, b: &IdPatch) -> f32 {
    let (x, y) = (a.pixels.data(), b.pixels.data());
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &q) in x.iter().zip(y) {
        let (dp, dq) = (p as f64 - mx, q as f64 - my);
        sxy += dp * dq;
        sxx += dp * dp;
        syy += dq * dq;
    }
    if sxx == 0.0 || syy == 0.0 {
        return if sxx == syy { 1.0 } else { 0.0 };
    }
    (sxy / (sxx * syy).sqrt()) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthid::sample_identity;
    use crate::util::rng;

    fn small() -> ProjectorConfig {
        ProjectorConfig { d_model: 16, num_latents: 4, d_text: 8, patch_size: 4, heads: 2, feature_dim: 12, ..Default::default() }
    }

    #[test]
    fn shapes_purity_and_range() {
        let cfg = ProjectorConfig::default();
        let mut store = ParamStore::new();
        let p = Projector::new(&mut store, &cfg, &mut rng(1)).unwrap();
        let f = sample_identity(3, 64);
        let t = p.project_tokens(&store, &f).unwrap();
        assert_eq!(t.tokens.shape(), [16, 128]);
        assert_eq!(t, p.project_tokens(&store, &f).unwrap());
        assert_eq!(p.project_patch(&store, &f).unwrap(), p.project_patch(&store, &f).unwrap());
        assert_eq!(p.resampler_forward(&store, &f).unwrap(), p.resampler_forward(&store, &f).unwrap());
        let feats: Vec<_> = (0..100).map(|s| sample_identity(100 + s, 64)).collect();
        for patch in p.project_patches(&store, &feats).unwrap() {
            assert_eq!((patch.pixels.width(), patch.pixels.height()), (16, 16));
            assert!(patch.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn batched_equals_single() {
        let cfg = small();
        let mut store = ParamStore::new();
        let p = Projector::new(&mut store, &cfg, &mut rng(2)).unwrap();
        let feats: Vec<_> = (0..3).map(|s| sample_identity(s, 12)).collect();
        let batch = p.project_patches(&store, &feats).unwrap();
        for (f, b) in feats.iter().zip(&batch) {
            let single = p.project_patch(&store, f).unwrap();
            for (x, y) in single.pixels.data().iter().zip(b.pixels.data()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_feature_is_finite_and_dims_checked() {
        let cfg = small();
        let mut store = ParamStore::new();
        let p = Projector::new(&mut store, &cfg, &mut rng(3)).unwrap();
        let zero = IdentityFeature { values: vec![0.0; 12], id_label: -1 };
        assert!(p.resampler_forward(&store, &zero).unwrap().all_finite());
        assert!(p.project_patch(&store, &sample_identity(1, 13)).is_err());
    }

    #[test]
    fn correlation_oracle() {
        let a = IdPatch { pixels: RgbImage::new(1, 1, vec![1.0, 2.0, 3.0]).unwrap(), source_label: 0 };
        let b = IdPatch { pixels: RgbImage::new(1, 1, vec![2.0, 4.0, 6.0]).unwrap(), source_label: 1 };
        let c = IdPatch { pixels: RgbImage::new(1, 1, vec![3.0, 2.0, 1.0]).unwrap(), source_label: 2 };
        assert!((patch_correlation(&a, &b) - 1.0).abs() < 1e-6);
        assert!((patch_correlation(&a, &c) + 1.0).abs() < 1e-6);
    }
}
