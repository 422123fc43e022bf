//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use idpatch::diffusion_core::{Context, DenoiserConfig};
use idpatch::model::{CondOptions, IdPatchModel, ModelConfig, ScheduleConfig, SceneCond};
use idpatch::nn::{Graph, ParamId, ParamStore, Segment, Tensor};
use idpatch::projector::ProjectorConfig;
use idpatch::synthid::sample_identity;
use idpatch::util::rng;
use rand::Rng;

/// A model small enough for finite differences.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        num_styles: 2,
        text_tokens: 2,
        projector: ProjectorConfig {
            feature_dim: 6,
            d_model: 8,
            context_tokens: 2,
            num_latents: 2,
            d_text: 8,
            patch_size: 4,
            depth: 1,
            heads: 2,
            ff_mult: 2,
            normalize_patch: true,
        },
        denoiser: DenoiserConfig { widths: [4, 8, 8], d_text: 8, heads: 2, groups: 2, stem_width: 4 },
        schedule: ScheduleConfig { steps: 10, beta_min: 0.01, beta_max: 0.3 },
    }
}

pub fn scenes(cfg: &ModelConfig, seed: u64) -> Vec<SceneCond> {
    let d = cfg.projector.feature_dim;
    vec![
        SceneCond {
            features: vec![sample_identity(seed, d).values, sample_identity(seed + 1, d).values],
            locations: vec![(3, 4), (12, 11)],
            caption: 1,
            base: None,
        },
        SceneCond { features: vec![sample_identity(seed + 2, d).values], locations: vec![(8, 8)], caption: 0, base: None },
    ]
}

/// Outcome of one finite-difference probe.
#[derive(Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-12)
    }
}

/// Compares analytic gradients of `loss` with central differences of step
/// `h` on `count` random elements drawn from `candidates` whose analytic
/// gradient is not negligible.
pub fn finite_difference_probes(
    store: &mut ParamStore<f64>,
    candidates: &[ParamId],
    loss: impl Fn(&ParamStore<f64>, bool) -> (f64, Option<Vec<Option<Tensor<f64>>>>),
    count: usize,
    h: f64,
    seed: u64,
) -> Vec<Probe> {
    let (_, grads) = loss(store, true);
    let grads = grads.expect("gradients requested");
    let mut r = rng(seed);
    let mut probes = Vec::new();
    let mut attempts = 0;
    while probes.len() < count && attempts < 10_000 {
        attempts += 1;
        let id = candidates[r.random_range(0..candidates.len())];
        let Some(g) = &grads[id.index()] else { continue };
        let i = r.random_range(0..g.numel());
        let analytic = g.data()[i];
        if analytic.abs() < 1e-6 {
            continue;
        }
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let up = loss(store, false).0;
        store.get_mut(id).data_mut()[i] = orig - h;
        let down = loss(store, false).0;
        store.get_mut(id).data_mut()[i] = orig;
        probes.push(Probe { param: store.name(id).to_string(), index: i, analytic, numeric: (up - down) / (2.0 * h) });
    }
    probes
}

/// Replaces the control branch's zero-initialized output convs with small
/// random values so gradients flow through every path.
pub fn randomize_zero_convs(model: &IdPatchModel, store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for id in model.denoiser.zero_conv_params() {
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-0.2..0.2);
        }
    }
}

/// Full conditioned ε-prediction loss against a fixed random target.
pub fn denoiser_loss(model: &IdPatchModel, store: &ParamStore<f64>, with_grads: bool) -> (f64, Option<Vec<Option<Tensor<f64>>>>) {
    let cfg = &model.cfg;
    let sc = scenes(cfg, 3);
    let mut r = rng(21);
    let shape = [sc.len(), 3, cfg.height, cfg.width];
    let x = Tensor::<f64>::randn(shape, 1.0, &mut r);
    let target = Tensor::<f64>::randn(shape, 1.0, &mut r);
    let mut g = Graph::new(store);
    let proj = model.project(&mut g, &sc, true);
    let xv = g.constant(x);
    let out = model.eps(&mut g, xv, &[2, 7], &sc, &proj, &CondOptions::all(sc.len()), true);
    let tv = g.constant(target);
    let l = g.mse(out, tv);
    let value = g.value(l).item();
    (value, with_grads.then(|| g.backward(l).into_params()))
}

/// Projector-only loss: patches and tokens against fixed random targets.
pub fn projector_loss(model: &IdPatchModel, store: &ParamStore<f64>, with_grads: bool) -> (f64, Option<Vec<Option<Tensor<f64>>>>) {
    let d = model.cfg.projector.feature_dim;
    let feats: Vec<f64> = (0..3).flat_map(|i| sample_identity(40 + i, d).values).map(f64::from).collect();
    let mut g = Graph::new(store);
    let fv = g.constant(Tensor::new([3, d], feats));
    let out = model.projector.forward(&mut g, fv, true);
    let mut r = rng(22);
    let pt = g.constant(Tensor::randn(g.shape(out.patches).to_vec(), 0.5, &mut r));
    let tokens = out.tokens.expect("tokens requested");
    let tt = g.constant(Tensor::randn(g.shape(tokens).to_vec(), 1.0, &mut r));
    let a = g.mse(out.patches, pt);
    let b = g.mse(tokens, tt);
    let l = g.add(a, b);
    let value = g.value(l).item();
    (value, with_grads.then(|| g.backward(l).into_params()))
}

/// Standalone context for calling the denoiser without the projector.
pub fn text_context(g: &mut Graph<'_, f64>, rows: usize, width: usize, batch: usize, seed: u64) -> Context {
    let tokens = g.constant(Tensor::randn([rows * batch, width], 1.0, &mut rng(seed)));
    Context { tokens, segments: (0..batch).map(|b| Segment::new(b * rows, rows)).collect() }
}

/// A small world and a matching tiny model.
pub fn tiny_world() -> (idpatch::synthid::DatasetConfig, ModelConfig) {
    let data = idpatch::synthid::DatasetConfig {
        count: 16,
        height: 32,
        width: 32,
        sprite_size: 8,
        feature_dim: 6,
        identity_pool: 8,
        max_people: 3,
        people_weights: vec![0.4, 0.4, 0.2],
        num_styles: 2,
        pose_probability: 0.5,
        heldout_pairs: 2,
        heldout_triples: 1,
        seed: 3,
    };
    let mut model = tiny_model();
    model.height = 32;
    model.width = 32;
    (data, model)
}
