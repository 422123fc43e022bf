//! The evaluation protocol over held-out identity combinations.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{association_accuracy, crop_faces, resemblance, EvalExtractor, SimilarityMatrix, TextScorer};
use crate::error::{Error, Result};
use crate::pose::Skeleton;
use crate::sampler::{GenerationRequest, Sampler};
use crate::synthid::{sample_locations, DatasetMeta, IdentityFeature};
use crate::trainer::Stage;
use crate::util::{derive_seed, rng};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Name of the configuration, used as the plot series label.
    pub label: String,
    /// Caption styles to evaluate; empty means all.
    pub styles: Vec<usize>,
    pub combos_per_style: usize,
    /// Identity counts drawn from the held-out combinations.
    pub sizes: Vec<usize>,
    pub steps: usize,
    pub guidance: f64,
    pub two_stage: bool,
    pub stage_boundary_fraction: f64,
    pub use_patches: bool,
    /// `None` uses tokens whenever the checkpoint was trained with them.
    pub use_tokens: Option<bool>,
    pub with_pose: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            label: "full".into(),
            styles: Vec::new(),
            combos_per_style: 4,
            sizes: vec![2, 3],
            steps: 50,
            guidance: 3.0,
            two_stage: true,
            stage_boundary_fraction: 0.2,
            use_patches: true,
            use_tokens: None,
            with_pose: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub style: usize,
    pub identity_labels: Vec<i64>,
    pub locations: Vec<(usize, usize)>,
    pub seed: u64,
    pub resemblance: Vec<f64>,
    /// Per face: whether its most similar input face is its own.
    pub association_hits: Vec<bool>,
    pub text_score: f64,
    pub seconds: f64,
}

impl SceneRecord {
    pub fn n(&self) -> usize {
        self.identity_labels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub scenes: usize,
    pub faces: usize,
    /// Means are `None` when there is nothing to average.
    pub mean_resemblance: Option<f64>,
    /// Pooled over faces.
    pub association_accuracy: Option<f64>,
    pub mean_text_score: Option<f64>,
    pub mean_seconds: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Aggregates {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SceneRecord> + Clone) -> Self {
        let r = records.clone().into_iter();
        Self {
            scenes: r.count(),
            faces: records.clone().into_iter().map(SceneRecord::n).sum(),
            mean_resemblance: mean(records.clone().into_iter().flat_map(|r| r.resemblance.iter().copied())),
            association_accuracy: mean(
                records.clone().into_iter().flat_map(|r| r.association_hits.iter().map(|&h| h as u8 as f64)),
            ),
            mean_text_score: mean(records.clone().into_iter().map(|r| r.text_score)),
            mean_seconds: mean(records.into_iter().map(|r| r.seconds)),
        }
    }

    /// Everything except wall-clock time, which is not reproducible.
    pub fn same_quality(&self, other: &Self) -> bool {
        (self.scenes, self.faces, self.mean_resemblance, self.association_accuracy, self.mean_text_score)
            == (other.scenes, other.faces, other.mean_resemblance, other.association_accuracy, other.mean_text_score)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBreakdown {
    pub n: usize,
    pub aggregates: Aggregates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub checkpoint_stage: Stage,
    pub eval: EvalConfig,
    pub records: Vec<SceneRecord>,
    pub aggregates: Aggregates,
    pub per_n: Vec<NBreakdown>,
}

impl EvalReport {
    pub fn new(config_hash: String, checkpoint_stage: Stage, eval: EvalConfig, records: Vec<SceneRecord>) -> Self {
        let aggregates = Aggregates::from_records(&records);
        let mut ns: Vec<usize> = records.iter().map(SceneRecord::n).collect();
        ns.sort_unstable();
        ns.dedup();
        let per_n = ns
            .into_iter()
            .map(|n| NBreakdown { n, aggregates: Aggregates::from_records(records.iter().filter(|r| r.n() == n)) })
            .collect();
        Self { schema_version: REPORT_SCHEMA_VERSION, config_hash, checkpoint_stage, eval, records, aggregates, per_n }
    }
}

/// Generates and scores one scene.
pub fn evaluate_scene(
    sampler: &Sampler,
    extractor: &EvalExtractor,
    scorer: &TextScorer,
    req: &GenerationRequest,
) -> Result<SceneRecord> {
    let img = sampler.sample(req)?;
    let crops = crop_faces(&img.pixels, &req.locations, extractor.crop_size())?;
    let res = resemblance(extractor, &crops, &req.identities)?;
    let gen: Vec<Vec<f32>> = crops.iter().map(|c| extractor.embed(c)).collect::<Result<_>>()?;
    let refs: Vec<Vec<f32>> = req.identities.iter().map(|f| extractor.embed_reference(f)).collect::<Result<_>>()?;
    let hits = if gen.is_empty() {
        Vec::new()
    } else {
        let s = SimilarityMatrix::from_embeddings(&gen, &refs)?;
        debug_assert!(association_accuracy(&s).is_ok());
        (0..s.n()).map(|i| s.argmax(i) == i).collect()
    };
    Ok(SceneRecord {
        style: req.caption_label,
        identity_labels: req.identities.iter().map(|f| f.id_label).collect(),
        locations: req.locations.clone(),
        seed: req.seed,
        resemblance: res.scores,
        association_hits: hits,
        text_score: scorer.score(&img.pixels, req.caption_label)?,
        seconds: img.seconds,
    })
}

/// Requests for every (style, combination) pair of the protocol.
pub fn protocol_requests(cfg: &EvalConfig, meta: &DatasetMeta, sampler: &Sampler) -> Result<Vec<GenerationRequest>> {
    let dc = &meta.config;
    let model = &sampler.model.cfg;
    if (model.height, model.width) != (dc.height, dc.width) {
        return Err(Error::Config("checkpoint canvas differs from the dataset canvas".into()));
    }
    let styles: Vec<usize> = if cfg.styles.is_empty() { (0..dc.num_styles).collect() } else { cfg.styles.clone() };
    let combos: Vec<&Vec<usize>> = meta.eval_combos.iter().filter(|c| cfg.sizes.contains(&c.len())).collect();
    if cfg.combos_per_style > 0 && (combos.is_empty() || meta.identities.is_empty()) {
        return Err(Error::Precondition("no held-out identity combinations of the requested sizes".into()));
    }
    let use_tokens = cfg.use_tokens.unwrap_or(sampler.stage != Stage::One);
    let world = dc.world()?;
    let mut out = Vec::new();
    for &style in &styles {
        let mut order = combos.clone();
        order.shuffle(&mut rng(derive_seed(cfg.seed, "combos", style as u64)));
        for k in 0..cfg.combos_per_style {
            let combo = order[k % order.len()];
            let scene_seed = derive_seed(cfg.seed, &format!("scene-{style}"), k as u64);
            let mut r = rng(scene_seed);
            let ids: Vec<IdentityFeature> = combo.iter().map(|&i| meta.identities[i].clone()).collect();
            let locations = sample_locations(ids.len(), dc.height, dc.width, dc.sprite_size, &mut r)?;
            let mut req = GenerationRequest::new(ids, locations.clone(), style, scene_seed);
            req.steps = cfg.steps;
            req.guidance = cfg.guidance;
            req.two_stage = cfg.two_stage;
            req.stage_boundary_fraction = cfg.stage_boundary_fraction;
            req.use_patches = cfg.use_patches;
            req.use_tokens = use_tokens;
            req.pose_stroke_radius = world.stroke_radius();
            if cfg.with_pose {
                req.pose = Some(locations.iter().map(|&a| Skeleton::for_anchor(a, dc.sprite_size, &mut r)).collect());
            }
            out.push(req);
        }
    }
    Ok(out)
}

/// Generates every protocol scene and aggregates the four metrics.
pub fn run_protocol(cfg: &EvalConfig, meta: &DatasetMeta, sampler: &Sampler, scorer: &TextScorer) -> Result<EvalReport> {
    let extractor = EvalExtractor::for_world(meta.config.world()?);
    let reqs = protocol_requests(cfg, meta, sampler)?;
    let mut records = Vec::with_capacity(reqs.len());
    for (i, req) in reqs.iter().enumerate() {
        let rec = evaluate_scene(sampler, &extractor, scorer, req)?;
        log::debug!("eval {} scene {}/{}: hits {:?}", cfg.label, i + 1, reqs.len(), rec.association_hits);
        records.push(rec);
    }
    Ok(EvalReport::new(sampler.config_hash().to_string(), sampler.stage, cfg.clone(), records))
}
