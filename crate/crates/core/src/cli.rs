//! Command-line entry points: dataset, train, sample, eval and bench, all
//! driven by one TOML run configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{emit_report, run_protocol, EvalConfig, TextScorer};
use crate::model::ModelConfig;
use crate::pose::Skeleton;
use crate::sampler::{benchmark_generation, GenerationRequest, Sampler};
use crate::synthid::{build_dataset, load_manifest, DatasetConfig, DatasetManifest, IdentityFeature, META_FILE};
use crate::trainer::{
    load_checkpoint, save_checkpoint, train_single_stage, train_stage1, train_stage2, Stage, TrainConfig, TrainerConfig,
    TrainingData,
};
use crate::util::{derive_seed, rng, sha256_hex};

/// Overrides the configured output root.
pub const OUTPUT_ROOT_ENV: &str = "IDPATCH_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub two_stage: bool,
    pub stage_boundary_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, guidance: 3.0, two_stage: true, stage_boundary_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; also the dataset and eval seed unless those are set.
    pub seed: u64,
    pub output_root: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    /// Set from the command line; wins over the environment and the file.
    #[serde(skip)]
    pub root_override: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            root_override: None,
        }
    }
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: &[&str] = &["eval.use_tokens"];

fn key_paths(v: &toml::Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            key_paths(child, &path, out);
            out.insert(path);
        }
    }
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("{path}: {p} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

fn parse_literal(s: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {s}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

impl RunConfig {
    /// Parses a configuration, applying `key=value` overrides first and
    /// rejecting every unknown key.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str::<toml::Table>(text).map(toml::Value::Table).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut value, k.trim(), parse_literal(v.trim()))?;
        }
        let mut known = BTreeSet::new();
        key_paths(&toml::Value::try_from(RunConfig::default()).expect("defaults serialize"), "", &mut known);
        known.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
        let mut present = BTreeSet::new();
        key_paths(&value, "", &mut present);
        let unknown: Vec<&String> = present.difference(&known).collect();
        if !unknown.is_empty() {
            let list: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            return Err(Error::Config(format!("unknown keys: {}", list.join(", "))));
        }
        let explicit = |k: &str| present.contains(k);
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if !explicit("dataset.seed") {
            cfg.dataset.seed = cfg.seed;
        }
        if !explicit("eval.seed") {
            cfg.eval.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.trainer.validate()?;
        let (d, m) = (&self.dataset, &self.model);
        let mut bad = Vec::new();
        if (d.height, d.width) != (m.height, m.width) {
            bad.push("model.height/width differ from dataset.height/width");
        }
        if d.feature_dim != m.projector.feature_dim {
            bad.push("model.projector.feature_dim differs from dataset.feature_dim");
        }
        if d.num_styles != m.num_styles {
            bad.push("model.num_styles differs from dataset.num_styles");
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad.join("; ")));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn root(&self) -> PathBuf {
        self.root_override
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| self.output_root.clone())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root().join("dataset")
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.root().join("checkpoints").join(format!("stage{}.ckpt", stage.tag()))
    }

    fn record(&self) -> Result<()> {
        let root = self.root();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let p = root.join(format!("run-{}.json", &self.hash()[..16]));
        let body = serde_json::json!({ "config_hash": self.hash(), "config": self });
        fs::write(&p, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&p, e))
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Invalid(_) | Error::Shape(_) | Error::Overlap { .. } => 2,
        Error::Precondition(_) | Error::Missing(_) | Error::CheckpointVersion { .. } | Error::CheckpointCorrupt(_) => 3,
        Error::Numerical(_) | Error::Io { .. } | Error::Image { .. } => 4,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        3 => "precondition",
        _ => "runtime",
    }
}

/// The single stderr line printed for a failed command.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": kind(e), "code": exit_code(e), "message": e.to_string() }).to_string()
}

pub fn cmd_dataset(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.record()?;
    let dir = cfg.dataset_dir();
    build_dataset(&cfg.dataset, &dir)?;
    Ok(dir.join(META_FILE))
}

/// The dataset of `cfg`, checked against the configured dataset settings.
pub fn manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let dir = cfg.dataset_dir();
    if !dir.join(META_FILE).exists() {
        return Err(Error::Missing(dir.join(META_FILE)));
    }
    let m = load_manifest(&dir)?;
    if m.meta.config != cfg.dataset {
        return Err(Error::Precondition(format!(
            "dataset at {} was built from a different dataset config; rerun `idpatch dataset`",
            dir.display()
        )));
    }
    Ok(m)
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage, init: Option<&Path>, steps: Option<u64>) -> Result<PathBuf> {
    cfg.record()?;
    let data = TrainingData::load(&manifest(cfg)?)?;
    let steps = steps.unwrap_or(match stage {
        Stage::One => cfg.trainer.stage1_steps,
        Stage::Two => cfg.trainer.stage2_steps,
        Stage::Single => cfg.trainer.stage1_steps + cfg.trainer.stage2_steps,
    });
    let tc = TrainConfig {
        stage,
        steps,
        hyper: cfg.trainer.clone(),
        model: cfg.model.clone(),
        seed: cfg.seed,
        metrics: Some(cfg.root().join("metrics.jsonl")),
    };
    let run = match stage {
        Stage::One => train_stage1(&tc, &data)?,
        Stage::Single => train_single_stage(&tc, &data)?,
        Stage::Two => {
            let path = init.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path(Stage::One));
            if !path.exists() {
                return Err(Error::Precondition(format!(
                    "stage 2 needs a stage-1 checkpoint; {} does not exist",
                    path.display()
                )));
            }
            train_stage2(&tc, &data, &load_checkpoint(&path)?)?
        }
    };
    let out = cfg.checkpoint_path(stage);
    save_checkpoint(&run.checkpoint, &out)?;
    Ok(out)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestEntry {
    /// Indices into the dataset's identity pool.
    #[serde(default)]
    pub identity_labels: Option<Vec<usize>>,
    /// Raw identity vectors, normalized on load.
    #[serde(default)]
    pub vectors: Option<Vec<Vec<f32>>>,
    pub locations: Vec<(usize, usize)>,
    pub caption_label: usize,
    /// Draw a stick-figure pose at every anchor.
    #[serde(default)]
    pub pose: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    pub request: Vec<RequestEntry>,
}

pub fn build_request(cfg: &RunConfig, pool: &[IdentityFeature], e: &RequestEntry) -> Result<GenerationRequest> {
    let identities = match (&e.identity_labels, &e.vectors) {
        (Some(l), None) => l
            .iter()
            .map(|&i| pool.get(i).cloned().ok_or_else(|| Error::Invalid(format!("identity label {i} outside the pool"))))
            .collect::<Result<Vec<_>>>()?,
        (None, Some(v)) => v.iter().map(|x| IdentityFeature::from_raw(x.clone(), -1)).collect(),
        _ => return Err(Error::Config("each request needs exactly one of identity_labels or vectors".into())),
    };
    let mut req = GenerationRequest::new(identities, e.locations.clone(), e.caption_label, e.seed);
    req.steps = cfg.sampler.steps;
    req.guidance = cfg.sampler.guidance;
    req.two_stage = cfg.sampler.two_stage;
    req.stage_boundary_fraction = cfg.sampler.stage_boundary_fraction;
    let world = cfg.dataset.world()?;
    req.pose_stroke_radius = world.stroke_radius();
    if e.pose {
        let mut r = rng(derive_seed(e.seed, "pose", 0));
        req.pose = Some(e.locations.iter().map(|&a| Skeleton::for_anchor(a, world.sprite_size(), &mut r)).collect());
    }
    Ok(req)
}

fn identity_pool(cfg: &RunConfig) -> Vec<IdentityFeature> {
    crate::synthid::identity_pool(&cfg.dataset)
}

pub fn cmd_sample(cfg: &RunConfig, ckpt: &Path, request: &Path) -> Result<Vec<PathBuf>> {
    cfg.record()?;
    if !request.exists() {
        return Err(Error::Missing(request.to_path_buf()));
    }
    let text = fs::read_to_string(request).map_err(|e| Error::io(request, e))?;
    let file: RequestFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", request.display(), e.message())))?;
    let sampler = Sampler::new(&load_checkpoint(ckpt)?)?;
    let pool = identity_pool(cfg);
    let dir = cfg.root().join("samples");
    let mut out = Vec::new();
    for (i, e) in file.request.iter().enumerate() {
        let mut req = build_request(cfg, &pool, e)?;
        if sampler.stage == Stage::One {
            req.use_tokens = false;
        }
        let img = sampler.sample(&req)?;
        let stem = e.name.clone().unwrap_or_else(|| format!("sample_{i:03}"));
        let (png, _) = img.save(&dir, &stem, &cfg.hash())?;
        out.push(png);
    }
    Ok(out)
}

/// Caption scorer fitted on every dataset image.
pub fn fit_scorer(m: &DatasetManifest) -> Result<TextScorer> {
    let imgs: Vec<(crate::raster::RgbImage, usize)> = (0..m.records.len())
        .map(|i| Ok((crate::raster::RgbImage::load_png(&m.image_path(i), 0.0, 1.0)?, m.records[i].caption_label)))
        .collect::<Result<_>>()?;
    TextScorer::fit(imgs.iter().map(|(im, l)| (im, *l)), m.meta.config.num_styles)
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path) -> Result<PathBuf> {
    cfg.record()?;
    let m = manifest(cfg)?;
    let sampler = Sampler::new(&load_checkpoint(ckpt)?)?;
    let scorer = fit_scorer(&m)?;
    let mut ecfg = cfg.eval.clone();
    ecfg.steps = cfg.sampler.steps;
    ecfg.guidance = cfg.sampler.guidance;
    ecfg.two_stage = cfg.sampler.two_stage;
    ecfg.stage_boundary_fraction = cfg.sampler.stage_boundary_fraction;
    let mut report = run_protocol(&ecfg, &m.meta, &sampler, &scorer)?;
    report.config_hash = cfg.hash();
    let dir = cfg.root().join("eval").join(&ecfg.label);
    emit_report(&report, &dir)?;
    Ok(dir.join("report.json"))
}

pub fn cmd_bench(cfg: &RunConfig, ckpt: &Path, n_list: &[usize], runs: usize) -> Result<PathBuf> {
    cfg.record()?;
    let sampler = Sampler::new(&load_checkpoint(ckpt)?)?;
    let pool = identity_pool(cfg);
    let (h, w) = (cfg.model.height, cfg.model.width);
    let use_tokens = sampler.stage != Stage::One;
    let make = |n: usize| {
        let mut r = rng(derive_seed(cfg.seed, "bench", n as u64));
        let ids = (0..n).map(|i| pool[i % pool.len()].clone()).collect();
        let locs = (0..n).map(|_| (rand::Rng::random_range(&mut r, 0..w), rand::Rng::random_range(&mut r, 0..h))).collect();
        let mut req = GenerationRequest::new(ids, locs, 0, cfg.seed);
        req.steps = cfg.sampler.steps;
        req.guidance = cfg.sampler.guidance;
        req.use_tokens = use_tokens;
        req
    };
    let rows = benchmark_generation(&sampler, n_list, runs, make)?;
    let dir = cfg.root().join("bench");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = dir.join("timing.json");
    let body = serde_json::json!({ "config_hash": cfg.hash(), "steps": cfg.sampler.steps, "rows": rows });
    fs::write(&p, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

#[derive(Parser, Debug)]
#[command(name = "idpatch", version, about = "Identity-patch conditioned diffusion on a synthetic identity world")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "idpatch.toml")]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set trainer.lr=3e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root; takes precedence over the config and the environment.
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset.
    Dataset,
    /// Train one stage.
    Train {
        #[arg(long, value_parser = ["1", "2", "single"])]
        stage: String,
        /// Stage-2 initialization (defaults to the run's stage-1 checkpoint).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Overrides the configured step count for this stage.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate images for a request file.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        request: PathBuf,
    },
    /// Run the evaluation protocol on held-out identity combinations.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Time generation against the number of identities.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
}

/// Runs a parsed command and returns the paths to print.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut cfg = RunConfig::load(&cli.config, &cli.overrides)?;
    cfg.root_override = cli.output_root.clone();
    match &cli.command {
        Command::Dataset => cmd_dataset(&cfg).map(|p| vec![p]),
        Command::Train { stage, init, steps } => cmd_train(&cfg, Stage::parse(stage)?, init.as_deref(), *steps).map(|p| vec![p]),
        Command::Sample { ckpt, request } => cmd_sample(&cfg, ckpt, request),
        Command::Eval { ckpt } => cmd_eval(&cfg, ckpt).map(|p| vec![p]),
        Command::Bench { ckpt, n_list, runs } => cmd_bench(&cfg, ckpt, n_list, *runs).map(|p| vec![p]),
    }
}
