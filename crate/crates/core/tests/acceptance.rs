//! Acceptance criteria 1-11. Run with
//! `cargo test -p idpatch --test acceptance -- --nocapture` to see one
//! PASS/FAIL line per criterion.
//!
//! Criteria 7-10 need trained checkpoints. They use the desk preset in
//! `configs/desk.toml`; the dataset and checkpoints are cached under the
//! cargo target directory, keyed by the config hash, so only the first run
//! pays for training. The full-size run of criterion 7 is `#[ignore]`d.

mod common;

use std::path::{Path, PathBuf};

use common::*;
use idpatch::cli::{cmd_dataset, cmd_train, fit_scorer, manifest, RunConfig};
use idpatch::condimage::compose_canvas;
use idpatch::diffusion_core::{add_noise, make_schedule};
use idpatch::evalkit::{association_accuracy, run_protocol, Aggregates, EvalConfig, EvalReport, SimilarityMatrix, TextScorer};
use idpatch::model::{CondOptions, IdPatchModel, SceneCond};
use idpatch::nn::{Graph, ParamId, ParamStore, Tensor};
use idpatch::pose::Skeleton;
use idpatch::projector::IdPatch;
use idpatch::raster::RgbImage;
use idpatch::sampler::{benchmark_generation, GenerationRequest, Sampler};
use idpatch::synthid::{identity_pool, sample_identity, DatasetManifest, World};
use idpatch::trainer::{load_checkpoint, Stage};
use idpatch::util::rng;
use rand::Rng;

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: impl Into<String>) -> Line {
    let l = Line { id, pass, detail: detail.into() };
    println!("criterion {:>3}: {}  {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    l
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// 1 ------------------------------------------------------------------------

fn zero_init_equivalence(cfg: &RunConfig) -> Line {
    let (model, store) = IdPatchModel::build::<f32>(&cfg.model, 11).unwrap();
    let (h, w) = (cfg.model.height, cfg.model.width);
    let d = cfg.model.projector.feature_dim;
    let mut r = rng(12);
    let pose = idpatch::condimage::rasterize_pose(&[Skeleton::for_anchor((12, 12), 8, &mut r)], (h, w), 1);
    let scenes = vec![
        SceneCond { features: vec![sample_identity(1, d).values, sample_identity(2, d).values], locations: vec![(6, 7), (22, 20)], caption: 1, base: None },
        SceneCond { features: vec![sample_identity(3, d).values], locations: vec![(12, 12)], caption: 2, base: Some(pose.pixels) },
    ];
    let x = Tensor::<f32>::randn([2, 3, h, w], 1.0, &mut r);
    let run = |control: bool| {
        let mut g = Graph::new(&store);
        let proj = model.project(&mut g, &scenes, true);
        let xv = g.constant(x.clone());
        let out = model.eps(&mut g, xv, &[40, 200], &scenes, &proj, &CondOptions::all(2), control);
        g.value(out).data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
    };
    let (with, without) = (run(true), run(false));
    let differing = with.iter().zip(&without).filter(|(a, b)| a != b).count();
    line("1", differing == 0, format!("{differing} of {} output values differ bitwise with vs without the control branch", with.len()))
}

// 2 ------------------------------------------------------------------------

fn schedule_and_noising(cfg: &RunConfig) -> Line {
    let s = &cfg.model.schedule;
    let sched = make_schedule(s.steps, s.beta_min, s.beta_max).unwrap();
    let decreasing = sched.alpha_bars.windows(2).all(|w| w[1] < w[0]);
    let mut r = rng(20);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = r.random_range(0..sched.len());
        let x0: Vec<f32> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        let eps: Vec<f32> = (0..32).map(|_| r.random_range(-3.0..3.0)).collect();
        let got = add_noise(&x0, t, &eps, &sched).unwrap();
        let ab: f64 = (0..=t).map(|k| 1.0 - sched.betas[k]).product();
        for ((g, &a), &e) in got.iter().zip(&x0).zip(&eps) {
            let want = ab.sqrt() * a as f64 + (1.0 - ab).sqrt() * e as f64;
            worst = worst.max((*g as f64 - want).abs());
        }
    }
    line("2", decreasing && worst < 1e-6, format!("alpha_bar strictly decreasing: {decreasing}; max |add_noise - closed form| = {worst:.2e} over 100 cases"))
}

// 3 ------------------------------------------------------------------------

fn ids_with_prefix(store: &ParamStore<f64>, prefixes: &[&str]) -> Vec<ParamId> {
    store.ids().filter(|&id| prefixes.iter().any(|p| store.name(id).starts_with(p))).collect()
}

fn gradient_checks() -> Line {
    let (model, mut store) = IdPatchModel::build::<f64>(&tiny_model(), 30).unwrap();
    let ids = ids_with_prefix(&store, &["projector."]);
    let proj = finite_difference_probes(&mut store, &ids, |s, g| projector_loss(&model, s, g), 8, 1e-3, 31);
    randomize_zero_convs(&model, &mut store, 32);
    let ids = ids_with_prefix(&store, &["unet.", "control.", "text."]);
    let den = finite_difference_probes(&mut store, &ids, |s, g| denoiser_loss(&model, s, g), 8, 1e-3, 33);
    let worst = proj.iter().chain(&den).map(|p| p.rel_error()).fold(0.0, f64::max);
    let pass = proj.len() >= 5 && den.len() >= 5 && worst < 1e-3;
    line("3", pass, format!("{} projector + {} denoiser probes, worst relative error {worst:.2e}", proj.len(), den.len()))
}

// 4 ------------------------------------------------------------------------

fn brute_force_association(m: &[Vec<f64>]) -> f64 {
    let mut hits = 0;
    for (i, row) in m.iter().enumerate() {
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = row.iter().position(|&v| v == best).unwrap();
        hits += (first == i) as usize;
    }
    hits as f64 / m.len() as f64
}

fn association_oracle() -> Line {
    let mut r = rng(40);
    let mut mismatches = 0;
    for k in 0..200 {
        let n = r.random_range(1..=8);
        // Every fourth matrix is small-integer valued so ties occur.
        let m: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| if k % 4 == 0 { r.random_range(0..3) as f64 } else { r.random_range(-1.0..1.0) }).collect())
            .collect();
        let got = association_accuracy(&SimilarityMatrix::new(m.clone()).unwrap()).unwrap();
        mismatches += (got != brute_force_association(&m)) as usize;
    }
    line("4", mismatches == 0, format!("{mismatches} of 200 random matrices differ from the row scan"))
}

// 5 ------------------------------------------------------------------------

fn placement_exactness() -> Line {
    let mut r = rng(50);
    let (h, w, p) = (40, 48, 8);
    let mut bad = 0usize;
    let mut checked = 0usize;
    for case in 0..50 {
        let n = r.random_range(1..=5);
        let locs: Vec<(usize, usize)> = (0..n)
            .map(|i| match (case + i) % 3 {
                0 => (r.random_range(0..3), r.random_range(h - 3..h)),
                _ => (r.random_range(0..w), r.random_range(0..h)),
            })
            .collect();
        let patches: Vec<IdPatch> = (0..n)
            .map(|i| IdPatch {
                pixels: RgbImage::new(p, p, (0..3 * p * p).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap(),
                source_label: i as i64,
            })
            .collect();
        let c = compose_canvas(&patches, &locs, (h, w), None).unwrap();
        // Independent painter: later patches win; box starts clamp inward.
        let mut owner = vec![usize::MAX; h * w];
        let start = |a: usize, ext: usize| (a as i64 - (p / 2) as i64).clamp(0, (ext - p) as i64) as usize;
        for (i, &(x, y)) in locs.iter().enumerate() {
            let (x0, y0) = (start(x, w), start(y, h));
            for dy in 0..p {
                for dx in 0..p {
                    owner[(y0 + dy) * w + x0 + dx] = i;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let want = match owner[y * w + x] {
                    usize::MAX => [-1.0; 3],
                    i => {
                        let (x0, y0) = (start(locs[i].0, w), start(locs[i].1, h));
                        patches[i].pixels.get(x - x0, y - y0)
                    }
                };
                let got = c.pixels.get(x, y);
                checked += 1;
                bad += (got.map(f32::to_bits) != want.map(f32::to_bits)) as usize;
            }
        }
        // The topmost patch reads back whole.
        bad += (c.read_patch(n - 1) != patches[n - 1].pixels) as usize;
    }
    line("5", bad == 0, format!("{bad} mismatching pixels of {checked} over 50 canvases with border clamps and overlaps"))
}

// 6 ------------------------------------------------------------------------

fn oracle_round_trip(cfg: &RunConfig) -> Line {
    let d = idpatch::synthid::DatasetConfig::default();
    let world = World::new(d.feature_dim, d.sprite_size, d.num_styles).unwrap();
    let desk = cfg.dataset.world().unwrap();
    let mut worst = f32::INFINITY;
    for (wld, dim) in [(&world, d.feature_dim), (&desk, cfg.dataset.feature_dim)] {
        for s in 0..100 {
            let f = sample_identity(600 + s, dim);
            let back = wld.extract_feature(&wld.render_face(&f).unwrap().pixels).unwrap();
            worst = worst.min(back.cosine(&f));
        }
    }
    line("6", worst >= 0.99, format!("min cosine {worst:.5} over 100 identities at D=64/S=32 and 100 at the desk size"))
}

// Trained-model criteria ------------------------------------------------------

struct Trained {
    cfg: RunConfig,
    manifest: DatasetManifest,
    scorer: TextScorer,
    two: Sampler,
    single: Sampler,
}

fn cached_root(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(format!("{name}-{}", &cfg.hash()[..16]))
}

/// Builds the dataset and all three checkpoints once per config.
fn prepare(mut cfg: RunConfig, name: &str) -> Trained {
    cfg.root_override = Some(cached_root(&cfg, name));
    if manifest(&cfg).is_err() {
        eprintln!("building dataset under {}", cfg.root().display());
        cmd_dataset(&cfg).unwrap();
    }
    for stage in [Stage::One, Stage::Two, Stage::Single] {
        let path = cfg.checkpoint_path(stage);
        if load_checkpoint(&path).is_err() {
            eprintln!("training stage {} ({})", stage.tag(), path.display());
            cmd_train(&cfg, stage, None, None).unwrap();
        }
    }
    let manifest = manifest(&cfg).unwrap();
    let scorer = fit_scorer(&manifest).unwrap();
    let two = Sampler::new(&load_checkpoint(&cfg.checkpoint_path(Stage::Two)).unwrap()).unwrap();
    let single = Sampler::new(&load_checkpoint(&cfg.checkpoint_path(Stage::Single)).unwrap()).unwrap();
    Trained { cfg, manifest, scorer, two, single }
}

impl Trained {
    fn eval_config(&self, label: &str) -> EvalConfig {
        let s = &self.cfg.sampler;
        EvalConfig {
            label: label.into(),
            steps: s.steps,
            guidance: s.guidance,
            two_stage: s.two_stage,
            stage_boundary_fraction: s.stage_boundary_fraction,
            ..self.cfg.eval.clone()
        }
    }

    fn eval(&self, sampler: &Sampler, ecfg: &EvalConfig) -> EvalReport {
        let r = run_protocol(ecfg, &self.manifest.meta, sampler, &self.scorer).unwrap();
        let a = &r.aggregates;
        eprintln!(
            "  eval {:<14} faces {:>3}  resemblance {:.3}  association {:.3}  text {:.3}",
            ecfg.label,
            a.faces,
            a.mean_resemblance.unwrap_or(f64::NAN),
            a.association_accuracy.unwrap_or(f64::NAN),
            a.mean_text_score.unwrap_or(f64::NAN)
        );
        r
    }
}

fn agg(r: &EvalReport) -> (f64, f64) {
    (r.aggregates.association_accuracy.unwrap(), r.aggregates.mean_resemblance.unwrap())
}

fn end_to_end(id: &'static str, full: &EvalReport, scale: &str) -> Line {
    let (assoc, res) = agg(full);
    line(id, assoc >= 0.90 && res >= 0.80, format!("{scale}: association {assoc:.3} (need >= 0.90), resemblance {res:.3} (need >= 0.80)"))
}

fn runtime_scaling(t: &Trained) -> Line {
    let pool = identity_pool(&t.cfg.dataset);
    let (h, w) = (t.cfg.model.height, t.cfg.model.width);
    let make = |n: usize| {
        // Grid anchors, one sprite apart.
        let s = t.cfg.dataset.sprite_size;
        let cols = (w / s).max(1);
        let locs = (0..n).map(|i| ((i % cols) * s + s / 2, ((i / cols) * s + s / 2).min(h - 1))).collect();
        let mut req = GenerationRequest::new((0..n).map(|i| pool[i % pool.len()].clone()).collect(), locs, 0, 5);
        req.steps = t.cfg.sampler.steps;
        req.guidance = t.cfg.sampler.guidance;
        req
    };
    let rows = benchmark_generation(&t.two, &[1, 8], 3, make).unwrap();
    let ratio = rows[1].mean_seconds / rows[0].mean_seconds;
    line("10", ratio <= 1.3, format!("mean seconds N=1 {:.3}, N=8 {:.3}, ratio {ratio:.3} (need <= 1.3) over {} runs", rows[0].mean_seconds, rows[1].mean_seconds, rows[0].runs))
}

fn png_bytes(img: &RgbImage, dir: &Path, name: &str) -> Vec<u8> {
    let p = dir.join(name);
    img.save_png(&p, 0.0, 1.0).unwrap();
    std::fs::read(p).unwrap()
}

fn determinism(t: &Trained) -> Line {
    let pool = identity_pool(&t.cfg.dataset);
    let mut req = GenerationRequest::new(vec![pool[0].clone(), pool[1].clone()], vec![(8, 10), (22, 20)], 1, 77);
    req.steps = t.cfg.sampler.steps;
    let dir = tempfile::tempdir().unwrap();
    let a = png_bytes(&t.two.sample(&req).unwrap().pixels, dir.path(), "a.png");
    let b = png_bytes(&t.two.sample(&req).unwrap().pixels, dir.path(), "b.png");
    let ecfg = EvalConfig { combos_per_style: 1, ..t.eval_config("determinism") };
    let r1 = run_protocol(&ecfg, &t.manifest.meta, &t.two, &t.scorer).unwrap();
    let r2 = run_protocol(&ecfg, &t.manifest.meta, &t.two, &t.scorer).unwrap();
    let same_eval = r1.aggregates.same_quality(&r2.aggregates) && r1.records.iter().zip(&r2.records).all(|(x, y)| x.resemblance == y.resemblance);
    // A short training run repeated from the same seed.
    let (data_cfg, model_cfg) = tiny_world();
    let ddir = tempfile::tempdir().unwrap();
    let m = idpatch::synthid::build_dataset(&data_cfg, ddir.path()).unwrap();
    let data = idpatch::trainer::TrainingData::load(&m).unwrap();
    let tc = idpatch::trainer::TrainConfig {
        stage: Stage::One,
        steps: 3,
        hyper: idpatch::trainer::TrainerConfig { batch_size: 2, log_every: 0, ..Default::default() },
        model: model_cfg,
        seed: 9,
        metrics: None,
    };
    let c1 = idpatch::trainer::train_stage1(&tc, &data).unwrap().checkpoint.params.value_hash();
    let c2 = idpatch::trainer::train_stage1(&tc, &data).unwrap().checkpoint.params.value_hash();
    line(
        "11",
        a == b && same_eval && c1 == c2,
        format!("sample PNG bytes equal: {}; eval aggregates equal: {same_eval}; repeated training identical: {}", a == b, c1 == c2),
    )
}

fn desk() -> RunConfig {
    RunConfig::load(&configs_dir().join("desk.toml"), &[]).unwrap()
}

#[test]
fn acceptance_criteria() {
    let cfg = desk();
    let mut lines = vec![
        zero_init_equivalence(&cfg),
        schedule_and_noising(&cfg),
        gradient_checks(),
        association_oracle(),
        placement_exactness(),
        oracle_round_trip(&cfg),
    ];

    let t = prepare(cfg, "desk");
    let full = t.eval(&t.two, &t.eval_config("full"));
    // The stated thresholds belong to the full-size run (`full_size_end_to_end`);
    // at desk scale the line is informational and not asserted.
    let desk_line = end_to_end("7", &full, "desk preset (full size is the ignored test)");

    let single_train = t.eval(&t.single, &t.eval_config("single-stage"));
    let (a_full, r_full) = agg(&full);
    let (a_single, _) = agg(&single_train);
    let a = line("8a", a_full > a_single, format!("association two-stage training {a_full:.3} > single-stage training {a_single:.3}"));

    let no_tok = t.eval(&t.two, &EvalConfig { use_tokens: Some(false), ..t.eval_config("no-tokens") });
    let (_, r_notok) = agg(&no_tok);
    let b = line("8b", r_full > r_notok, format!("resemblance full {r_full:.3} > without ID tokens {r_notok:.3}"));

    let no_patch = t.eval(&t.two, &EvalConfig { use_patches: false, sizes: vec![3], ..t.eval_config("no-patches") });
    let (a_np, _) = agg(&no_patch);
    let bound = 1.0 / 3.0 + 0.15;
    let c = line("8c", a_np <= bound, format!("association without patches on N=3 {a_np:.3} (need <= {bound:.3})"));

    let one_phase = t.eval(&t.two, &EvalConfig { two_stage: false, ..t.eval_config("single-phase") });
    let (a_one, _) = agg(&one_phase);
    let nine = line("9", a_full >= a_one - 0.01, format!("association two-stage inference {a_full:.3} >= single-stage inference {a_one:.3} - 0.01"));

    lines.extend([a, b, c, nine, runtime_scaling(&t), determinism(&t)]);
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!("criterion   7 is reported at desk scale only: {}", if desk_line.pass { "meets the full-size thresholds" } else { "below the full-size thresholds" });
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

/// Criterion 7 at the stated scale: default configs, 4000 images at 128x128,
/// both training stages. Hours of CPU time, hence ignored by default.
#[test]
#[ignore]
fn full_size_end_to_end() {
    let cfg = RunConfig::load(&configs_dir().join("default.toml"), &[]).unwrap();
    let t = prepare(cfg, "default");
    let full = t.eval(&t.two, &t.eval_config("full"));
    let l = end_to_end("7", &full, "default configs, 128x128");
    assert!(l.pass, "{}", l.detail);
}

#[test]
fn aggregates_helper_matches_report() {
    // Guard for the printed numbers: report aggregates are recomputable.
    let r = EvalReport::new("h".into(), Stage::Two, EvalConfig::default(), vec![]);
    assert_eq!(r.aggregates, Aggregates::from_records(&r.records));
}
