use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_identity, IdentityFeature, World};
use crate::error::{Error, Result};
use crate::pose::Skeleton;
use crate::util::{derive_seed, rng, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub sprite_size: usize,
    pub feature_dim: usize,
    pub identity_pool: usize,
    pub max_people: usize,
    /// Relative frequency of scenes with 1, 2, ... `max_people` people.
    pub people_weights: Vec<f64>,
    pub num_styles: usize,
    pub pose_probability: f64,
    /// Identity pairs and triples reserved for evaluation; no training scene
    /// contains two members of the same reserved group.
    pub heldout_pairs: usize,
    pub heldout_triples: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 4000,
            height: 128,
            width: 128,
            sprite_size: 32,
            feature_dim: 64,
            identity_pool: 16,
            max_people: 4,
            people_weights: vec![0.4, 0.3, 0.2, 0.1],
            num_styles: 4,
            pose_probability: 0.5,
            heldout_pairs: 8,
            heldout_triples: 8,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.count == 0 {
            return bad("dataset count must be positive".into());
        }
        if self.max_people == 0 {
            return bad("max_people must be at least 1".into());
        }
        if self.people_weights.len() != self.max_people {
            return bad(format!(
                "people_weights has {} entries, max_people is {}",
                self.people_weights.len(),
                self.max_people
            ));
        }
        if self.people_weights.iter().any(|w| !w.is_finite() || *w < 0.0) || self.people_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("people_weights must be non-negative with a positive sum".into());
        }
        if self.identity_pool < self.max_people.max(3) {
            return bad(format!("identity_pool {} is smaller than the largest group", self.identity_pool));
        }
        if !(0.0..=1.0).contains(&self.pose_probability) {
            return bad(format!("pose_probability {} outside [0, 1]", self.pose_probability));
        }
        // Every scene of max_people must be placeable on a sprite grid.
        let s = self.sprite_size;
        if s == 0 || (self.width / s) * (self.height / s) < self.max_people {
            return bad(format!("{}x{} canvas cannot hold {} sprites of size {s}", self.width, self.height, self.max_people));
        }
        World::new(self.feature_dim, s, self.num_styles)?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn world(&self) -> Result<World> {
        World::new(self.feature_dim, self.sprite_size, self.num_styles)
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative to the dataset directory.
    pub image_path: String,
    pub locations: Vec<(usize, usize)>,
    pub identity_labels: Vec<usize>,
    pub identity_vectors: Vec<Vec<f32>>,
    pub caption_label: usize,
    pub pose: Option<Vec<Skeleton>>,
}

impl ManifestRecord {
    pub fn identities(&self) -> Vec<IdentityFeature> {
        self.identity_labels
            .iter()
            .zip(&self.identity_vectors)
            .map(|(&l, v)| IdentityFeature { values: v.clone(), id_label: l as i64 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub config_hash: String,
    pub split: String,
    pub identities: Vec<IdentityFeature>,
    /// Reserved identity groups, by pool index.
    pub eval_combos: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image_path)
    }

    pub fn manifest_hash(&self) -> Result<String> {
        let p = self.root.join(MANIFEST_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(sha256_hex(&bytes))
    }
}

pub fn identity_pool(cfg: &DatasetConfig) -> Vec<IdentityFeature> {
    (0..cfg.identity_pool)
        .map(|i| {
            let mut f = sample_identity(derive_seed(cfg.seed, "identity", i as u64), cfg.feature_dim);
            f.id_label = i as i64;
            f
        })
        .collect()
}

fn pairs_of(group: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    group.iter().enumerate().flat_map(move |(i, &a)| group[i + 1..].iter().map(move |&b| (a.min(b), a.max(b))))
}

/// Reserved evaluation groups: triples first, then pairs not already covered.
pub fn heldout_combos(cfg: &DatasetConfig) -> Result<Vec<Vec<usize>>> {
    let mut r = rng(derive_seed(cfg.seed, "heldout", 0));
    let mut combos: Vec<Vec<usize>> = Vec::new();
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    for (n, want) in [(3usize, cfg.heldout_triples), (2, cfg.heldout_pairs)] {
        let mut found = 0;
        let mut attempts = 0;
        while found < want {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(format!(
                    "cannot reserve {want} disjoint groups of {n} from {} identities",
                    cfg.identity_pool
                )));
            }
            let mut g = sample_indices(&mut r, cfg.identity_pool, n).into_vec();
            g.sort_unstable();
            if pairs_of(&g).any(|p| used.contains(&p)) {
                continue;
            }
            used.extend(pairs_of(&g));
            combos.push(g);
            found += 1;
        }
    }
    Ok(combos)
}

fn banned_pairs(combos: &[Vec<usize>]) -> HashSet<(usize, usize)> {
    combos.iter().flat_map(|g| pairs_of(g).collect::<Vec<_>>()).collect()
}

/// Anchor positions keeping every sprite fully inside and separated by at
/// least the sprite size.
pub fn sample_locations<R: Rng + ?Sized>(
    n: usize,
    height: usize,
    width: usize,
    sprite: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let half = sprite / 2;
    let (xmax, ymax) = (width - (sprite - half), height - (sprite - half));
    for _ in 0..1000 {
        let mut locs: Vec<(usize, usize)> = Vec::with_capacity(n);
        for _ in 0..n {
            let cand = (rng.random_range(half..=xmax), rng.random_range(half..=ymax));
            if locs.iter().all(|&(x, y)| x.abs_diff(cand.0) >= sprite || y.abs_diff(cand.1) >= sprite) {
                locs.push(cand);
            }
        }
        if locs.len() == n {
            return Ok(locs);
        }
    }
    Err(Error::Config(format!("could not place {n} sprites of size {sprite} on {width}x{height}")))
}

fn sample_group<R: Rng + ?Sized>(
    n: usize,
    pool: usize,
    banned: &HashSet<(usize, usize)>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    for _ in 0..10_000 {
        let g = sample_indices(rng, pool, n).into_vec();
        let mut sorted = g.clone();
        sorted.sort_unstable();
        if !pairs_of(&sorted).any(|p| banned.contains(&p)) {
            return Ok(g);
        }
    }
    Err(Error::Config(format!("no group of {n} identities avoids every reserved pair")))
}

fn pick_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if t < w {
            return i;
        }
        t -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Writes `meta.json`, `manifest.jsonl` and `images/` under `out_dir`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let world = cfg.world()?;
    let pool = identity_pool(cfg);
    let combos = heldout_combos(cfg)?;
    let banned = banned_pairs(&combos);
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut r = rng(derive_seed(cfg.seed, "record", i as u64));
        let n = pick_weighted(&cfg.people_weights, &mut r) + 1;
        let group = sample_group(n, cfg.identity_pool, &banned, &mut r)?;
        let locations = sample_locations(n, cfg.height, cfg.width, cfg.sprite_size, &mut r)?;
        let caption_label = r.random_range(0..cfg.num_styles);
        let with_pose = r.random::<f64>() < cfg.pose_probability;
        let ids: Vec<IdentityFeature> = group.iter().map(|&g| pool[g].clone()).collect();
        let (img, ann) = world.generate_scene(
            &ids,
            &locations,
            caption_label,
            (cfg.height, cfg.width),
            with_pose,
            derive_seed(cfg.seed, "scene", i as u64),
        )?;
        let rel = format!("images/{i:06}.png");
        img.save_png(&out_dir.join(&rel), 0.0, 1.0)?;
        records.push(ManifestRecord {
            image_path: rel,
            locations: ann.locations,
            identity_labels: group,
            identity_vectors: ids.into_iter().map(|f| f.values).collect(),
            caption_label,
            pose: ann.pose_skeletons,
        });
    }

    let meta = DatasetMeta {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        split: "train".into(),
        identities: pool,
        eval_combos: combos,
    };
    let meta_path = out_dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    let man_path = out_dir.join(MANIFEST_FILE);
    let mut buf = Vec::new();
    for rec in &records {
        serde_json::to_writer(&mut buf, rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(&man_path).map_err(|e| Error::io(&man_path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&man_path, e))?;
    log::info!("wrote {} records to {}", records.len(), out_dir.display());
    Ok(DatasetManifest { root: out_dir.to_path_buf(), meta, records })
}

/// Loads a dataset directory and checks every image exists at the
/// configured size.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(Error::Missing(meta_path));
    }
    let meta: DatasetMeta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let man_path = dir.join(MANIFEST_FILE);
    if !man_path.exists() {
        return Err(Error::Missing(man_path));
    }
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: ManifestRecord = serde_json::from_str(line)?;
        let p = dir.join(&rec.image_path);
        if !p.exists() {
            return Err(Error::Missing(p));
        }
        let (w, h) = image::image_dimensions(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
        if (h as usize, w as usize) != (meta.config.height, meta.config.width) {
            return Err(Error::Invalid(format!(
                "{} is {w}x{h}, dataset is {}x{}",
                p.display(),
                meta.config.width,
                meta.config.height
            )));
        }
        if rec.locations.len() != rec.identity_labels.len() || rec.locations.is_empty() {
            return Err(Error::Invalid(format!("{}: inconsistent annotation", rec.image_path)));
        }
        records.push(rec);
    }
    Ok(DatasetManifest { root: dir.to_path_buf(), meta, records })
}
