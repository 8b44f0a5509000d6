//! Train/held-out splits, manifests, and the on-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/clusters/<subject_id:06>/subject.json
//! <root>/clusters/<subject_id:06>/pair_<i:02>.tsr
//! <root>/clusters/<subject_id:06>/captions.txt   one caption per pair, in pair order
//! <root>/clusters/<subject_id:06>/prompts.txt    unseen prompts, primary first
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_json, read_tsr, sorted_entries, write_atomic, write_json, write_tsr};
use crate::rng::{derive_seed, stream};

use super::cluster::{make_cluster, Cluster, Pair};
use super::grammar::{Caption, GRAMMAR_VERSION};
use super::subject::{generate_subjects, SubjectId, SubjectSpec};
use super::WorldConfig;

/// Provenance of a dataset. For datasets built by [`generate_dataset`],
/// [`regenerate`] reproduces the content bit-exactly from this record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub grammar_version: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub world: WorldConfig,
    pub train_ids: Vec<SubjectId>,
    pub heldout_ids: Vec<SubjectId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedDataset {
    pub train: Vec<Cluster>,
    pub heldout: Vec<Cluster>,
    pub manifest: Manifest,
}

impl SeedDataset {
    pub fn all_clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.train.iter().chain(&self.heldout)
    }
}

/// Generates `n_train + n_heldout` subjects and splits them.
pub fn generate_dataset(seed: u64, n_train: usize, n_heldout: usize, cfg: &WorldConfig) -> Result<SeedDataset> {
    if n_train == 0 || n_heldout == 0 {
        return Err(Error::range("split", "both splits must be nonempty"));
    }
    let subjects = generate_subjects(n_train + n_heldout, derive_seed(seed, &[1]))?;
    split_by_count(subjects, n_heldout, seed, cfg)
}

/// Rebuilds a generated dataset from its manifest.
pub fn regenerate(manifest: &Manifest) -> Result<SeedDataset> {
    if manifest.grammar_version != GRAMMAR_VERSION {
        return Err(Error::Invalid(format!(
            "manifest grammar version {} but this build uses {GRAMMAR_VERSION}",
            manifest.grammar_version
        )));
    }
    generate_dataset(manifest.seed, manifest.n_train, manifest.n_heldout, &manifest.world)
}

/// Splits `subjects` into train and held-out sets and renders every cluster.
pub fn split_dataset(subjects: Vec<SubjectSpec>, heldout_fraction: f64, seed: u64, cfg: &WorldConfig) -> Result<SeedDataset> {
    if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
        return Err(Error::range("heldout fraction", format!("{heldout_fraction} not in (0, 1)")));
    }
    let n = subjects.len();
    let h = (n as f64 * heldout_fraction).round() as usize;
    if h == 0 || h == n {
        return Err(Error::range("heldout fraction", format!("{heldout_fraction} of {n} subjects leaves an empty split")));
    }
    split_by_count(subjects, h, seed, cfg)
}

fn split_by_count(subjects: Vec<SubjectSpec>, n_heldout: usize, seed: u64, cfg: &WorldConfig) -> Result<SeedDataset> {
    cfg.validate()?;
    let ids: BTreeSet<SubjectId> = subjects.iter().map(|s| s.id).collect();
    if ids.len() != subjects.len() {
        return Err(Error::Invalid("duplicate subject ids".into()));
    }
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.shuffle(&mut stream(derive_seed(seed, &[2])));
    let held: BTreeSet<usize> = order[..n_heldout].iter().copied().collect();

    let mut train = Vec::with_capacity(subjects.len() - n_heldout);
    let mut heldout = Vec::with_capacity(n_heldout);
    for (i, subject) in subjects.iter().enumerate() {
        let id = subject.id as u64;
        let k = if held.contains(&i) {
            cfg.heldout_pairs
        } else {
            stream(derive_seed(seed, &[3, id])).random_range(cfg.min_pairs..=cfg.max_pairs)
        };
        let cluster = make_cluster(subject, k, derive_seed(seed, &[4, id]), cfg)?;
        if held.contains(&i) {
            heldout.push(cluster);
        } else {
            train.push(cluster);
        }
    }
    let manifest = Manifest {
        grammar_version: GRAMMAR_VERSION,
        seed,
        n_train: train.len(),
        n_heldout: heldout.len(),
        world: cfg.clone(),
        train_ids: train.iter().map(|c| c.subject.id).collect(),
        heldout_ids: heldout.iter().map(|c| c.subject.id).collect(),
    };
    Ok(SeedDataset { train, heldout, manifest })
}

fn cluster_dir(root: &Path, id: SubjectId) -> PathBuf {
    root.join("clusters").join(format!("{id:06}"))
}

fn lines(captions: &[Caption]) -> String {
    captions.iter().map(|c| format!("{c}\n")).collect()
}

pub fn save_cluster(cluster: &Cluster, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("subject.json"), &cluster.subject)?;
    for (i, pair) in cluster.pairs.iter().enumerate() {
        write_tsr(&dir.join(format!("pair_{i:02}.tsr")), &pair.image)?;
    }
    let captions: Vec<Caption> = cluster.pairs.iter().map(|p| p.caption.clone()).collect();
    write_atomic(&dir.join("captions.txt"), lines(&captions).as_bytes())?;
    write_atomic(&dir.join("prompts.txt"), lines(&cluster.unseen_prompts).as_bytes())
}

fn read_captions(path: &Path) -> Result<Vec<Caption>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(Caption::parse).collect()
}

/// Loads `pair_*.tsr` (or any `*.tsr`, sorted by name) plus `captions.txt`.
pub fn load_pairs(dir: &Path) -> Result<Vec<Pair<f32>>> {
    let images: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "tsr"))
        .collect();
    let captions_path = dir.join("captions.txt");
    let captions = if captions_path.exists() { read_captions(&captions_path)? } else { Vec::new() };
    if captions.len() != images.len() {
        return Err(Error::validation(
            "one caption per image",
            format!("{}: {} images, {} captions", dir.display(), images.len(), captions.len()),
        ));
    }
    images
        .iter()
        .zip(captions)
        .map(|(p, caption)| Ok(Pair { image: read_tsr(p)?, caption }))
        .collect()
}

pub fn load_cluster(dir: &Path) -> Result<Cluster> {
    let subject: SubjectSpec = read_json(&dir.join("subject.json"))?;
    let pairs = load_pairs(dir)?;
    let unseen_prompts = read_captions(&dir.join("prompts.txt"))?;
    if unseen_prompts.is_empty() {
        return Err(Error::validation("unseen prompt present", dir.display().to_string()));
    }
    Ok(Cluster { subject, pairs, unseen_prompts })
}

pub fn save_dataset(ds: &SeedDataset, root: &Path) -> Result<()> {
    for c in ds.all_clusters() {
        save_cluster(c, &cluster_dir(root, c.subject.id))?;
    }
    // the manifest goes last so a complete manifest implies complete clusters
    write_json(&root.join("manifest.json"), &ds.manifest)
}

pub fn load_dataset(root: &Path) -> Result<SeedDataset> {
    let manifest: Manifest = read_json(&root.join("manifest.json"))?;
    let load = |ids: &[SubjectId]| ids.iter().map(|&id| load_cluster(&cluster_dir(root, id))).collect::<Result<Vec<_>>>();
    Ok(SeedDataset { train: load(&manifest.train_ids)?, heldout: load(&manifest.heldout_ids)?, manifest })
}

/// Summary returned by a successful validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub n_train: usize,
    pub n_heldout: usize,
    pub n_pairs: usize,
}

/// Checks a dataset directory and reports the first failing invariant.
/// With `deep`, also regenerates from the manifest and compares bit-exactly.
pub fn validate_dataset(root: &Path, deep: bool) -> Result<DatasetSummary> {
    let manifest_path = root.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)
        .map_err(|e| Error::validation("manifest parses", e.to_string()))?;
    if manifest.grammar_version != GRAMMAR_VERSION {
        return Err(Error::validation("grammar version matches", format!("{}", manifest.grammar_version)));
    }
    if manifest.train_ids.len() != manifest.n_train || manifest.heldout_ids.len() != manifest.n_heldout {
        return Err(Error::validation("manifest counts match id lists", format!(
            "n_train={} ({} ids), n_heldout={} ({} ids)",
            manifest.n_train,
            manifest.train_ids.len(),
            manifest.n_heldout,
            manifest.heldout_ids.len()
        )));
    }
    let train: BTreeSet<_> = manifest.train_ids.iter().collect();
    let held: BTreeSet<_> = manifest.heldout_ids.iter().collect();
    if train.len() != manifest.train_ids.len() || held.len() != manifest.heldout_ids.len() {
        return Err(Error::validation("subject ids unique", "duplicate id in manifest"));
    }
    if let Some(id) = train.intersection(&held).next() {
        return Err(Error::validation("splits disjoint", format!("subject {id} in both splits")));
    }
    let mut n_pairs = 0;
    let mut signatures = BTreeSet::new();
    for &id in manifest.train_ids.iter().chain(&manifest.heldout_ids) {
        let dir = cluster_dir(root, id);
        let c = load_cluster(&dir).map_err(|e| match e {
            Error::Validation { .. } => e,
            other => Error::validation("cluster loads", format!("{}: {other}", dir.display())),
        })?;
        if c.subject.id != id {
            return Err(Error::validation("subject id matches directory", format!("{} holds {}", dir.display(), c.subject.id)));
        }
        if !signatures.insert(c.subject.signature) {
            return Err(Error::validation("signatures distinct", format!("subject {id}")));
        }
        if !(super::cluster::MIN_CLUSTER_PAIRS..=super::cluster::MAX_CLUSTER_PAIRS).contains(&c.pairs.len()) {
            return Err(Error::validation("cluster size in [3, 10]", format!("subject {id} has {}", c.pairs.len())));
        }
        let size = manifest.world.image_size;
        for (i, p) in c.pairs.iter().enumerate() {
            if p.image.shape() != [size, size, 3] {
                return Err(Error::validation("image shape", format!("subject {id} pair {i}: {:?}", p.image.shape())));
            }
            if p.image.data().iter().any(|v| !(v.is_finite() && (-1.0..=1.0).contains(v))) {
                return Err(Error::validation("pixels in [-1, 1]", format!("subject {id} pair {i}")));
            }
            let t = p.caption.trace()?;
            if (t.color, t.category) != (c.subject.color, c.subject.category) {
                return Err(Error::validation("captions describe the subject", format!("subject {id} pair {i}")));
            }
        }
        for p in &c.unseen_prompts {
            if c.pairs.iter().any(|d| &d.caption == p) {
                return Err(Error::validation("unseen prompt differs from demonstrations", format!("subject {id}")));
            }
        }
        n_pairs += c.pairs.len();
    }
    if deep {
        let fresh = regenerate(&manifest)?;
        let stored = load_dataset(root)?;
        let mismatch = fresh.all_clusters().zip(stored.all_clusters()).find(|(a, b)| a != b).map(|(a, _)| a.subject.id);
        if let Some(id) = mismatch {
            return Err(Error::validation("content regenerates from manifest", format!("subject {id}")));
        }
    }
    Ok(DatasetSummary { n_train: manifest.n_train, n_heldout: manifest.n_heldout, n_pairs })
}
