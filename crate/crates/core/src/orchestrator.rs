//! The apprenticeship loop: dequeue subjects in batches, fine-tune and
//! sample one expert per subject on a worker pool, gate every sample on its
//! delta score into the buffer, then train the apprentice on the buffer.
//!
//! Work directory layout:
//!
//! ```text
//! <work>/pipeline_state.json                 coordinator state, rewritten after every batch
//! <work>/buffer/<subject:06>-<sample:02>/    one admitted sample: image.tsr + record.json
//! <work>/apprentice.ntc                      final (or, when streaming, latest) apprentice
//! <work>/adam.ntc                            optimizer state, streaming mode only
//! <work>/apprentice_loss.json                per-step apprentice loss
//! <work>/report.json                         stage timings, admit rate, failures
//! <experts>/<subject>/...                    expert outputs (see `experts`)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{ddpm_sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::experts::{expert_dir, read_expert_output, run_expert_job, write_expert_output, ExpertConfig, ExpertOutput};
use crate::formats::{read_json, read_tsr, sorted_entries, write_json, write_tsr};
use crate::model::{
    loss_and_gradients, upgrade_to_apprentice, ConditionBundle, Flavor, ParameterSet, SamplingSession, TrainItem,
};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, gaussian_tensor, stream};
use crate::scorer::{filter_clusters, DeltaScore, Embedder, DESK_BAND};
use crate::tensor::Tensor;
use crate::world::{Caption, Cluster, Pair, SubjectId};

const TAG_EXPERT: u64 = 0xe0;
const TAG_UPGRADE: u64 = 0xa0;
const TAG_TRAIN: u64 = 0x7a;

/// The gate threshold of the reference recipe, on a web-scale CLIP score scale.
pub const REFERENCE_LAMBDA: f64 = 0.02;

/// How the admission threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSpec {
    /// Admit everything.
    None,
    Literal(f64),
    /// The given percentile of the deltas of a calibration run.
    Percentile(f64),
}

/// `f64` that serializes infinities as the strings `"inf"` / `"-inf"`.
pub(crate) mod threshold {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => Repr::Text("inf".into()),
            f64::NEG_INFINITY => Repr::Text("-inf".into()),
            v => Repr::Number(v),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t}"))),
        }
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(deserialize_with = "super::deserialize")] f64);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Subjects dequeued per batch.
    pub k: usize,
    pub lambda: LambdaSpec,
    /// Subjects whose deltas calibrate a percentile threshold.
    pub calibration_subjects: usize,
    pub max_workers: usize,
    pub demos_per_training_example: usize,
    pub apprentice_steps: usize,
    pub apprentice_lr: f64,
    pub apprentice_batch: usize,
    pub cond_dropout: f64,
    /// Train after every batch instead of once after the loop.
    pub streaming: bool,
    /// Attempts per expert job before the subject is marked failed.
    pub max_attempts: u32,
    /// Intra-cluster similarity band for admitting subjects; `None` keeps all.
    pub band: Option<(f64, f64)>,
    pub resume: bool,
    pub expert: ExpertConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 8,
            lambda: LambdaSpec::Percentile(60.0),
            calibration_subjects: 64,
            max_workers: 8,
            demos_per_training_example: 3,
            apprentice_steps: 6000,
            apprentice_lr: 1e-3,
            apprentice_batch: 16,
            cond_dropout: 0.1,
            streaming: false,
            max_attempts: 2,
            band: Some(DESK_BAND),
            resume: false,
            expert: ExpertConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_workers == 0 || self.max_attempts == 0 || self.apprentice_batch == 0 {
            return Err(Error::range("pipeline config", "k, max_workers, max_attempts and apprentice_batch must be at least 1"));
        }
        if self.demos_per_training_example > 5 {
            return Err(Error::range("demos_per_training_example", "must be in [0, 5]"));
        }
        if let LambdaSpec::Percentile(p) = self.lambda {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::range("lambda percentile", "must be in [0, 100]"));
            }
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) || !(self.apprentice_lr >= 0.0) {
            return Err(Error::range("pipeline config", "dropout in [0, 1] and a nonnegative learning rate"));
        }
        self.expert.validate()
    }
}

/// Strict gate: a sample is admitted iff its delta exceeds the threshold.
pub fn admits(delta: f64, lambda: f64) -> bool {
    delta > lambda
}

/// Nearest-rank percentile; `-inf` for an empty sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NEG_INFINITY;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// One admitted pseudo-target.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferRecord {
    pub subject_id: SubjectId,
    pub sample: usize,
    pub image: Tensor<f32>,
    pub prompt: Caption,
    pub seed: u64,
    pub delta: DeltaScore,
    pub lambda: f64,
    pub batch: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordSidecar {
    subject_id: SubjectId,
    sample: usize,
    prompt: Caption,
    seed: u64,
    delta: DeltaScore,
    #[serde(with = "threshold")]
    lambda: f64,
    batch: usize,
}

/// The buffer of admitted samples, mirrored to an append-only directory log
/// when it has a root. Records are kept in `(subject, sample)` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillBuffer {
    root: Option<PathBuf>,
    records: Vec<BufferRecord>,
}

impl DistillBuffer {
    pub fn in_memory() -> Self {
        DistillBuffer::default()
    }

    /// Opens (creating if needed) the log at `root` and loads its records.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut records = Vec::new();
        for dir in sorted_entries(root)? {
            if !dir.is_dir() {
                continue;
            }
            let side: RecordSidecar = read_json(&dir.join("record.json"))?;
            records.push(BufferRecord {
                image: read_tsr(&dir.join("image.tsr"))?,
                subject_id: side.subject_id,
                sample: side.sample,
                prompt: side.prompt,
                seed: side.seed,
                delta: side.delta,
                lambda: side.lambda,
                batch: side.batch,
            });
        }
        records.sort_by_key(|r| (r.subject_id, r.sample));
        Ok(DistillBuffer { root: Some(root.to_path_buf()), records })
    }

    pub fn records(&self) -> &[BufferRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record. Appending a key that is already present is a no-op,
    /// which makes replaying a batch after a crash idempotent.
    pub fn append(&mut self, record: BufferRecord) -> Result<bool> {
        let key = (record.subject_id, record.sample);
        let pos = match self.records.binary_search_by_key(&key, |r| (r.subject_id, r.sample)) {
            Ok(_) => return Ok(false),
            Err(pos) => pos,
        };
        if let Some(root) = &self.root {
            let name = format!("{:06}-{:02}", record.subject_id, record.sample);
            let dir = root.join(&name);
            if !dir.exists() {
                let tmp = root.join(format!(".tmp-{name}-{}", std::process::id()));
                fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
                write_tsr(&tmp.join("image.tsr"), &record.image)?;
                let side = RecordSidecar {
                    subject_id: record.subject_id,
                    sample: record.sample,
                    prompt: record.prompt.clone(),
                    seed: record.seed,
                    delta: record.delta,
                    lambda: record.lambda,
                    batch: record.batch,
                };
                write_json(&tmp.join("record.json"), &side)?;
                fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
        self.records.insert(pos, record);
        Ok(true)
    }
}

/// A candidate sample with its precomputed delta.
#[derive(Clone, Debug)]
pub struct ScoredCandidate {
    pub subject_id: SubjectId,
    pub sample: usize,
    pub image: Tensor<f32>,
    pub prompt: Caption,
    pub seed: u64,
    pub delta: DeltaScore,
}

/// Scores every sample of every output against its cluster. Samples that
/// fail to score are logged and skipped.
pub fn score_candidates(
    candidates: &[ExpertOutput],
    clusters: &BTreeMap<SubjectId, &Cluster>,
    embedder: &Embedder,
) -> Vec<ScoredCandidate> {
    let mut out = Vec::new();
    for output in candidates {
        let Some(cluster) = clusters.get(&output.subject_id) else {
            tracing::warn!(subject = output.subject_id, "no cluster for expert output; skipped");
            continue;
        };
        for (k, s) in output.samples.iter().enumerate() {
            match embedder.delta_score(&s.image, &cluster.pairs, &s.prompt) {
                Ok(delta) => out.push(ScoredCandidate {
                    subject_id: output.subject_id,
                    sample: k,
                    image: s.image.clone(),
                    prompt: s.prompt.clone(),
                    seed: s.seed,
                    delta,
                }),
                Err(e) => tracing::warn!(subject = output.subject_id, sample = k, error = %e, "scoring failed; skipped"),
            }
        }
    }
    out
}

/// Appends every candidate whose delta exceeds `lambda`; returns the number
/// admitted.
pub fn enqueue_scored(buffer: &mut DistillBuffer, scored: &[ScoredCandidate], lambda: f64, batch: usize) -> Result<usize> {
    let mut admitted = 0;
    for c in scored.iter().filter(|c| admits(c.delta.value, lambda)) {
        buffer.append(BufferRecord {
            subject_id: c.subject_id,
            sample: c.sample,
            image: c.image.clone(),
            prompt: c.prompt.clone(),
            seed: c.seed,
            delta: c.delta,
            lambda,
            batch,
        })?;
        admitted += 1;
    }
    Ok(admitted)
}

/// Scores the candidates and admits those above `lambda`.
pub fn filter_and_enqueue(
    buffer: &mut DistillBuffer,
    candidates: &[ExpertOutput],
    clusters: &BTreeMap<SubjectId, &Cluster>,
    embedder: &Embedder,
    lambda: f64,
    batch: usize,
) -> Result<usize> {
    enqueue_scored(buffer, &score_candidates(candidates, clusters, embedder), lambda, batch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectStatus {
    Pending,
    InFlight,
    /// Expert output published.
    Sampled,
    /// Samples gated into the buffer.
    Filtered,
    /// Buffer contents consumed by apprentice training.
    Done,
    Failed,
    /// Outside the similarity band; never dequeued.
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub seed: u64,
    pub fingerprint: String,
    pub order: Vec<SubjectId>,
    pub cursor: usize,
    pub batches_done: usize,
    #[serde(with = "threshold::option")]
    pub lambda: Option<f64>,
    pub status: BTreeMap<SubjectId, SubjectStatus>,
    pub failures: BTreeMap<SubjectId, String>,
    pub buffer_size: usize,
    pub apprentice_step: usize,
    pub training_complete: bool,
}

impl PipelineState {
    pub fn new(seed: u64, fingerprint: String, order: Vec<SubjectId>, excluded: &[SubjectId]) -> Self {
        let mut status: BTreeMap<SubjectId, SubjectStatus> = order.iter().map(|&s| (s, SubjectStatus::Pending)).collect();
        status.extend(excluded.iter().map(|&s| (s, SubjectStatus::Excluded)));
        PipelineState {
            seed,
            fingerprint,
            order,
            cursor: 0,
            batches_done: 0,
            lambda: None,
            status,
            failures: BTreeMap::new(),
            buffer_size: 0,
            apprentice_step: 0,
            training_complete: false,
        }
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.order.len()
    }

    pub fn batches_total(&self, k: usize) -> usize {
        self.order.len().div_ceil(k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Takes up to `k` subjects from the queue and marks them in flight. Returns
/// an empty list once the queue is exhausted.
pub fn dequeue_batch(state: &mut PipelineState, k: usize) -> Vec<SubjectId> {
    let end = (state.cursor + k).min(state.order.len());
    let batch = state.order[state.cursor..end].to_vec();
    state.cursor = end;
    for s in &batch {
        state.status.insert(*s, SubjectStatus::InFlight);
    }
    batch
}

/// Test hooks for fault injection.
#[derive(Clone, Debug, Default)]
pub struct PipelineHooks {
    /// Stop with [`Error::Halted`] once this many batches have been persisted.
    pub halt_after_batches: Option<usize>,
    /// Number of leading attempts that fail for the given subject.
    pub fail_attempts: BTreeMap<SubjectId, u32>,
}

/// Everything the pipeline reads but never writes.
#[derive(Clone, Copy)]
pub struct PipelineInputs<'a> {
    pub clusters: &'a [Cluster],
    pub base: &'a ParameterSet<f32>,
    pub embedder: &'a Embedder,
    pub schedule: &'a NoiseSchedule<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineDirs {
    pub work: PathBuf,
    /// Expert outputs; shared between runs that freeze the candidate set.
    pub experts: PathBuf,
}

impl PipelineDirs {
    pub fn new(work: impl Into<PathBuf>) -> Self {
        let work = work.into();
        PipelineDirs { experts: work.join("expert_out"), work }
    }

    fn state(&self) -> PathBuf {
        self.work.join("pipeline_state.json")
    }

    fn buffer(&self) -> PathBuf {
        self.work.join("buffer")
    }

    pub fn apprentice(&self) -> PathBuf {
        self.work.join("apprentice.ntc")
    }

    fn adam(&self) -> PathBuf {
        self.work.join("adam.ntc")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub calibration_s: f64,
    pub experts_s: f64,
    pub filtering_s: f64,
    pub training_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub subjects: usize,
    pub excluded: Vec<SubjectId>,
    pub processed: Vec<SubjectId>,
    pub failed: BTreeMap<SubjectId, String>,
    pub batches: usize,
    #[serde(with = "threshold")]
    pub lambda: f64,
    pub candidates: usize,
    pub admitted: usize,
    pub admit_rate: f64,
    pub buffer_size: usize,
    pub apprentice_steps: usize,
    pub final_loss: Option<f64>,
    /// Timings of this invocation only; a resumed run reports its own share.
    pub timings: StageTimings,
}

pub struct PipelineRun {
    pub apprentice: ParameterSet<f32>,
    pub buffer: DistillBuffer,
    pub report: PipelineReport,
    pub state: PipelineState,
}

fn fingerprint(inputs: &PipelineInputs, config: &PipelineConfig, seed: u64) -> String {
    let mut cfg = config.clone();
    cfg.resume = false;
    let ids: Vec<SubjectId> = inputs.clusters.iter().map(|c| c.subject.id).collect();
    let doc = serde_json::json!({ "config": cfg, "seed": seed, "base": inputs.base.hash(), "subjects": ids });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of whatever determines an expert output, stored next to the
/// cached outputs so a changed recipe never reuses them.
fn expert_fingerprint(inputs: &PipelineInputs, config: &ExpertConfig, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "expert": config,
        "seed": seed,
        "base": inputs.base.hash(),
        "betas": (1..=inputs.schedule.steps()).map(|t| inputs.schedule.beta(t)).collect::<Vec<f32>>(),
    })
}

fn prepare_expert_cache(dir: &Path, fp: &serde_json::Value) -> Result<()> {
    let path = dir.join("recipe.json");
    if path.exists() {
        let stored: serde_json::Value = read_json(&path)?;
        if &stored == fp {
            return Ok(());
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&path, fp)
}

/// Per-subject expert seed; independent of batch composition and worker count.
pub fn expert_seed(seed: u64, subject: SubjectId) -> u64 {
    derive_seed(seed, &[TAG_EXPERT, subject as u64])
}

/// Runs (or loads from the cache) the expert job of every subject in
/// `batch` on up to `workers` threads. Results are in batch order.
fn run_batch(
    batch: &[SubjectId],
    clusters: &BTreeMap<SubjectId, &Cluster>,
    inputs: &PipelineInputs,
    config: &PipelineConfig,
    cache: &Path,
    seed: u64,
    hooks: &PipelineHooks,
) -> Vec<Result<ExpertOutput>> {
    let results: Mutex<Vec<Option<Result<ExpertOutput>>>> = Mutex::new((0..batch.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let job = |subject: SubjectId| -> Result<ExpertOutput> {
        let dir = expert_dir(cache, subject);
        if dir.exists() {
            return read_expert_output(&dir);
        }
        let cluster = clusters[&subject];
        let failing = hooks.fail_attempts.get(&subject).copied().unwrap_or(0);
        let mut last = None;
        for attempt in 0..config.max_attempts {
            let result = if attempt < failing {
                Err(Error::Injected(format!("expert job for subject {subject}, attempt {attempt}")))
            } else {
                run_expert_job(inputs.base, cluster, &config.expert, inputs.schedule, expert_seed(seed, subject))
                    .and_then(|out| write_expert_output(&out, cache).map(|_| out))
            };
            match result {
                Ok(out) => return Ok(out),
                Err(e) => {
                    tracing::warn!(subject, attempt, error = %e, "expert job failed");
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    };
    std::thread::scope(|s| {
        for _ in 0..config.max_workers.min(batch.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= batch.len() {
                    break;
                }
                let r = job(batch[i]);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every index visited")).collect()
}

/// Draws the training batch of step `step`: distinct records when the
/// buffer is large enough, with replacement otherwise.
fn training_batch(
    buffer: &DistillBuffer,
    clusters: &BTreeMap<SubjectId, &Cluster>,
    config: &PipelineConfig,
    schedule: &NoiseSchedule<f32>,
    shape: &[usize],
    seed: u64,
    step: usize,
) -> Result<Vec<TrainItem<f32>>> {
    let mut rng = stream(derive_seed(seed, &[TAG_TRAIN, step as u64]));
    let n = buffer.len();
    let picks: Vec<usize> = if n >= config.apprentice_batch {
        sample_indices(&mut rng, n, config.apprentice_batch).into_vec()
    } else {
        (0..config.apprentice_batch).map(|_| rng.random_range(0..n)).collect()
    };
    picks
        .into_iter()
        .map(|i| {
            let r = &buffer.records()[i];
            let cluster = clusters
                .get(&r.subject_id)
                .ok_or_else(|| Error::Invalid(format!("buffer references unknown subject {}", r.subject_id)))?;
            let d = config.demos_per_training_example.min(cluster.pairs.len());
            let demos: Vec<Pair<f32>> =
                sample_indices(&mut rng, cluster.pairs.len(), d).into_iter().map(|j| cluster.pairs[j].clone()).collect();
            Ok(TrainItem {
                x0: r.image.clone(),
                t: rng.random_range(1..=schedule.steps()),
                noise: gaussian_tensor(shape, &mut rng),
                cond: ConditionBundle::with_demos(r.prompt.clone(), demos).dropped(rng.random_bool(config.cond_dropout)),
            })
        })
        .collect()
}

/// Runs steps `start..end` of apprentice training in place. Step `i` draws
/// its batch from a stream keyed by `i` alone, so any split of the step
/// range into calls yields the same parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_apprentice_steps(
    params: &mut ParameterSet<f32>,
    opt: &mut AdamState<f32>,
    buffer: &DistillBuffer,
    clusters: &BTreeMap<SubjectId, &Cluster>,
    config: &PipelineConfig,
    schedule: &NoiseSchedule<f32>,
    seed: u64,
    steps: std::ops::Range<usize>,
) -> Result<Vec<f64>> {
    params.expect_flavor(Flavor::Apprentice)?;
    if steps.is_empty() {
        return Ok(Vec::new());
    }
    if buffer.is_empty() {
        return Err(Error::Invalid("apprentice training needs a nonempty buffer".into()));
    }
    if buffer.len() < config.apprentice_batch {
        tracing::warn!(buffer = buffer.len(), batch = config.apprentice_batch, "buffer smaller than batch; sampling with replacement");
    }
    let shape = params.config.image_shape();
    let mut trace = Vec::with_capacity(steps.len());
    for step in steps {
        let batch = training_batch(buffer, clusters, config, schedule, &shape, seed, step)?;
        let (loss, grads) = loss_and_gradients(params, &batch, schedule).map_err(|e| match e {
            Error::NonFinite { location } => Error::NonFinite { location: format!("apprentice step {step}: {location}") },
            other => other,
        })?;
        opt.update(&mut params.tensors, &grads, config.apprentice_lr)?;
        trace.push(loss as f64);
    }
    Ok(trace)
}

/// Trains the apprentice on the buffer for `config.apprentice_steps` steps.
pub fn train_apprentice(
    apprentice: &ParameterSet<f32>,
    buffer: &DistillBuffer,
    clusters: &[Cluster],
    config: &PipelineConfig,
    schedule: &NoiseSchedule<f32>,
    seed: u64,
) -> Result<(ParameterSet<f32>, Vec<f64>)> {
    let index = cluster_index(clusters);
    let mut params = apprentice.clone();
    let mut opt = AdamState::new(AdamConfig::default());
    let trace =
        train_apprentice_steps(&mut params, &mut opt, buffer, &index, config, schedule, seed, 0..config.apprentice_steps)?;
    Ok((params, trace))
}

pub fn cluster_index(clusters: &[Cluster]) -> BTreeMap<SubjectId, &Cluster> {
    clusters.iter().map(|c| (c.subject.id, c)).collect()
}

/// One demonstration-conditioned generation. Parameters are only borrowed.
pub fn inference(
    apprentice: &ParameterSet<f32>,
    demos: &[Pair<f32>],
    prompt: &Caption,
    schedule: &NoiseSchedule<f32>,
    config: &SamplerConfig,
) -> Result<Tensor<f32>> {
    let cond = ConditionBundle::with_demos(prompt.clone(), demos.to_vec());
    let mut session = SamplingSession::new(apprentice, &cond)?;
    Ok(ddpm_sample(&mut session, &apprentice.config.image_shape(), schedule, config)?.clamp(-1.0, 1.0))
}

pub fn run_pipeline(inputs: PipelineInputs, config: &PipelineConfig, dirs: &PipelineDirs, seed: u64) -> Result<PipelineRun> {
    run_pipeline_with_hooks(inputs, config, dirs, seed, &PipelineHooks::default())
}

/// The full loop. With `config.resume`, continues from the persisted state
/// in `dirs.work`; otherwise any previous state and buffer there are discarded.
pub fn run_pipeline_with_hooks(
    inputs: PipelineInputs,
    config: &PipelineConfig,
    dirs: &PipelineDirs,
    seed: u64,
    hooks: &PipelineHooks,
) -> Result<PipelineRun> {
    config.validate()?;
    inputs.base.expect_flavor(Flavor::Expert)?;
    let start = Instant::now();
    let mut timings = StageTimings::default();
    let index = cluster_index(inputs.clusters);
    let fp = fingerprint(&inputs, config, seed);
    fs::create_dir_all(&dirs.work).map_err(|e| Error::io(&dirs.work, e))?;

    let mut state = if config.resume && dirs.state().exists() {
        let state = PipelineState::load(&dirs.state())?;
        if state.fingerprint != fp {
            return Err(Error::Invalid("cannot resume: configuration, seed, base or subjects changed".into()));
        }
        state
    } else {
        for stale in [dirs.buffer(), dirs.apprentice(), dirs.adam(), dirs.state()] {
            if stale.is_dir() {
                fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
            } else if stale.exists() {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
        let (kept, excluded) = match config.band {
            Some((lo, hi)) => {
                let kept = filter_clusters(inputs.clusters, inputs.embedder, lo, hi)?;
                let kept_ids: Vec<SubjectId> = kept.iter().map(|c| c.subject.id).collect();
                let excluded = index.keys().copied().filter(|id| !kept_ids.contains(id)).collect();
                (kept_ids, excluded)
            }
            None => (inputs.clusters.iter().map(|c| c.subject.id).collect(), Vec::new()),
        };
        PipelineState::new(seed, fp, kept, &excluded)
    };
    prepare_expert_cache(&dirs.experts, &expert_fingerprint(&inputs, &config.expert, seed))?;
    let mut buffer = DistillBuffer::open(&dirs.buffer())?;

    if state.lambda.is_none() {
        let t = Instant::now();
        let lambda = match config.lambda {
            LambdaSpec::None => f64::NEG_INFINITY,
            LambdaSpec::Literal(v) => v,
            LambdaSpec::Percentile(p) => {
                let calib: Vec<SubjectId> = state.order.iter().copied().take(config.calibration_subjects).collect();
                let mut deltas = Vec::new();
                for chunk in calib.chunks(config.k) {
                    let outputs: Vec<ExpertOutput> = run_batch(chunk, &index, &inputs, config, &dirs.experts, seed, hooks)
                        .into_iter()
                        .filter_map(|r| r.ok())
                        .collect();
                    deltas.extend(score_candidates(&outputs, &index, inputs.embedder).iter().map(|c| c.delta.value));
                }
                percentile(&deltas, p)
            }
        };
        tracing::info!(lambda, "admission threshold");
        state.lambda = Some(lambda);
        state.save(&dirs.state())?;
        timings.calibration_s = t.elapsed().as_secs_f64();
    }
    let lambda = state.lambda.expect("resolved above");

    let mut apprentice = if config.streaming && dirs.apprentice().exists() {
        ParameterSet::load(&dirs.apprentice())?
    } else {
        upgrade_to_apprentice(inputs.base, derive_seed(seed, &[TAG_UPGRADE]))?
    };
    let mut opt = if config.streaming && dirs.adam().exists() {
        AdamState::from_container(crate::formats::Container::load(&dirs.adam())?, &dirs.adam())?
    } else {
        AdamState::new(AdamConfig::default())
    };
    let mut trace: Vec<f64> = if dirs.work.join("apprentice_loss.json").exists() && config.streaming {
        read_json(&dirs.work.join("apprentice_loss.json"))?
    } else {
        Vec::new()
    };
    let total_batches = state.batches_total(config.k);
    let mut candidates = 0;

    while !state.is_exhausted() {
        let batch = dequeue_batch(&mut state, config.k);
        let t = Instant::now();
        let results = run_batch(&batch, &index, &inputs, config, &dirs.experts, seed, hooks);
        timings.experts_s += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let mut outputs = Vec::new();
        for (subject, r) in batch.iter().zip(results) {
            match r {
                Ok(out) => {
                    state.status.insert(*subject, SubjectStatus::Sampled);
                    outputs.push(out);
                }
                Err(e) => {
                    state.status.insert(*subject, SubjectStatus::Failed);
                    state.failures.insert(*subject, e.to_string());
                }
            }
        }
        let scored = score_candidates(&outputs, &index, inputs.embedder);
        candidates += scored.len();
        enqueue_scored(&mut buffer, &scored, lambda, state.batches_done)?;
        for out in &outputs {
            state.status.insert(out.subject_id, SubjectStatus::Filtered);
        }
        state.buffer_size = buffer.len();
        timings.filtering_s += t.elapsed().as_secs_f64();

        if config.streaming && !buffer.is_empty() {
            let t = Instant::now();
            let target = config.apprentice_steps * (state.batches_done + 1) / total_batches;
            trace.extend(train_apprentice_steps(
                &mut apprentice,
                &mut opt,
                &buffer,
                &index,
                config,
                inputs.schedule,
                seed,
                state.apprentice_step..target,
            )?);
            state.apprentice_step = target;
            apprentice.save(&dirs.apprentice())?;
            opt.to_container().save(&dirs.adam())?;
            write_json(&dirs.work.join("apprentice_loss.json"), &trace)?;
            timings.training_s += t.elapsed().as_secs_f64();
        }
        state.batches_done += 1;
        state.save(&dirs.state())?;
        if hooks.halt_after_batches == Some(state.batches_done) {
            return Err(Error::Halted { batches: state.batches_done });
        }
    }

    if !state.training_complete {
        let t = Instant::now();
        if !config.streaming && !buffer.is_empty() {
            trace = train_apprentice_steps(
                &mut apprentice,
                &mut opt,
                &buffer,
                &index,
                config,
                inputs.schedule,
                seed,
                0..config.apprentice_steps,
            )?;
            state.apprentice_step = config.apprentice_steps;
        }
        for st in state.status.values_mut() {
            if *st == SubjectStatus::Filtered {
                *st = SubjectStatus::Done;
            }
        }
        apprentice.save(&dirs.apprentice())?;
        write_json(&dirs.work.join("apprentice_loss.json"), &trace)?;
        state.training_complete = true;
        state.save(&dirs.state())?;
        timings.training_s += t.elapsed().as_secs_f64();
    } else {
        apprentice = ParameterSet::load(&dirs.apprentice())?;
        trace = read_json(&dirs.work.join("apprentice_loss.json"))?;
    }
    timings.total_s = start.elapsed().as_secs_f64();

    let processed: Vec<SubjectId> =
        state.status.iter().filter(|(_, s)| **s == SubjectStatus::Done).map(|(id, _)| *id).collect();
    let excluded = state.status.iter().filter(|(_, s)| **s == SubjectStatus::Excluded).map(|(id, _)| *id).collect();
    let report = PipelineReport {
        subjects: inputs.clusters.len(),
        excluded,
        processed,
        failed: state.failures.clone(),
        batches: state.batches_done,
        lambda,
        candidates,
        admitted: buffer.len(),
        admit_rate: if candidates > 0 { buffer.len() as f64 / candidates as f64 } else { 0.0 },
        buffer_size: buffer.len(),
        apprentice_steps: state.apprentice_step,
        final_loss: (!trace.is_empty()).then(|| {
            let tail = &trace[trace.len().saturating_sub(50)..];
            tail.iter().sum::<f64>() / tail.len() as f64
        }),
        timings,
    };
    write_json(&dirs.work.join("report.json"), &report)?;
    Ok(PipelineRun { apprentice, buffer, report, state })
}
