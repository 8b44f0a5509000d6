//! Per-subject expert fine-tuning and pseudo-target sampling.
//!
//! Expert outputs are published with an atomic directory protocol:
//!
//! ```text
//! <root>/<subject_id>/<k>.tsr      one file per sample
//! <root>/<subject_id>/record.json  subject, per-sample prompt and seed, loss trace, timing
//! ```
//!
//! Everything is first written under `<root>/.tmp-<subject_id>-<pid>/` and
//! the directory is renamed into place, so a visible subject directory is
//! always complete.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddpm_sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::formats::{read_json, read_tsr, sorted_entries, write_json, write_tsr};
use crate::model::{loss_and_gradients, ConditionBundle, Flavor, ParameterSet, SamplingSession, TrainItem};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, gaussian_tensor, stream};
use crate::tensor::Tensor;
use crate::world::{Caption, Cluster, SubjectId};

/// Learning rate of the reference expert recipe (Adafactor at 1e-5 on a
/// billion-parameter model).
pub const REFERENCE_EXPERT_LR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub steps: usize,
    pub lr: f64,
    pub samples_per_prompt: usize,
    pub guidance_weight: f64,
    pub cond_dropout: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig { steps: 500, lr: 1e-3, samples_per_prompt: 4, guidance_weight: 3.0, cond_dropout: 0.1 }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_prompt == 0 {
            return Err(Error::range("samples_per_prompt", "must be at least 1"));
        }
        if !(self.lr >= 0.0) || !(self.guidance_weight >= 0.0) || !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::range("expert config", "lr and guidance must be nonnegative, dropout in [0, 1]"));
        }
        Ok(())
    }
}

/// One candidate pseudo-target.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSample {
    pub prompt: Caption,
    pub seed: u64,
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertOutput {
    pub subject_id: SubjectId,
    pub samples: Vec<ExpertSample>,
    pub train_loss_trace: Vec<f64>,
    pub wall_time_s: f64,
}

/// Fine-tunes `base` on the cluster's pairs only: every step uses all pairs
/// with a uniform timestep and fresh noise each, and condition dropout.
pub fn finetune_expert(
    base: &ParameterSet<f32>,
    cluster: &Cluster,
    config: &ExpertConfig,
    schedule: &NoiseSchedule<f32>,
    seed: u64,
) -> Result<(ParameterSet<f32>, Vec<f64>)> {
    base.expect_flavor(Flavor::Expert)?;
    config.validate()?;
    let mut params = base.clone();
    let mut opt = AdamState::new(AdamConfig::default());
    let mut rng = stream(derive_seed(seed, &[0xf1e]));
    let shape = base.config.image_shape();
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<TrainItem<f32>> = cluster
            .pairs
            .iter()
            .map(|p| TrainItem {
                x0: p.image.clone(),
                t: rng.random_range(1..=schedule.steps()),
                noise: gaussian_tensor(&shape, &mut rng),
                cond: ConditionBundle::text(p.caption.clone()).dropped(rng.random_bool(config.cond_dropout)),
            })
            .collect();
        let (loss, grads) = loss_and_gradients(&params, &batch, schedule).map_err(|e| match e {
            Error::NonFinite { location } => Error::NonFinite { location: format!("expert step {step}: {location}") },
            other => other,
        })?;
        opt.update(&mut params.tensors, &grads, config.lr)?;
        trace.push(loss as f64);
    }
    Ok((params, trace))
}

/// Loss on the cluster over a fixed grid of timesteps and noise draws, for
/// comparing parameter sets on equal terms.
pub fn cluster_loss(params: &ParameterSet<f32>, cluster: &Cluster, schedule: &NoiseSchedule<f32>, seed: u64) -> Result<f64> {
    let shape = params.config.image_shape();
    let mut rng = stream(seed);
    let t_max = schedule.steps();
    let grid = [t_max / 10, t_max / 4, t_max / 2, 3 * t_max / 4, t_max];
    let batch: Vec<TrainItem<f32>> = cluster
        .pairs
        .iter()
        .flat_map(|p| grid.iter().map(move |&t| (p, t.max(1))))
        .map(|(p, t)| TrainItem {
            x0: p.image.clone(),
            t,
            noise: gaussian_tensor(&shape, &mut rng),
            cond: ConditionBundle::text(p.caption.clone()),
        })
        .collect();
    Ok(loss_and_gradients(params, &batch, schedule)?.0 as f64)
}

/// `n` guided samples for `prompt` from an expert (no demonstrations).
/// Sample `k` uses sampler seed `derive_seed(seed, [k])`.
pub fn sample_pseudo_targets(
    expert: &ParameterSet<f32>,
    prompt: &Caption,
    n: usize,
    guidance: f64,
    schedule: &NoiseSchedule<f32>,
    seed: u64,
) -> Result<Vec<ExpertSample>> {
    expert.expect_flavor(Flavor::Expert)?;
    let mut session = SamplingSession::new(expert, &ConditionBundle::text(prompt.clone()))?;
    let shape = expert.config.image_shape();
    (0..n)
        .map(|k| {
            let s = derive_seed(seed, &[k as u64]);
            let image = ddpm_sample(&mut session, &shape, schedule, &SamplerConfig::new(guidance, s))?.clamp(-1.0, 1.0);
            Ok(ExpertSample { prompt: prompt.clone(), seed: s, image })
        })
        .collect()
}

/// Fine-tunes an expert on `cluster` and samples every unseen prompt. The
/// expert is dropped afterwards.
pub fn run_expert_job(
    base: &ParameterSet<f32>,
    cluster: &Cluster,
    config: &ExpertConfig,
    schedule: &NoiseSchedule<f32>,
    seed: u64,
) -> Result<ExpertOutput> {
    let start = Instant::now();
    let wrap = |e: Error| Error::Expert { subject: cluster.subject.id, source: Box::new(e) };
    let (expert, trace) = finetune_expert(base, cluster, config, schedule, derive_seed(seed, &[1])).map_err(wrap)?;
    let mut samples = Vec::new();
    for (j, prompt) in cluster.unseen_prompts.iter().enumerate() {
        let s = derive_seed(seed, &[2, j as u64]);
        samples.extend(
            sample_pseudo_targets(&expert, prompt, config.samples_per_prompt, config.guidance_weight, schedule, s).map_err(wrap)?,
        );
    }
    Ok(ExpertOutput { subject_id: cluster.subject.id, samples, train_loss_trace: trace, wall_time_s: start.elapsed().as_secs_f64() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    file: String,
    prompt: Caption,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OutputRecord {
    subject_id: SubjectId,
    samples: Vec<SampleRecord>,
    train_loss_trace: Vec<f64>,
    wall_time_s: f64,
}

/// Where a published output lives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: SubjectId,
    pub dir: PathBuf,
    pub n_samples: usize,
}

/// Points at which [`write_expert_output_with_fault`] can be made to fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteFault {
    /// After the first sample file, before the record.
    AfterFirstSample,
    /// After every file, before the publishing rename.
    BeforePublish,
}

pub fn expert_dir(root: &Path, subject: SubjectId) -> PathBuf {
    root.join(subject.to_string())
}

pub fn write_expert_output(output: &ExpertOutput, root: &Path) -> Result<ManifestEntry> {
    write_expert_output_with_fault(output, root, None)
}

/// [`write_expert_output`] that optionally aborts at `fault`, leaving only
/// temp artifacts behind.
pub fn write_expert_output_with_fault(output: &ExpertOutput, root: &Path, fault: Option<WriteFault>) -> Result<ManifestEntry> {
    if output.train_loss_trace.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite { location: format!("loss trace of subject {}", output.subject_id) });
    }
    let tmp = root.join(format!(".tmp-{}-{}", output.subject_id, std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut samples = Vec::with_capacity(output.samples.len());
    for (k, s) in output.samples.iter().enumerate() {
        let file = format!("{k}.tsr");
        write_tsr(&tmp.join(&file), &s.image)?;
        if k == 0 && fault == Some(WriteFault::AfterFirstSample) {
            return Err(Error::Injected(format!("writer for subject {} stopped after one sample", output.subject_id)));
        }
        samples.push(SampleRecord { file, prompt: s.prompt.clone(), seed: s.seed });
    }
    let record = OutputRecord {
        subject_id: output.subject_id,
        samples,
        train_loss_trace: output.train_loss_trace.clone(),
        wall_time_s: output.wall_time_s,
    };
    write_json(&tmp.join("record.json"), &record)?;
    if fault == Some(WriteFault::BeforePublish) {
        return Err(Error::Injected(format!("writer for subject {} stopped before publishing", output.subject_id)));
    }
    let dir = expert_dir(root, output.subject_id);
    if dir.exists() {
        let stale = root.join(format!(".tmp-stale-{}-{}", output.subject_id, std::process::id()));
        fs::rename(&dir, &stale).map_err(|e| Error::io(&dir, e))?;
        fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok(ManifestEntry { subject_id: output.subject_id, dir, n_samples: output.samples.len() })
}

pub fn read_expert_output(dir: &Path) -> Result<ExpertOutput> {
    let record: OutputRecord = read_json(&dir.join("record.json"))?;
    let samples = record
        .samples
        .into_iter()
        .map(|s| Ok(ExpertSample { image: read_tsr(&dir.join(&s.file))?, prompt: s.prompt, seed: s.seed }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertOutput {
        subject_id: record.subject_id,
        samples,
        train_loss_trace: record.train_loss_trace,
        wall_time_s: record.wall_time_s,
    })
}

/// Published outputs under `root`, in directory-name order. Temp
/// artifacts are invisible.
pub fn list_expert_outputs(root: &Path) -> Result<Vec<ManifestEntry>> {
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let record: OutputRecord = read_json(&dir.join("record.json"))?;
        out.push(ManifestEntry { subject_id: record.subject_id, n_samples: record.samples.len(), dir });
    }
    out.sort_by_key(|e| e.subject_id);
    Ok(out)
}
