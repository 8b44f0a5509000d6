//! Held-out benchmark with surrogate metrics, and the ablations built on it.
//!
//! Scores for one generation `y` of subject `s` under prompt `p`:
//!
//! - `subject_fidelity`: max over the subject's reference images of `image_image_score(y, r)`
//! - `clip_i`: mean of the same scores
//! - `clip_t`: `clip_score(y, p)`
//!
//! The reference images are the whole held-out cluster for every demo
//! count, so rows at different counts are directly comparable.
//!
//! Report layout under the output directory:
//!
//! ```text
//! metrics.csv    one row per item, then one aggregate row per result (subject_id "all")
//! metrics.json   every result with items and aggregates
//! grids/<model>-k<demo_count>-s<subject:06>.png
//!                row 0: reference images; row 1 + j: generations for template j
//!                tile = GRID_TILE x GRID_TILE pixels, columns = max(references, images_per_prompt)
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddpm_sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::formats::{write_atomic, write_json};
use crate::model::{loss_and_gradients, ConditionBundle, Flavor, ParameterSet, SamplingSession, TrainItem};
use crate::optim::{AdamConfig, AdamState};
use crate::orchestrator::{run_pipeline, LambdaSpec, PipelineConfig, PipelineDirs, PipelineInputs};
use crate::rng::{derive_seed, gaussian_tensor, stream};
use crate::scorer::Embedder;
use crate::tensor::Tensor;
use crate::world::{Accessory, Attribute, Caption, CaptionTrace, Cluster, Context, Pair, Skill, Style, SubjectId};

/// Edge length of one grid tile in pixels.
pub const GRID_TILE: usize = 64;

/// A prompt with the subject left open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub context: Context,
    pub skill: Option<Skill>,
}

impl PromptTemplate {
    pub fn render(&self, cluster: &Cluster) -> Caption {
        Caption::from_trace(&CaptionTrace {
            color: cluster.subject.color,
            category: cluster.subject.category,
            context: self.context,
            skill: self.skill,
        })
    }
}

/// Every context on its own, followed by context-skill combinations cycling
/// through all nine skills. The first 25 mirror a 25-template benchmark.
pub fn default_templates(n: usize) -> Vec<PromptTemplate> {
    let skills: Vec<Skill> = Attribute::ALL
        .iter()
        .map(|&a| Skill::Attribute(a))
        .chain(Style::ALL.iter().map(|&s| Skill::Style(s)))
        .chain(Accessory::ALL.iter().map(|&a| Skill::Accessory(a)))
        .collect();
    let plain = Context::ALL.iter().map(|&context| PromptTemplate { context, skill: None });
    let combos = (0..).map(|i: usize| PromptTemplate {
        context: Context::ALL[(5 * i + 3) % Context::ALL.len()],
        skill: Some(skills[i % skills.len()]),
    });
    plain.chain(combos).take(n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub subjects: usize,
    pub templates: usize,
    pub images_per_prompt: usize,
    pub guidance_weight: f64,
    pub demo_count: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { subjects: 16, templates: 25, images_per_prompt: 4, guidance_weight: 3.0, demo_count: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub subjects: Vec<Cluster>,
    pub templates: Vec<PromptTemplate>,
    pub images_per_prompt: usize,
    pub guidance_weight: f64,
    pub seed: u64,
}

impl BenchSpec {
    /// Takes the first `config.subjects` held-out clusters; fails if any of
    /// them is a training subject.
    pub fn new(heldout: &[Cluster], train_ids: &[SubjectId], config: &BenchConfig, seed: u64) -> Result<Self> {
        let train: BTreeSet<SubjectId> = train_ids.iter().copied().collect();
        let subjects: Vec<Cluster> = heldout.iter().take(config.subjects).cloned().collect();
        if let Some(c) = subjects.iter().find(|c| train.contains(&c.subject.id)) {
            return Err(Error::Invalid(format!("bench subject {} is a training subject", c.subject.id)));
        }
        if config.images_per_prompt == 0 || config.templates == 0 {
            return Err(Error::range("bench config", "templates and images_per_prompt must be at least 1"));
        }
        Ok(BenchSpec {
            subjects,
            templates: default_templates(config.templates),
            images_per_prompt: config.images_per_prompt,
            guidance_weight: config.guidance_weight,
            seed,
        })
    }

    /// Sampler seed of one item; shared by every model and demo count.
    pub fn item_seed(&self, subject: SubjectId, template: usize, sample: usize) -> u64 {
        derive_seed(self.seed, &[subject as u64, template as u64, sample as u64])
    }
}

/// Anything that turns demonstrations and a prompt into an image.
pub trait Generator {
    fn id(&self) -> String;
    fn max_demos(&self) -> usize;
    fn generate(&self, demos: &[Pair<f32>], prompt: &Caption, guidance: f64, seed: u64) -> Result<Tensor<f32>>;
}

/// A denoiser sampled with the DDPM sampler.
pub struct ModelGenerator<'a> {
    pub name: String,
    pub params: &'a ParameterSet<f32>,
    pub schedule: &'a NoiseSchedule<f32>,
}

impl Generator for ModelGenerator<'_> {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn max_demos(&self) -> usize {
        match self.params.flavor {
            Flavor::Expert => 0,
            Flavor::Apprentice => self.params.config.max_demos,
        }
    }

    fn generate(&self, demos: &[Pair<f32>], prompt: &Caption, guidance: f64, seed: u64) -> Result<Tensor<f32>> {
        let cond = ConditionBundle::with_demos(prompt.clone(), demos.to_vec());
        let mut session = SamplingSession::new(self.params, &cond)?;
        let shape = self.params.config.image_shape();
        Ok(ddpm_sample(&mut session, &shape, self.schedule, &SamplerConfig::new(guidance, seed))?.clamp(-1.0, 1.0))
    }
}

/// Returns a demonstration image verbatim; an upper bound on fidelity.
pub struct DemoOracle;

impl Generator for DemoOracle {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn max_demos(&self) -> usize {
        usize::MAX
    }

    fn generate(&self, demos: &[Pair<f32>], _prompt: &Caption, _guidance: f64, seed: u64) -> Result<Tensor<f32>> {
        if demos.is_empty() {
            return Err(Error::Invalid("the oracle needs at least one demonstration".into()));
        }
        Ok(demos[(seed % demos.len() as u64) as usize].image.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchItem {
    pub subject_id: SubjectId,
    pub template: usize,
    pub prompt: Caption,
    pub sample: usize,
    pub seed: u64,
    pub subject_fidelity: f64,
    pub clip_i: f64,
    pub clip_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedItem {
    pub subject_id: SubjectId,
    pub template: usize,
    pub sample: usize,
    pub error: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub subject_fidelity: f64,
    pub clip_i: f64,
    pub clip_t: f64,
    pub count: usize,
}

impl Aggregates {
    pub fn of<'a>(items: impl IntoIterator<Item = &'a BenchItem>) -> Aggregates {
        let mut a = Aggregates::default();
        for it in items {
            a.subject_fidelity += it.subject_fidelity;
            a.clip_i += it.clip_i;
            a.clip_t += it.clip_t;
            a.count += 1;
        }
        if a.count > 0 {
            let n = a.count as f64;
            a.subject_fidelity /= n;
            a.clip_i /= n;
            a.clip_t /= n;
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub model: String,
    pub demo_count: usize,
    pub seed: u64,
    pub items: Vec<BenchItem>,
    pub failed: Vec<FailedItem>,
    pub means: Aggregates,
    /// Generations in item order; kept for grids, not serialized.
    #[serde(skip)]
    pub images: Vec<Tensor<f32>>,
}

impl BenchResult {
    pub fn subject_means(&self, subject: SubjectId) -> Aggregates {
        Aggregates::of(self.items.iter().filter(|i| i.subject_id == subject))
    }
}

/// Scores one generation against the reference images and the prompt.
pub fn score_item(embedder: &Embedder, image: &Tensor<f32>, references: &[Pair<f32>], prompt: &Caption) -> Result<(f64, f64, f64)> {
    let sims: Vec<f64> = references
        .iter()
        .map(|r| embedder.image_image_score(image, &r.image).map(f64::from))
        .collect::<Result<_>>()?;
    let fidelity = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let clip_i = sims.iter().sum::<f64>() / sims.len() as f64;
    Ok((fidelity, clip_i, embedder.clip_score(image, prompt)? as f64))
}

/// Generates and scores every (subject, template, sample) item. Demos are
/// the first `demo_count` pairs of each held-out cluster.
pub fn evaluate(generator: &dyn Generator, bench: &BenchSpec, embedder: &Embedder, demo_count: usize) -> Result<BenchResult> {
    if demo_count > generator.max_demos() {
        return Err(Error::TooManyDemos { count: demo_count, max: generator.max_demos() });
    }
    let mut items = Vec::new();
    let mut images = Vec::new();
    let mut failed = Vec::new();
    for cluster in &bench.subjects {
        if demo_count > cluster.pairs.len() {
            return Err(Error::range("demo_count", format!("subject {} has only {} pairs", cluster.subject.id, cluster.pairs.len())));
        }
        let demos = &cluster.pairs[..demo_count];
        for (j, template) in bench.templates.iter().enumerate() {
            let prompt = template.render(cluster);
            for k in 0..bench.images_per_prompt {
                let seed = bench.item_seed(cluster.subject.id, j, k);
                let scored = generator
                    .generate(demos, &prompt, bench.guidance_weight, seed)
                    .and_then(|img| score_item(embedder, &img, &cluster.pairs, &prompt).map(|s| (img, s)));
                match scored {
                    Ok((img, (subject_fidelity, clip_i, clip_t))) => {
                        items.push(BenchItem {
                            subject_id: cluster.subject.id,
                            template: j,
                            prompt: prompt.clone(),
                            sample: k,
                            seed,
                            subject_fidelity,
                            clip_i,
                            clip_t,
                        });
                        images.push(img);
                    }
                    Err(e) => failed.push(FailedItem { subject_id: cluster.subject.id, template: j, sample: k, error: e.to_string() }),
                }
            }
        }
    }
    let means = Aggregates::of(&items);
    Ok(BenchResult { model: generator.id(), demo_count, seed: bench.seed, items, failed, means, images })
}

/// One [`evaluate`] per demo count, all with the same item seeds.
pub fn kshot_sweep(generator: &dyn Generator, bench: &BenchSpec, embedder: &Embedder, ks: &[usize]) -> Result<Vec<BenchResult>> {
    ks.iter().map(|&k| evaluate(generator, bench, embedder, k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub spec: LambdaSpec,
    #[serde(with = "crate::orchestrator::threshold")]
    pub lambda: f64,
    pub buffer_size: usize,
    pub result: BenchResult,
}

/// Runs the pipeline once per threshold on a shared expert cache, so every
/// row gates the same frozen candidate set, and evaluates each apprentice at
/// `demo_count`.
#[allow(clippy::too_many_arguments)]
pub fn threshold_sweep(
    inputs: PipelineInputs,
    lambdas: &[LambdaSpec],
    config: &PipelineConfig,
    root: &Path,
    seed: u64,
    bench: &BenchSpec,
    demo_count: usize,
) -> Result<Vec<ThresholdRow>> {
    if lambdas.len() < 2 {
        return Err(Error::range("threshold sweep", "needs at least two thresholds"));
    }
    let experts = root.join("expert_out");
    let mut rows = Vec::new();
    for (i, &spec) in lambdas.iter().enumerate() {
        let dirs = PipelineDirs { work: root.join(format!("lambda_{i:02}")), experts: experts.clone() };
        let cfg = PipelineConfig { lambda: spec, resume: false, ..config.clone() };
        let run = run_pipeline(inputs, &cfg, &dirs, seed)?;
        let generator = ModelGenerator { name: format!("apprentice-lambda{i:02}"), params: &run.apprentice, schedule: inputs.schedule };
        let result = evaluate(&generator, bench, inputs.embedder, demo_count)?;
        rows.push(ThresholdRow { spec, lambda: run.report.lambda, buffer_size: run.buffer.len(), result });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DreamConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for DreamConfig {
    fn default() -> Self {
        DreamConfig { steps: 500, lr: 1e-4, batch: 4 }
    }
}

/// Further fine-tunes an apprentice on one subject: every example conditions
/// on one cluster image and targets a different one, under the target's caption.
pub fn dream_finetune(
    apprentice: &ParameterSet<f32>,
    cluster: &Cluster,
    config: &DreamConfig,
    schedule: &NoiseSchedule<f32>,
    seed: u64,
) -> Result<(ParameterSet<f32>, Vec<f64>)> {
    apprentice.expect_flavor(Flavor::Apprentice)?;
    let n = cluster.pairs.len();
    if n < 2 {
        return Err(Error::range("dream fine-tuning", "the cluster needs at least two images"));
    }
    let mut params = apprentice.clone();
    let mut opt = AdamState::new(AdamConfig::default());
    let mut rng = stream(derive_seed(seed, &[0xd5]));
    let shape = params.config.image_shape();
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<TrainItem<f32>> = (0..config.batch)
            .map(|_| {
                let cond = rng.random_range(0..n);
                let target = (cond + rng.random_range(1..n)) % n;
                TrainItem {
                    x0: cluster.pairs[target].image.clone(),
                    t: rng.random_range(1..=schedule.steps()),
                    noise: gaussian_tensor(&shape, &mut rng),
                    cond: ConditionBundle::with_demos(cluster.pairs[target].caption.clone(), vec![cluster.pairs[cond].clone()]),
                }
            })
            .collect();
        let (loss, grads) = loss_and_gradients(&params, &batch, schedule)?;
        opt.update(&mut params.tensors, &grads, config.lr)?;
        trace.push(loss as f64);
    }
    Ok((params, trace))
}

const CSV_HEADER: &str = "model,demo_count,subject_id,template,prompt,sample,seed,subject_fidelity,clip_i,clip_t\n";

/// The metrics table: one row per item, then one aggregate row per result.
pub fn metrics_csv(results: &[BenchResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    for r in results {
        for it in &r.items {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                r.model, r.demo_count, it.subject_id, it.template, it.prompt, it.sample, it.seed, it.subject_fidelity, it.clip_i, it.clip_t
            );
        }
    }
    for r in results {
        let m = &r.means;
        let _ = writeln!(out, "{},{},all,,,,,{:.6},{:.6},{:.6}", r.model, r.demo_count, m.subject_fidelity, m.clip_i, m.clip_t);
    }
    out
}

/// Grid dimensions `(width, height)` in pixels.
pub fn grid_dims(references: usize, templates: usize, images_per_prompt: usize) -> (usize, usize) {
    (references.max(images_per_prompt) * GRID_TILE, (1 + templates) * GRID_TILE)
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn grid_png(tiles: &[Vec<Option<&Tensor<f32>>>], cols: usize) -> Result<Vec<u8>> {
    let (w, h) = (cols * GRID_TILE, tiles.len() * GRID_TILE);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (row, line) in tiles.iter().enumerate() {
        for (col, tile) in line.iter().enumerate() {
            let Some(t) = tile else { continue };
            let (th, tw, _) = t.image_dims()?;
            for y in 0..GRID_TILE {
                for x in 0..GRID_TILE {
                    let (sy, sx) = (y * th / GRID_TILE, x * tw / GRID_TILE);
                    let px = image::Rgb([to_byte(t.pixel(sy, sx, 0)), to_byte(t.pixel(sy, sx, 1)), to_byte(t.pixel(sy, sx, 2))]);
                    img.put_pixel((col * GRID_TILE + x) as u32, (row * GRID_TILE + y) as u32, px);
                }
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Invalid(format!("png encoding: {e}")))?;
    Ok(bytes)
}

/// One image as a PNG, upscaled to a single grid tile.
pub fn image_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    grid_png(&[vec![Some(image)]], 1)
}

/// Writes metrics and grids; returns the written paths.
pub fn emit_report(results: &[BenchResult], bench: &BenchSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::Invalid("no results to report".into()));
    }
    let mut written = Vec::new();
    let csv = dir.join("metrics.csv");
    write_atomic(&csv, metrics_csv(results).as_bytes())?;
    written.push(csv);
    let json = dir.join("metrics.json");
    write_json(&json, &results)?;
    written.push(json);
    let grids = dir.join("grids");
    fs::create_dir_all(&grids).map_err(|e| Error::io(&grids, e))?;
    for r in results {
        if r.images.len() != r.items.len() {
            continue;
        }
        for cluster in &bench.subjects {
            let cols = cluster.pairs.len().max(bench.images_per_prompt);
            let mut rows: Vec<Vec<Option<&Tensor<f32>>>> = vec![cluster.pairs.iter().map(|p| Some(&p.image)).collect()];
            for j in 0..bench.templates.len() {
                let mut row = vec![None; bench.images_per_prompt];
                for (it, img) in r.items.iter().zip(&r.images) {
                    if it.subject_id == cluster.subject.id && it.template == j {
                        row[it.sample] = Some(img);
                    }
                }
                rows.push(row);
            }
            let path = grids.join(format!("{}-k{}-s{:06}.png", r.model, r.demo_count, cluster.subject.id));
            write_atomic(&path, &grid_png(&rows, cols)?)?;
            written.push(path);
        }
    }
    Ok(written)
}
