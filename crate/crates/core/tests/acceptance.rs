//! Acceptance suite: one PASS/FAIL line per criterion on the desk-scale run.
//!
//! `ACCEPTANCE_DIR` keeps artifacts between invocations (dataset, base,
//! embedder and finished pipeline runs are reused; reused stages report no
//! runtime). `ACCEPTANCE_ONLY=3,6` restricts the run to the listed criteria.

use std::cell::OnceCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use apprentice::config::{RunConfig, Stage};
use apprentice::diffusion::{chain_step, diffusion_loss, forward_marginal, make_schedule, LossConfig, NoiseSchedule, SamplerConfig};
use apprentice::eval::{default_templates, dream_finetune, evaluate, kshot_sweep, threshold_sweep, BenchResult, BenchSpec, ModelGenerator};
use apprentice::experts::{list_expert_outputs, read_expert_output, run_expert_job, sample_pseudo_targets, ExpertSample};
use apprentice::model::{gradient_check, init_base, upgrade_to_apprentice, ArchitectureConfig, ConditionBundle, ParameterSet, TrainItem};
use apprentice::orchestrator::{
    admits, inference, run_pipeline, run_pipeline_with_hooks, score_candidates, DistillBuffer, LambdaSpec, PipelineConfig,
    PipelineDirs, PipelineHooks, PipelineInputs, PipelineRun, SubjectStatus,
};
use apprentice::pretrain::pretrain_base;
use apprentice::rng::{derive_seed, gaussian_tensor, stream};
use apprentice::scorer::{discrimination_rate, retrieval_accuracy, train_embedder, CorpusItem, Embedder};
use apprentice::world::{generate_dataset, load_dataset, save_dataset, Caption, Cluster, Pair, SeedDataset};
use apprentice::{Error, Tensor};

type Outcome = Result<Verdict, Error>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Outcome {
    Ok(Verdict { pass, detail })
}

fn within(elapsed: Option<Duration>, budget_s: u64) -> (bool, String) {
    match elapsed {
        Some(d) => (d.as_secs_f64() < budget_s as f64, format!("{:.1}s of {budget_s}s", d.as_secs_f64())),
        None => (true, "reused".into()),
    }
}

/// Desk-scale artifacts, built on first use.
struct Desk {
    cfg: RunConfig,
    dir: PathBuf,
    reuse: bool,
    ds: SeedDataset,
    schedule: NoiseSchedule<f32>,
    base: OnceCell<ParameterSet<f32>>,
    embedder: OnceCell<(Embedder, Option<Duration>)>,
    pipeline: OnceCell<(PipelineRun, Option<Duration>)>,
    bench: OnceCell<BenchSpec>,
    kshot: OnceCell<Vec<BenchResult>>,
}

impl Desk {
    fn new(dir: PathBuf, reuse: bool) -> apprentice::Result<Self> {
        let cfg = RunConfig::default();
        let data = dir.join("data");
        let ds = if reuse && data.join("manifest.json").exists() {
            load_dataset(&data)?
        } else {
            let ds = generate_dataset(cfg.stage_seed(Stage::Data), cfg.dataset.n_train, cfg.dataset.n_heldout, &cfg.world)?;
            save_dataset(&ds, &data)?;
            ds
        };
        Ok(Desk {
            schedule: cfg.schedule.build()?,
            cfg,
            dir,
            reuse,
            ds,
            base: OnceCell::new(),
            embedder: OnceCell::new(),
            pipeline: OnceCell::new(),
            bench: OnceCell::new(),
            kshot: OnceCell::new(),
        })
    }

    fn base(&self) -> apprentice::Result<&ParameterSet<f32>> {
        if self.base.get().is_none() {
            let path = self.dir.join("base.ntc");
            let base = if self.reuse && path.exists() {
                ParameterSet::load(&path)?
            } else {
                let pairs: Vec<Pair<f32>> = self.ds.train.iter().flat_map(|c| c.pairs.iter().cloned()).collect();
                let (base, _) = pretrain_base(&pairs, &self.cfg.architecture, &self.cfg.pretrain, &self.schedule, self.cfg.stage_seed(Stage::Pretrain))?;
                base.save(&path)?;
                base
            };
            let _ = self.base.set(base);
        }
        Ok(self.base.get().expect("set above"))
    }

    fn embedder_timed(&self) -> apprentice::Result<&(Embedder, Option<Duration>)> {
        if self.embedder.get().is_none() {
            let path = self.dir.join("embedder.ntc");
            let entry = if self.reuse && path.exists() {
                (Embedder::load(&path)?, None)
            } else {
                let start = Instant::now();
                let (emb, _) = train_embedder::<f32>(&CorpusItem::from_clusters(&self.ds.train), &self.cfg.embedder, self.cfg.stage_seed(Stage::Embedder))?;
                let elapsed = start.elapsed();
                emb.save(&path)?;
                (emb, Some(elapsed))
            };
            let _ = self.embedder.set(entry);
        }
        Ok(self.embedder.get().expect("set above"))
    }

    fn embedder(&self) -> apprentice::Result<&Embedder> {
        Ok(&self.embedder_timed()?.0)
    }

    fn inputs<'a>(&'a self, clusters: &'a [Cluster]) -> apprentice::Result<PipelineInputs<'a>> {
        Ok(PipelineInputs { clusters, base: self.base()?, embedder: self.embedder()?, schedule: &self.schedule })
    }

    fn sweep_root(&self) -> PathBuf {
        self.dir.join("sweep")
    }

    /// The full pipeline at desk defaults; its experts are shared with the
    /// threshold sweep.
    fn pipeline(&self) -> apprentice::Result<&(PipelineRun, Option<Duration>)> {
        if self.pipeline.get().is_none() {
            let dirs = PipelineDirs { work: self.dir.join("pipeline"), experts: self.sweep_root().join("expert_out") };
            let cfg = PipelineConfig { resume: self.reuse, ..self.cfg.pipeline.clone() };
            let inputs = self.inputs(&self.ds.train)?;
            let start = Instant::now();
            let run = run_pipeline(inputs, &cfg, &dirs, self.cfg.stage_seed(Stage::Pipeline))?;
            let elapsed = start.elapsed();
            let fresh = run.report.timings.experts_s > 0.0 && run.report.timings.training_s > 0.0 && run.report.processed.len() == run.state.order.len();
            let _ = self.pipeline.set((run, fresh.then_some(elapsed)));
        }
        Ok(self.pipeline.get().expect("set above"))
    }

    fn bench(&self) -> apprentice::Result<&BenchSpec> {
        if self.bench.get().is_none() {
            let ids: Vec<u32> = self.ds.train.iter().map(|c| c.subject.id).collect();
            let _ = self.bench.set(BenchSpec::new(&self.ds.heldout, &ids, &self.cfg.bench, self.cfg.stage_seed(Stage::Bench))?);
        }
        Ok(self.bench.get().expect("set above"))
    }

    fn apprentice(&self) -> apprentice::Result<ModelGenerator<'_>> {
        Ok(ModelGenerator { name: "apprentice".into(), params: &self.pipeline()?.0.apprentice, schedule: &self.schedule })
    }

    /// Apprentice results at k = 0..=4 on the shared bench.
    fn kshot(&self) -> apprentice::Result<&[BenchResult]> {
        if self.kshot.get().is_none() {
            let rows = kshot_sweep(&self.apprentice()?, self.bench()?, self.embedder()?, &[0, 1, 2, 3, 4])?;
            let _ = self.kshot.set(rows);
        }
        Ok(self.kshot.get().expect("set above"))
    }
}

fn diffusion_math(_: &Desk) -> Outcome {
    let start = Instant::now();
    let mut rng = stream(0xd1f);
    let mut monotone = 0;
    for _ in 0..100 {
        let t_max = rng.random_range(1..=400);
        let lo = rng.random_range(1e-6..0.3);
        let hi = lo + rng.random_range(0.0..(0.999 - lo));
        let s: NoiseSchedule<f64> = make_schedule(t_max, lo, hi)?;
        if (1..=t_max).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0) {
            monotone += 1;
        }
    }

    let draws = 10_000;
    let schedules: [(usize, f64, f64); 3] = [(100, 1e-3, 0.2), (10, 0.01, 0.3), (50, 1e-3, 0.05)];
    let mut worst: f64 = 0.0;
    for (si, &(t_max, lo, hi)) in schedules.iter().enumerate() {
        let s: NoiseSchedule<f64> = make_schedule(t_max, lo, hi)?;
        for img in 0..3 {
            let x0 = gaussian_tensor::<f64>(&[2, 2, 3], &mut stream(derive_seed(7, &[si as u64, img]))).clamp(-1.0, 1.0);
            for t in [t_max / 2, t_max] {
                let n = x0.len();
                let (mut chain_sum, mut chain_sq) = (vec![0.0; n], vec![0.0; n]);
                let (mut marg_sum, mut marg_sq) = (vec![0.0; n], vec![0.0; n]);
                let mut r = stream(derive_seed(8, &[si as u64, img, t as u64]));
                for _ in 0..draws {
                    let mut x = x0.clone();
                    for step in 1..=t {
                        x = chain_step(&x, step, &s, &gaussian_tensor(x0.shape(), &mut r))?;
                    }
                    let m = forward_marginal(&x0, t, &s, &gaussian_tensor(x0.shape(), &mut r))?;
                    for i in 0..n {
                        chain_sum[i] += x.data()[i];
                        chain_sq[i] += x.data()[i] * x.data()[i];
                        marg_sum[i] += m.data()[i];
                        marg_sq[i] += m.data()[i] * m.data()[i];
                    }
                }
                let sd = s.one_minus_alpha_bar(t).sqrt();
                let scale = s.alpha_bar(t).sqrt();
                for i in 0..n {
                    let mean = scale * x0.data()[i];
                    let d = draws as f64;
                    for (sum, sq) in [(chain_sum[i], chain_sq[i]), (marg_sum[i], marg_sq[i])] {
                        let m = sum / d;
                        let v = (sq / d - m * m).sqrt();
                        worst = worst.max((m - mean).abs() / mean.abs().max(sd)).max((v / sd - 1.0).abs());
                    }
                }
            }
        }
    }

    let mut r = stream(0x1055);
    let mut loss_err: f64 = 0.0;
    for _ in 0..20 {
        let shape = [4, 4, 3];
        let p = gaussian_tensor::<f64>(&shape, &mut r);
        let x = gaussian_tensor::<f64>(&shape, &mut r);
        let got = diffusion_loss(&p, &x, LossConfig::Unit)?;
        let mut brute = 0.0;
        for i in 0..p.len() {
            brute += (p.data()[i] - x.data()[i]).powi(2);
        }
        loss_err = loss_err.max((got - brute / p.len() as f64).abs());
    }
    let (fast, time) = within(Some(start.elapsed()), 60);
    verdict(
        monotone == 100 && worst <= 0.05 && loss_err <= 1e-12 && fast,
        format!("monotone {monotone}/100, worst moment deviation {worst:.4}, loss error {loss_err:.1e}, {time}"),
    )
}

fn grad_batch(cfg: &ArchitectureConfig, demos: usize) -> Vec<TrainItem<f64>> {
    let img = |seed| gaussian_tensor::<f64>(&cfg.image_shape(), &mut stream(seed)).clamp(-1.0, 1.0);
    let captions = ["a red circle on beach", "a red circle in forest wearing hat", "a shiny red circle at night", "a red circle on snow as neon"];
    let cap = |s: &str| Caption::parse(s).expect("valid caption");
    let d: Vec<Pair<f32>> = (0..demos).map(|i| Pair { image: img(100 + i as u64).cast(), caption: cap(captions[i % 4]) }).collect();
    vec![
        TrainItem { x0: img(1), t: 3, noise: img(2), cond: ConditionBundle::with_demos(cap("a red circle at sunset"), d.clone()) },
        TrainItem { x0: img(3), t: 8, noise: img(4), cond: ConditionBundle::with_demos(cap("a dark red circle in city"), d.clone()) },
        TrainItem { x0: img(5), t: 1, noise: img(6), cond: ConditionBundle::with_demos(cap("a red circle in room"), d).dropped(true) },
    ]
}

fn gradient_correctness(_: &Desk) -> Outcome {
    let start = Instant::now();
    let cfg = ArchitectureConfig::tiny();
    let schedule: NoiseSchedule<f64> = make_schedule(10, 0.01, 0.3)?;
    let base = init_base::<f64>(&cfg, 11)?;
    let mut app = upgrade_to_apprentice(&base, 12)?;
    // zero-initialized output projections would hide the demonstration branch
    let mut r = stream(13);
    for (name, t) in app.tensors.iter_mut() {
        if name.ends_with(".o") || name.ends_with(".o_b") {
            *t = gaussian_tensor::<f64>(t.shape(), &mut r).scale(0.5);
        }
    }
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (params, demos) in [(&base, 0), (&app, 0), (&app, 3)] {
        let report = gradient_check(params, &grad_batch(&cfg, demos), &schedule, 1e-4, 1e-7)?;
        worst = worst.max(report.max_rel_error);
        entries += report.entries;
    }
    let (fast, time) = within(Some(start.elapsed()), 300);
    verdict(worst < 1e-4 && fast, format!("{entries} entries, max relative error {worst:.2e}, {time}"))
}

fn embedder_quality(desk: &Desk) -> Outcome {
    let (emb, elapsed) = desk.embedder_timed()?;
    let heldout: Vec<Pair<f32>> = desk.ds.heldout.iter().flat_map(|c| c.pairs.iter().cloned()).collect();
    let seed = desk.cfg.stage_seed(Stage::Embedder);
    let retrieval = retrieval_accuracy(emb, &heldout, 32, seed)?;
    let discrimination = discrimination_rate(emb, &heldout, 1000, seed)?;
    let (fast, time) = within(*elapsed, 600);
    verdict(
        retrieval > 0.9 && discrimination >= 0.9 && fast,
        format!("retrieval top-1 {retrieval:.3} (32 candidates), discrimination {discrimination:.3}, training {time}"),
    )
}

fn mean_similarity(emb: &Embedder, samples: &[ExpertSample], cluster: &Cluster) -> apprentice::Result<f64> {
    let mut total = 0.0;
    for s in samples {
        for p in &cluster.pairs {
            total += emb.image_image_score(&s.image, &p.image)? as f64;
        }
    }
    Ok(total / (samples.len() * cluster.pairs.len()) as f64)
}

fn expert_specialization(desk: &Desk) -> Outcome {
    let (base, emb) = (desk.base()?, desk.embedder()?);
    let start = Instant::now();
    let mut picks: Vec<&Cluster> = desk.ds.train.iter().collect();
    picks.shuffle(&mut stream(0xe4));
    let cfg = &desk.cfg.pipeline.expert;
    let mut wins = 0;
    let mut margins = Vec::new();
    for (i, c) in picks.iter().take(10).enumerate() {
        let seed = derive_seed(0xe4, &[i as u64]);
        let out = run_expert_job(base, c, cfg, &desk.schedule, seed)?;
        let mut base_samples = Vec::new();
        for (j, prompt) in c.unseen_prompts.iter().enumerate() {
            base_samples.extend(sample_pseudo_targets(base, prompt, cfg.samples_per_prompt, cfg.guidance_weight, &desk.schedule, derive_seed(seed, &[2, j as u64]))?);
        }
        let (e, b) = (mean_similarity(emb, &out.samples, c)?, mean_similarity(emb, &base_samples, c)?);
        wins += usize::from(e > b);
        margins.push(format!("{:+.3}", e - b));
    }
    let (fast, time) = within(Some(start.elapsed()), 900);
    verdict(wins >= 8 && fast, format!("experts win on {wins}/10 subjects, margins [{}], {time}", margins.join(" ")))
}

type BufferKey = (u32, usize, Vec<u32>);

fn buffer_keys(b: &DistillBuffer) -> Vec<BufferKey> {
    b.records().iter().map(|r| (r.subject_id, r.sample, r.image.data().iter().map(|v| v.to_bits()).collect())).collect()
}

fn fresh_dirs(path: PathBuf) -> apprentice::Result<PipelineDirs> {
    if path.exists() {
        std::fs::remove_dir_all(&path).map_err(|e| Error::Invalid(format!("cannot clear {}: {e}", path.display())))?;
    }
    Ok(PipelineDirs::new(&path))
}

fn algorithm_integrity(desk: &Desk) -> Outcome {
    let clusters = &desk.ds.train[..32];
    let inputs = desk.inputs(clusters)?;
    let start = Instant::now();
    let seed = desk.cfg.stage_seed(Stage::Pipeline);
    let cfg = PipelineConfig { apprentice_steps: 300, calibration_subjects: 16, max_workers: 1, resume: false, ..desk.cfg.pipeline.clone() };
    let root = desk.dir.join("integrity");
    let one_dirs = fresh_dirs(root.join("one"))?;
    let one = run_pipeline(inputs, &cfg, &one_dirs, seed)?;
    let four = run_pipeline(inputs, &PipelineConfig { max_workers: 4, ..cfg.clone() }, &fresh_dirs(root.join("four"))?, seed)?;
    let kill_dirs = fresh_dirs(root.join("kill"))?;
    let hooks = PipelineHooks { halt_after_batches: Some(2), ..Default::default() };
    let halted = matches!(run_pipeline_with_hooks(inputs, &cfg, &kill_dirs, seed, &hooks), Err(Error::Halted { batches: 2 }));
    let resumed = run_pipeline(inputs, &PipelineConfig { resume: true, ..cfg.clone() }, &kill_dirs, seed)?;

    let mut problems = Vec::new();
    for (name, run) in [("workers=1", &one), ("workers=4", &four), ("resumed", &resumed)] {
        if let Some(r) = run.buffer.records().iter().find(|r| !admits(r.delta.value, run.report.lambda)) {
            problems.push(format!("{name}: record {}/{} has delta {} <= lambda {}", r.subject_id, r.sample, r.delta.value, run.report.lambda));
        }
        let ids: BTreeSet<u32> = clusters.iter().map(|c| c.subject.id).collect();
        let terminal: Vec<u32> = run.report.processed.iter().chain(run.report.failed.keys()).chain(&run.report.excluded).copied().collect();
        let unique: BTreeSet<u32> = terminal.iter().copied().collect();
        if terminal.len() != unique.len() || unique != ids {
            problems.push(format!("{name}: {} terminal outcomes for {} subjects", terminal.len(), ids.len()));
        }
        if run.state.status.values().any(|s| !matches!(s, SubjectStatus::Done | SubjectStatus::Excluded | SubjectStatus::Failed)) {
            problems.push(format!("{name}: a subject is not in a terminal state"));
        }
        let keys: BTreeSet<(u32, usize)> = run.buffer.records().iter().map(|r| (r.subject_id, r.sample)).collect();
        if keys.len() != run.buffer.len() {
            problems.push(format!("{name}: duplicate buffer records"));
        }
    }
    if buffer_keys(&one.buffer) != buffer_keys(&four.buffer) || one.apprentice.hash() != four.apprentice.hash() {
        problems.push("outputs depend on the worker count".into());
    }
    if !halted || buffer_keys(&one.buffer) != buffer_keys(&resumed.buffer) || one.apprentice.hash() != resumed.apprentice.hash() {
        problems.push("kill and resume diverges from the uninterrupted run".into());
    }

    let by_id: BTreeMap<u32, &Cluster> = clusters.iter().map(|c| (c.subject.id, c)).collect();
    let outputs = list_expert_outputs(&one_dirs.experts)?.iter().map(|e| read_expert_output(&e.dir)).collect::<apprentice::Result<Vec<_>>>()?;
    let scored = score_candidates(&outputs, &by_id, desk.embedder()?);
    let mut deltas: Vec<f64> = scored.iter().map(|c| c.delta.value).collect();
    deltas.sort_by(f64::total_cmp);
    let mut lambdas = vec![f64::NEG_INFINITY];
    lambdas.extend(deltas.iter().step_by(deltas.len().div_ceil(40).max(1)).copied());
    lambdas.push(f64::INFINITY);
    let admitted = |l: f64| scored.iter().filter(|c| admits(c.delta.value, l)).map(|c| (c.subject_id, c.sample)).collect::<BTreeSet<_>>();
    let sets: Vec<BTreeSet<(u32, usize)>> = lambdas.iter().map(|&l| admitted(l)).collect();
    if sets.windows(2).any(|w| !w[1].is_subset(&w[0])) {
        problems.push("admit sets are not nested in lambda".into());
    }
    let buffered: BTreeSet<(u32, usize)> = one.buffer.records().iter().map(|r| (r.subject_id, r.sample)).collect();
    if buffered != admitted(one.report.lambda) {
        problems.push("buffer differs from the candidates above lambda".into());
    }
    let (fast, time) = within(Some(start.elapsed()), 1200);
    let detail = format!(
        "{} subjects, {} candidates, {} admitted at lambda {:.4}, {} nested thresholds, {time}{}",
        clusters.len(),
        scored.len(),
        one.buffer.len(),
        one.report.lambda,
        lambdas.len(),
        if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
    );
    verdict(problems.is_empty() && fast, detail)
}

fn apprenticeship_effect(desk: &Desk) -> Outcome {
    let (run, elapsed) = desk.pipeline()?;
    let (bench, emb) = (desk.bench()?, desk.embedder()?);
    let base = desk.base()?;
    let k = desk.cfg.bench.demo_count;
    let b = evaluate(&ModelGenerator { name: "base".into(), params: base, schedule: &desk.schedule }, bench, emb, 0)?;
    let untrained = upgrade_to_apprentice(base, 0)?;
    let u = evaluate(&ModelGenerator { name: "untrained".into(), params: &untrained, schedule: &desk.schedule }, bench, emb, k)?;
    let a = &desk.kshot()?[k];
    let (fast, time) = within(*elapsed, 2700);
    let drop = 1.0 - a.means.clip_t / b.means.clip_t;
    verdict(
        a.means.subject_fidelity > b.means.subject_fidelity && a.means.subject_fidelity > u.means.subject_fidelity && drop <= 0.10 && fast,
        format!(
            "fidelity apprentice {:.4} vs base {:.4} vs untrained {:.4}; clip_t {:.4} vs {:.4} ({:+.1}%); buffer {} of {} at lambda {:.4}; pipeline {time}",
            a.means.subject_fidelity,
            b.means.subject_fidelity,
            u.means.subject_fidelity,
            a.means.clip_t,
            b.means.clip_t,
            -100.0 * drop,
            run.report.buffer_size,
            run.report.candidates,
            run.report.lambda,
        ),
    )
}

fn kshot_trend(desk: &Desk) -> Outcome {
    let f: Vec<f64> = desk.kshot()?.iter().map(|r| r.means.subject_fidelity).collect();
    let drops: Vec<f64> = f.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    let pass = drops.len() <= 1 && drops.iter().all(|&d| d <= 0.01) && f[4] - f[0] > 0.0;
    verdict(pass, format!("fidelity k=0..4 [{}]", f.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")))
}

fn threshold_direction(desk: &Desk) -> Outcome {
    desk.pipeline()?;
    let calibrated = desk.cfg.pipeline.lambda;
    let p = match calibrated {
        LambdaSpec::Percentile(p) => p,
        other => return Err(Error::Invalid(format!("expected a percentile threshold, found {other:?}"))),
    };
    let lambdas = [LambdaSpec::None, LambdaSpec::Percentile(p / 2.0), calibrated, LambdaSpec::Percentile((p + 100.0) / 2.0)];
    let inputs = desk.inputs(&desk.ds.train)?;
    let rows = threshold_sweep(inputs, &lambdas, &desk.cfg.pipeline, &desk.sweep_root(), desk.cfg.stage_seed(Stage::Pipeline), desk.bench()?, desk.cfg.bench.demo_count)?;
    let sizes: Vec<usize> = rows.iter().map(|r| r.buffer_size).collect();
    let fid: Vec<f64> = rows.iter().map(|r| r.result.means.subject_fidelity).collect();
    let clip: Vec<f64> = rows.iter().map(|r| r.result.means.clip_t).collect();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    verdict(
        sizes.windows(2).all(|w| w[1] < w[0]) && fid[2] >= fid[0],
        format!(
            "lambda [{}]: |G| {sizes:?}, fidelity [{}], clip_t [{}]",
            rows.iter().map(|r| format!("{:.4}", r.lambda)).collect::<Vec<_>>().join(" "),
            fmt(&fid),
            fmt(&clip)
        ),
    )
}

fn dream_direction(desk: &Desk) -> Outcome {
    let app = &desk.pipeline()?.0.apprentice;
    let (bench, emb) = (desk.bench()?, desk.embedder()?);
    let k = desk.cfg.bench.demo_count;
    let templates = default_templates(20);
    let mut better = 0;
    let mut worse = 0;
    let mut deltas = Vec::new();
    for (i, c) in bench.subjects.iter().take(10).enumerate() {
        let single = BenchSpec { subjects: vec![c.clone()], templates: templates.clone(), ..bench.clone() };
        let before = evaluate(&ModelGenerator { name: "apprentice".into(), params: app, schedule: &desk.schedule }, &single, emb, k)?;
        let (tuned, _) = dream_finetune(app, c, &desk.cfg.dream, &desk.schedule, derive_seed(desk.cfg.stage_seed(Stage::Dream), &[i as u64]))?;
        let after = evaluate(&ModelGenerator { name: "dream".into(), params: &tuned, schedule: &desk.schedule }, &single, emb, k)?;
        let d = after.means.subject_fidelity - before.means.subject_fidelity;
        better += usize::from(d > 0.0);
        worse += usize::from(d < 0.0);
        deltas.push(format!("{d:+.3}"));
    }
    verdict(worse == 0 && better >= 7, format!("{better}/10 improved, {worse} decreased, fidelity changes [{}]", deltas.join(" ")))
}

fn inference_contract(desk: &Desk) -> Outcome {
    let app = &desk.pipeline()?.0.apprentice;
    let c = &desk.ds.heldout[0];
    let before = app.hash();
    let sampler = SamplerConfig::new(desk.cfg.inference.guidance_weight, desk.cfg.stage_seed(Stage::Sample));
    let start = Instant::now();
    let image: Tensor<f32> = inference(app, &c.pairs[..4], c.unseen_prompt(), &desk.schedule, &sampler)?;
    let elapsed = start.elapsed();
    let after = app.hash();
    let finite = image.data().iter().all(|v| v.is_finite());
    verdict(
        before == after && finite && elapsed.as_secs_f64() < 5.0,
        format!("hash unchanged: {}, one generation with 4 demos in {:.3}s", before == after, elapsed.as_secs_f64()),
    )
}

type Criterion = fn(&Desk) -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("diffusion math", diffusion_math),
        ("gradient correctness", gradient_correctness),
        ("embedder quality gate", embedder_quality),
        ("expert specialization", expert_specialization),
        ("distillation loop integrity", algorithm_integrity),
        ("apprenticeship effect", apprenticeship_effect),
        ("k-shot trend", kshot_trend),
        ("threshold sweep direction", threshold_direction),
        ("per-subject fine-tuning direction", dream_direction),
        ("inference contract", inference_contract),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let (_tmp, dir, reuse) = match std::env::var("ACCEPTANCE_DIR") {
        Ok(d) => (None, PathBuf::from(d), true),
        Err(_) => {
            let tmp = tempfile::tempdir().expect("temporary directory");
            let dir = tmp.path().to_path_buf();
            (Some(tmp), dir, false)
        }
    };
    std::fs::create_dir_all(&dir).expect("acceptance directory");
    let desk = Desk::new(dir, reuse).expect("desk dataset");
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run(&desk) {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} {n:>2} {name}: {detail} [{:.0}s]", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {failed} failing criteria (artifacts in {})", desk.dir.display());
    if failed > 0 {
        std::process::exit(1);
    }
}
