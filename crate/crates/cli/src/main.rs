//! Command-line driver for every pipeline stage.
//!
//! Exit codes: 0 success, 2 configuration or input errors, 3 failed
//! validation, 4 runtime aborts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use apprentice::config::{RunConfig, Stage};
use apprentice::diffusion::{NoiseSchedule, SamplerConfig};
use apprentice::eval::{
    dream_finetune, emit_report, evaluate, image_png, kshot_sweep, threshold_sweep, BenchResult, BenchSpec,
    ModelGenerator,
};
use apprentice::formats::{write_atomic, write_json, write_tsr};
use apprentice::model::{upgrade_to_apprentice, ParameterSet};
use apprentice::orchestrator::{inference, run_pipeline, LambdaSpec, PipelineDirs, PipelineInputs};
use apprentice::pretrain::pretrain_base;
use apprentice::scorer::{discrimination_rate, retrieval_accuracy, train_embedder, CorpusItem, Embedder};
use apprentice::world::{generate_dataset, load_dataset, load_pairs, save_dataset, validate_dataset, Caption, Pair, SeedDataset};
use apprentice::Error;

#[derive(Parser)]
#[command(name = "apprentice", version, about = "Expert-to-apprentice distillation on a synthetic subject world")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; relative artifact paths resolve against it.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Continue an interrupted pipeline run.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and held-out subject clusters.
    GenData,
    /// Train the text-conditional base denoiser on all training pairs.
    PretrainBase,
    /// Train the image-text alignment embedder.
    TrainEmbedder,
    /// Run the expert crowd and train the apprentice.
    RunPipeline,
    /// Benchmark base and apprentice on held-out subjects.
    Eval {
        /// Additional demo counts to sweep, e.g. `0,1,2,3,4`.
        #[arg(long, value_delimiter = ',')]
        kshot: Vec<usize>,
        /// Thresholds to sweep: `none`, `p<percentile>` or a literal value.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<String>,
        /// Number of bench subjects to further fine-tune individually.
        #[arg(long, default_value_t = 0)]
        dream: usize,
    },
    /// Generate one image from demonstrations and a prompt.
    Sample {
        /// Directory of `*.tsr` demo images plus `captions.txt`.
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Output file; `.png` writes a PNG, anything else a TSR tensor.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Apprentice checkpoint; defaults to the pipeline's output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check a dataset directory and report the first failing invariant.
    Validate {
        /// Also re-render every cluster and compare.
        #[arg(long)]
        deep: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invalid(_) | Error::Range { .. } | Error::Grammar { .. } | Error::TooManyDemos { .. } | Error::Capacity { .. } => 2,
        Error::Validation { .. } | Error::Format { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let cli = Cli::parse();
    let config = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(cli: &Cli) -> apprentice::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.pipeline.resume |= cli.resume;
    cfg.paths = cfg.paths.resolve(&cli.out);
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> apprentice::Result<()> {
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::Invalid(format!("cannot create {}: {e}", cli.out.display())))?;
    cfg.echo(&cli.out)?;
    match &cli.command {
        Command::GenData => gen_data(cfg),
        Command::PretrainBase => pretrain(cfg),
        Command::TrainEmbedder => embedder(cfg),
        Command::RunPipeline => pipeline(cfg),
        Command::Eval { kshot, thresholds, dream } => eval(cfg, kshot, thresholds, *dream),
        Command::Sample { demos, prompt, output, checkpoint } => {
            let output = output.clone().unwrap_or_else(|| cli.out.join("sample.png"));
            sample(cfg, demos, prompt, &output, checkpoint.as_deref())
        }
        Command::Validate { deep } => {
            let summary = validate_dataset(&cfg.paths.data, *deep)?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(())
        }
    }
}

fn schedule(cfg: &RunConfig) -> apprentice::Result<NoiseSchedule<f32>> {
    cfg.schedule.build()
}

fn gen_data(cfg: &RunConfig) -> apprentice::Result<()> {
    let ds = generate_dataset(cfg.stage_seed(Stage::Data), cfg.dataset.n_train, cfg.dataset.n_heldout, &cfg.world)?;
    save_dataset(&ds, &cfg.paths.data)?;
    cfg.echo(&cfg.paths.data)?;
    println!("{} train / {} held-out subjects in {}", ds.train.len(), ds.heldout.len(), cfg.paths.data.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> apprentice::Result<()> {
    let ds = load_dataset(&cfg.paths.data)?;
    let pairs: Vec<Pair<f32>> = ds.train.iter().flat_map(|c| c.pairs.iter().cloned()).collect();
    let (base, trace) = pretrain_base(&pairs, &cfg.architecture, &cfg.pretrain, &schedule(cfg)?, cfg.stage_seed(Stage::Pretrain))?;
    base.save(&cfg.paths.base)?;
    write_json(&cfg.paths.base.with_extension("loss.json"), &trace)?;
    println!("base {} ({} parameters), final loss {:.5}", cfg.paths.base.display(), base.parameter_count(), trace.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn embedder(cfg: &RunConfig) -> apprentice::Result<()> {
    let ds = load_dataset(&cfg.paths.data)?;
    let seed = cfg.stage_seed(Stage::Embedder);
    let (emb, report) = train_embedder::<f32>(&CorpusItem::from_clusters(&ds.train), &cfg.embedder, seed)?;
    emb.save(&cfg.paths.embedder)?;
    let heldout: Vec<Pair<f32>> = ds.heldout.iter().flat_map(|c| c.pairs.iter().cloned()).collect();
    let mut captions: Vec<&Caption> = heldout.iter().map(|p| &p.caption).collect();
    captions.sort();
    captions.dedup();
    // small held-out splits rank against every distinct caption they have
    let retrieval = retrieval_accuracy(&emb, &heldout, captions.len().min(32), seed)?;
    let discrimination = discrimination_rate(&emb, &heldout, 1000, seed)?;
    let doc = serde_json::json!({ "steps": report.steps, "loss_trace": report.loss_trace, "retrieval_top1": retrieval, "discrimination": discrimination });
    write_json(&cfg.paths.embedder.with_extension("report.json"), &doc)?;
    println!("embedder {}: retrieval {retrieval:.3}, discrimination {discrimination:.3}", cfg.paths.embedder.display());
    Ok(())
}

struct Loaded {
    ds: SeedDataset,
    base: ParameterSet<f32>,
    embedder: Embedder,
    schedule: NoiseSchedule<f32>,
}

fn load_all(cfg: &RunConfig) -> apprentice::Result<Loaded> {
    Ok(Loaded {
        ds: load_dataset(&cfg.paths.data)?,
        base: ParameterSet::load(&cfg.paths.base)?,
        embedder: Embedder::load(&cfg.paths.embedder)?,
        schedule: schedule(cfg)?,
    })
}

fn pipeline(cfg: &RunConfig) -> apprentice::Result<()> {
    let l = load_all(cfg)?;
    let inputs = PipelineInputs { clusters: &l.ds.train, base: &l.base, embedder: &l.embedder, schedule: &l.schedule };
    let run = run_pipeline(inputs, &cfg.pipeline, &PipelineDirs::new(&cfg.paths.pipeline), cfg.stage_seed(Stage::Pipeline))?;
    cfg.echo(&cfg.paths.pipeline)?;
    println!("{}", serde_json::to_string_pretty(&run.report)?);
    Ok(())
}

fn parse_threshold(s: &str) -> apprentice::Result<LambdaSpec> {
    let bad = || Error::Invalid(format!("bad threshold {s:?}: use none, p<percentile> or a number"));
    match s {
        "none" => Ok(LambdaSpec::None),
        _ if s.starts_with('p') => s[1..].parse().map(LambdaSpec::Percentile).map_err(|_| bad()),
        _ => s.parse().map(LambdaSpec::Literal).map_err(|_| bad()),
    }
}

fn eval(cfg: &RunConfig, kshot: &[usize], thresholds: &[String], dream: usize) -> apprentice::Result<()> {
    let lambdas = thresholds.iter().map(|s| parse_threshold(s)).collect::<apprentice::Result<Vec<_>>>()?;
    let l = load_all(cfg)?;
    let apprentice = ParameterSet::load(&PipelineDirs::new(&cfg.paths.pipeline).apprentice())?;
    let train_ids: Vec<u32> = l.ds.train.iter().map(|c| c.subject.id).collect();
    let bench = BenchSpec::new(&l.ds.heldout, &train_ids, &cfg.bench, cfg.stage_seed(Stage::Bench))?;
    let k = cfg.bench.demo_count;
    let untrained = upgrade_to_apprentice(&l.base, 0)?;
    let base_gen = ModelGenerator { name: "base".into(), params: &l.base, schedule: &l.schedule };
    let untrained_gen = ModelGenerator { name: "untrained".into(), params: &untrained, schedule: &l.schedule };
    let app_gen = ModelGenerator { name: "apprentice".into(), params: &apprentice, schedule: &l.schedule };
    let mut results: Vec<BenchResult> =
        vec![evaluate(&base_gen, &bench, &l.embedder, 0)?, evaluate(&untrained_gen, &bench, &l.embedder, k)?, evaluate(&app_gen, &bench, &l.embedder, k)?];
    let extra: Vec<usize> = kshot.iter().copied().filter(|&x| x != k).collect();
    results.extend(kshot_sweep(&app_gen, &bench, &l.embedder, &extra)?);
    for r in &results {
        println!("{:<12} k={} fidelity {:.4} clip_i {:.4} clip_t {:.4} ({} items, {} failed)", r.model, r.demo_count, r.means.subject_fidelity, r.means.clip_i, r.means.clip_t, r.means.count, r.failed.len());
    }
    let out = &cfg.paths.report;
    std::fs::create_dir_all(out).map_err(|e| Error::Invalid(format!("cannot create {}: {e}", out.display())))?;
    cfg.echo(out)?;
    emit_report(&results, &bench, out)?;

    if dream > 0 {
        let mut rows = Vec::new();
        for (i, cluster) in bench.subjects.iter().take(dream).enumerate() {
            let single = BenchSpec { subjects: vec![cluster.clone()], ..bench.clone() };
            let before = evaluate(&app_gen, &single, &l.embedder, k)?;
            let (tuned, _) = dream_finetune(&apprentice, cluster, &cfg.dream, &l.schedule, cfg.stage_seed(Stage::Dream) + i as u64)?;
            let after = evaluate(&ModelGenerator { name: "dream".into(), params: &tuned, schedule: &l.schedule }, &single, &l.embedder, k)?;
            println!("dream subject {}: fidelity {:.4} -> {:.4}", cluster.subject.id, before.means.subject_fidelity, after.means.subject_fidelity);
            rows.push(serde_json::json!({ "subject_id": cluster.subject.id, "before": before.means, "after": after.means }));
        }
        write_json(&out.join("dream.json"), &rows)?;
    }
    if !lambdas.is_empty() {
        let inputs = PipelineInputs { clusters: &l.ds.train, base: &l.base, embedder: &l.embedder, schedule: &l.schedule };
        let sweep_cfg = apprentice::orchestrator::PipelineConfig { resume: false, ..cfg.pipeline.clone() };
        let rows = threshold_sweep(inputs, &lambdas, &sweep_cfg, &out.join("threshold_sweep"), cfg.stage_seed(Stage::Pipeline), &bench, k)?;
        for r in &rows {
            println!("threshold {:?} (lambda {:.4}): |G| = {}, fidelity {:.4}", r.spec, r.lambda, r.buffer_size, r.result.means.subject_fidelity);
        }
        write_json(&out.join("thresholds.json"), &rows)?;
    }
    Ok(())
}

fn sample(cfg: &RunConfig, demos: &Path, prompt: &str, output: &Path, checkpoint: Option<&Path>) -> apprentice::Result<()> {
    let prompt = Caption::parse(prompt)?;
    let pairs = load_pairs(demos)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| PipelineDirs::new(&cfg.paths.pipeline).apprentice());
    let params = ParameterSet::load(&path)?;
    if pairs.len() > params.config.max_demos {
        return Err(Error::TooManyDemos { count: pairs.len(), max: params.config.max_demos });
    }
    let sampler = SamplerConfig { variance: cfg.inference.variance, ..SamplerConfig::new(cfg.inference.guidance_weight, cfg.stage_seed(Stage::Sample)) };
    let image = inference(&params, &pairs, &prompt, &schedule(cfg)?, &sampler)?;
    if output.extension().is_some_and(|e| e == "png") {
        write_atomic(output, &image_png(&image)?)?;
    } else {
        write_tsr(output, &image)?;
    }
    println!("{}", output.display());
    Ok(())
}
