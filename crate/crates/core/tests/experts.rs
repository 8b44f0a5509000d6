use std::fs;

use apprentice::diffusion::{NoiseSchedule, ScheduleConfig};
use apprentice::experts::*;
use apprentice::model::{init_base, ArchitectureConfig, ParameterSet};
use apprentice::world::{generate_dataset, Cluster, WorldConfig};
use apprentice::Error;

fn fixture() -> (ParameterSet<f32>, Vec<Cluster>, NoiseSchedule<f32>) {
    let arch = ArchitectureConfig { image_size: 16, patch: 4, ..ArchitectureConfig::tiny() };
    let world = WorldConfig::default();
    let ds = generate_dataset(11, 4, 1, &world).unwrap();
    let base = init_base::<f32>(&arch, 5).unwrap();
    let sched = ScheduleConfig { steps: 20, ..ScheduleConfig::default() }.build().unwrap();
    (base, ds.train, sched)
}

fn quick() -> ExpertConfig {
    ExpertConfig { steps: 40, lr: 1e-2, samples_per_prompt: 2, ..ExpertConfig::default() }
}

#[test]
fn zero_steps_returns_the_base() {
    let (base, clusters, sched) = fixture();
    let cfg = ExpertConfig { steps: 0, ..quick() };
    let (expert, trace) = finetune_expert(&base, &clusters[0], &cfg, &sched, 1).unwrap();
    assert_eq!(expert, base);
    assert!(trace.is_empty());
}

#[test]
fn fine_tuning_is_deterministic_and_reduces_cluster_loss() {
    let (base, clusters, sched) = fixture();
    let cfg = ExpertConfig { steps: 200, ..quick() };
    let (a, trace) = finetune_expert(&base, &clusters[0], &cfg, &sched, 3).unwrap();
    let (b, _) = finetune_expert(&base, &clusters[0], &cfg, &sched, 3).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), base.hash());
    let before = cluster_loss(&base, &clusters[0], &sched, 9).unwrap();
    let after = cluster_loss(&a, &clusters[0], &sched, 9).unwrap();
    assert!(after < before, "{after} !< {before}");
    let head: f64 = trace[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = trace[trace.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "moving average {tail} !< {head}");
}

#[test]
fn pseudo_targets_are_seeded_and_clipped() {
    let (base, clusters, sched) = fixture();
    let prompt = clusters[0].unseen_prompt();
    let a = sample_pseudo_targets(&base, prompt, 4, 30.0, &sched, 8).unwrap();
    let b = sample_pseudo_targets(&base, prompt, 4, 30.0, &sched, 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert_ne!(a[0].image, a[1].image);
    assert!(a.iter().all(|s| s.image.data().iter().all(|v| (-1.0..=1.0).contains(v))));
}

#[test]
fn expert_job_samples_every_unseen_prompt() {
    let (base, clusters, sched) = fixture();
    let out = run_expert_job(&base, &clusters[1], &quick(), &sched, 4).unwrap();
    assert_eq!(out.subject_id, clusters[1].subject.id);
    assert_eq!(out.samples.len(), 2 * clusters[1].unseen_prompts.len());
    assert_eq!(out.train_loss_trace.len(), 40);
}

#[test]
fn written_outputs_read_back_bit_identically() {
    let (base, clusters, sched) = fixture();
    let out = run_expert_job(&base, &clusters[0], &quick(), &sched, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let entry = write_expert_output(&out, dir.path()).unwrap();
    let back = read_expert_output(&entry.dir).unwrap();
    assert_eq!(back.subject_id, out.subject_id);
    assert_eq!(back.train_loss_trace, out.train_loss_trace);
    for (x, y) in back.samples.iter().zip(&out.samples) {
        assert_eq!(x.prompt, y.prompt);
        assert_eq!(x.seed, y.seed);
        let bits = |s: &ExpertSample| s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
    }
    assert_eq!(list_expert_outputs(dir.path()).unwrap(), vec![entry]);
}

#[test]
fn concurrent_writers_on_distinct_subjects_do_not_interfere() {
    let (base, clusters, sched) = fixture();
    let outs: Vec<ExpertOutput> =
        clusters.iter().map(|c| run_expert_job(&base, c, &quick(), &sched, 4).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    std::thread::scope(|s| {
        for out in &outs {
            let root = dir.path();
            s.spawn(move || {
                for _ in 0..5 {
                    write_expert_output(out, root).unwrap();
                }
            });
        }
    });
    let listed = list_expert_outputs(dir.path()).unwrap();
    assert_eq!(listed.len(), outs.len());
    for (entry, out) in listed.iter().zip(&outs) {
        let back = read_expert_output(&entry.dir).unwrap();
        assert_eq!(back.subject_id, out.subject_id);
        assert_eq!(back.samples, out.samples);
    }
}

#[test]
fn interrupted_writes_publish_nothing() {
    let (base, clusters, sched) = fixture();
    let out = run_expert_job(&base, &clusters[0], &quick(), &sched, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for fault in [WriteFault::AfterFirstSample, WriteFault::BeforePublish] {
        let err = write_expert_output_with_fault(&out, dir.path(), Some(fault)).unwrap_err();
        assert!(matches!(err, Error::Injected(_)));
        assert!(list_expert_outputs(dir.path()).unwrap().is_empty());
        assert!(!expert_dir(dir.path(), out.subject_id).exists());
    }
    let leftovers = fs::read_dir(dir.path()).unwrap().count();
    assert!(leftovers > 0);
    write_expert_output(&out, dir.path()).unwrap();
    assert_eq!(list_expert_outputs(dir.path()).unwrap().len(), 1);
}

#[test]
fn non_finite_traces_are_refused() {
    let (base, clusters, sched) = fixture();
    let mut out = run_expert_job(&base, &clusters[0], &quick(), &sched, 4).unwrap();
    out.train_loss_trace[3] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(write_expert_output(&out, dir.path()), Err(Error::NonFinite { .. })));
}

#[test]
fn apprentice_parameters_are_not_experts() {
    let (base, clusters, sched) = fixture();
    let app = apprentice::model::upgrade_to_apprentice(&base, 1).unwrap();
    assert!(matches!(finetune_expert(&app, &clusters[0], &quick(), &sched, 1), Err(Error::Flavor { .. })));
}
