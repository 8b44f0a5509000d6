use apprentice::diffusion::{ddpm_sample, make_schedule, Branch, Denoiser, NoiseSchedule, SamplerConfig};
use apprentice::model::{
    forward, gradient_check, init_base, loss_and_gradients, upgrade_to_apprentice, ArchitectureConfig, ConditionBundle,
    Flavor, ParameterSet, SamplingSession, TrainItem,
};
use apprentice::optim::{AdamConfig, AdamState};
use apprentice::rng::{gaussian_tensor, stream};
use apprentice::world::{Caption, Pair};
use apprentice::{Error, Tensor};

fn cap(s: &str) -> Caption {
    Caption::parse(s).unwrap()
}

fn image<S: apprentice::Scalar>(cfg: &ArchitectureConfig, seed: u64) -> Tensor<S> {
    gaussian_tensor::<S>(&cfg.image_shape(), &mut stream(seed)).clamp(-S::one(), S::one())
}

fn demos(cfg: &ArchitectureConfig, n: usize) -> Vec<Pair<f32>> {
    let captions = ["a red circle on beach", "a red circle in forest wearing hat", "a shiny red circle at night", "a red circle on snow as neon"];
    (0..n).map(|i| Pair { image: image(cfg, 100 + i as u64), caption: cap(captions[i % captions.len()]) }).collect()
}

/// Gives the zero-initialized attention output projections random values
/// so the demonstration branch influences the output.
fn activate_attention(p: &mut ParameterSet<f64>, seed: u64) {
    let mut rng = stream(seed);
    for (name, t) in p.tensors.iter_mut() {
        if name.ends_with(".o") || name.ends_with(".o_b") {
            *t = gaussian_tensor::<f64>(t.shape(), &mut rng).scale(0.5);
        }
    }
}

fn tiny_schedule() -> NoiseSchedule<f64> {
    make_schedule(10, 0.01, 0.3).unwrap()
}

fn batch(cfg: &ArchitectureConfig, n_demos: usize) -> Vec<TrainItem<f64>> {
    let d = demos(cfg, n_demos);
    vec![
        TrainItem { x0: image(cfg, 1), t: 3, noise: image(cfg, 2), cond: ConditionBundle::with_demos(cap("a red circle at sunset"), d.clone()) },
        TrainItem { x0: image(cfg, 3), t: 8, noise: image(cfg, 4), cond: ConditionBundle::with_demos(cap("a dark red circle in city"), d.clone()) },
        TrainItem { x0: image(cfg, 5), t: 1, noise: image(cfg, 6), cond: ConditionBundle::with_demos(cap("a red circle in room"), d).dropped(true) },
    ]
}

#[test]
fn gradients_match_finite_differences_for_both_flavors() {
    let cfg = ArchitectureConfig::tiny();
    let base = init_base::<f64>(&cfg, 11).unwrap();
    let mut app = upgrade_to_apprentice(&base, 12).unwrap();
    activate_attention(&mut app, 13);
    let s = tiny_schedule();
    let r = gradient_check(&base, &batch(&cfg, 0), &s, 1e-4, 1e-7).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert_eq!(r.entries, base.parameter_count());
    for k in [0, 3] {
        let r = gradient_check(&app, &batch(&cfg, k), &s, 1e-4, 1e-7).unwrap();
        assert!(r.max_rel_error < 1e-4, "{k} demos: {r:?}");
        assert_eq!(r.entries, app.parameter_count());
    }
}

#[test]
fn zero_parameters_and_zero_target_give_zero_loss_and_gradients() {
    let cfg = ArchitectureConfig::tiny();
    let mut p = init_base::<f64>(&cfg, 1).unwrap();
    p.tensors.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let item = TrainItem { x0: Tensor::zeros(cfg.image_shape().to_vec()), t: 4, noise: image(&cfg, 9), cond: ConditionBundle::text(cap("a red circle on beach")) };
    let (loss, grads) = loss_and_gradients(&p, &[item], &tiny_schedule()).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.values().all(|g| g.max_abs() == 0.0));
}

#[test]
fn duplicated_batch_has_the_same_loss_and_gradients() {
    let cfg = ArchitectureConfig::tiny();
    let mut app = upgrade_to_apprentice(&init_base::<f64>(&cfg, 1).unwrap(), 2).unwrap();
    activate_attention(&mut app, 3);
    let b = batch(&cfg, 2);
    let twice: Vec<_> = b.iter().chain(&b).cloned().collect();
    let (l1, g1) = loss_and_gradients(&app, &b, &tiny_schedule()).unwrap();
    let (l2, g2) = loss_and_gradients(&app, &twice, &tiny_schedule()).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for (name, g) in &g1 {
        assert!(g.max_abs_diff(&g2[name]).unwrap() < 1e-12, "{name}");
    }
}

#[test]
fn dropping_the_condition_changes_the_output() {
    let cfg = ArchitectureConfig::default();
    let p = init_base::<f32>(&cfg, 5).unwrap();
    let x = image::<f32>(&cfg, 1);
    let c = ConditionBundle::text(cap("a red circle on beach"));
    let a = forward(&p, &x, 10, &c).unwrap();
    let b = forward(&p, &x, 10, &c.clone().dropped(true)).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 0.0);
}

#[test]
fn demonstration_order_does_not_matter() {
    let cfg = ArchitectureConfig::tiny();
    let mut app = upgrade_to_apprentice(&init_base::<f64>(&cfg, 1).unwrap(), 2).unwrap();
    activate_attention(&mut app, 3);
    let d = demos(&cfg, 3);
    let x = image::<f64>(&cfg, 50);
    let prompt = cap("a red circle in kitchen");
    let reference = forward(&app, &x, 5, &ConditionBundle::with_demos(prompt.clone(), d.clone())).unwrap();
    for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let shuffled = perm.iter().map(|&i| d[i].clone()).collect();
        let out = forward(&app, &x, 5, &ConditionBundle::with_demos(prompt.clone(), shuffled)).unwrap();
        assert!(out.max_abs_diff(&reference).unwrap() < 1e-6);
    }
}

#[test]
fn apprentice_without_demos_is_its_trunk() {
    let cfg = ArchitectureConfig::default();
    let mut app = upgrade_to_apprentice(&init_base::<f64>(&cfg, 1).unwrap(), 2).unwrap();
    activate_attention(&mut app, 3);
    let trunk = app.trunk_only();
    let x = image::<f64>(&cfg, 8);
    let c = ConditionBundle::text(cap("a red circle at night"));
    let a = forward(&app, &x, 7, &c).unwrap();
    let b = forward(&trunk, &x, 7, &c).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    let with_demos = forward(&app, &x, 7, &ConditionBundle::with_demos(c.prompt.clone(), demos(&cfg, 2))).unwrap();
    assert!(with_demos.max_abs_diff(&a).unwrap() > 1e-6);
}

#[test]
fn fresh_apprentice_with_demos_matches_the_base() {
    let cfg = ArchitectureConfig::default();
    let base = init_base::<f32>(&cfg, 21).unwrap();
    let app = upgrade_to_apprentice(&base, 22).unwrap();
    let x = image::<f32>(&cfg, 8);
    let prompt = cap("a red circle on grass");
    let e = forward(&base, &x, 30, &ConditionBundle::text(prompt.clone())).unwrap();
    let a = forward(&app, &x, 30, &ConditionBundle::with_demos(prompt, demos(&cfg, 4))).unwrap();
    assert!(a.max_abs_diff(&e).unwrap() < 1e-6);
}

#[test]
fn condition_contract_errors() {
    let cfg = ArchitectureConfig::tiny();
    let base = init_base::<f64>(&cfg, 1).unwrap();
    let x = image::<f64>(&cfg, 8);
    let prompt = cap("a red circle on grass");
    assert!(matches!(forward(&base, &x, 3, &ConditionBundle::with_demos(prompt.clone(), demos(&cfg, 1))), Err(Error::Flavor { .. })));
    let app = upgrade_to_apprentice(&base, 2).unwrap();
    match forward(&app, &x, 3, &ConditionBundle::with_demos(prompt, demos(&cfg, 6))) {
        Err(Error::TooManyDemos { count: 6, max: 5 }) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(app.flavor, Flavor::Apprentice);
}

#[test]
fn sampling_session_matches_forward() {
    let cfg = ArchitectureConfig::default();
    let mut app = upgrade_to_apprentice(&init_base::<f64>(&cfg, 1).unwrap(), 2).unwrap();
    activate_attention(&mut app, 3);
    let cond = ConditionBundle::with_demos(cap("a red circle in space"), demos(&cfg, 3));
    let mut session = SamplingSession::new(&app, &cond).unwrap();
    for t in [1, 17, 99] {
        let x = image::<f64>(&cfg, t as u64);
        let a = session.predict_x0(&x, t, Branch::Conditional).unwrap();
        assert!(a.max_abs_diff(&forward(&app, &x, t, &cond).unwrap()).unwrap() < 1e-12);
        let u = session.predict_x0(&x, t, Branch::Unconditional).unwrap();
        assert!(u.max_abs_diff(&forward(&app, &x, t, &cond.clone().dropped(true)).unwrap()).unwrap() < 1e-12);
    }
    let s = make_schedule(20, 1e-3, 0.2).unwrap();
    let a = ddpm_sample(&mut session, &cfg.image_shape(), &s, &SamplerConfig::new(3.0, 4)).unwrap();
    let b = ddpm_sample(&mut SamplingSession::new(&app, &cond).unwrap(), &cfg.image_shape(), &s, &SamplerConfig::new(3.0, 4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_reduces_loss_and_separates_the_null_path() {
    let cfg = ArchitectureConfig::tiny();
    let mut p = upgrade_to_apprentice(&init_base::<f64>(&cfg, 1).unwrap(), 2).unwrap();
    let b = batch(&cfg, 2);
    let s = tiny_schedule();
    let mut opt = AdamState::new(AdamConfig::default());
    let (first, _) = loss_and_gradients(&p, &b, &s).unwrap();
    for _ in 0..200 {
        let (_, g) = loss_and_gradients(&p, &b, &s).unwrap();
        opt.update(&mut p.tensors, &g, 1e-2).unwrap();
    }
    let (last, _) = loss_and_gradients(&p, &b, &s).unwrap();
    assert!(last < first, "{first} -> {last}");
    let x = image::<f64>(&cfg, 77);
    let c = ConditionBundle::text(cap("a red circle on beach"));
    assert_ne!(forward(&p, &x, 4, &c).unwrap(), forward(&p, &x, 4, &c.clone().dropped(true)).unwrap());
}
