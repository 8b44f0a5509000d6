//! Text-conditional pretraining of the shared base denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{init_base, loss_and_gradients, ArchitectureConfig, ConditionBundle, ParameterSet, TrainItem};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, gaussian_tensor, stream};
use crate::world::Pair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 6000, batch: 16, lr: 1e-3, cond_dropout: 0.1 }
    }
}

/// Trains a freshly initialized base on `(image, caption)` pairs sampled
/// uniformly with replacement. Returns the parameters and per-step losses.
pub fn pretrain_base(
    pairs: &[Pair<f32>],
    arch: &ArchitectureConfig,
    config: &PretrainConfig,
    schedule: &NoiseSchedule<f32>,
    seed: u64,
) -> Result<(ParameterSet<f32>, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Invalid("pretraining needs at least one pair".into()));
    }
    if config.batch == 0 {
        return Err(Error::range("pretrain batch", "must be at least 1"));
    }
    let mut params = init_base::<f32>(arch, derive_seed(seed, &[0]))?;
    let mut opt = AdamState::new(AdamConfig::default());
    let mut rng = stream(derive_seed(seed, &[1]));
    let shape = arch.image_shape();
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<TrainItem<f32>> = (0..config.batch)
            .map(|_| {
                let p = &pairs[rng.random_range(0..pairs.len())];
                TrainItem {
                    x0: p.image.clone(),
                    t: rng.random_range(1..=schedule.steps()),
                    noise: gaussian_tensor(&shape, &mut rng),
                    cond: ConditionBundle::text(p.caption.clone()).dropped(rng.random_bool(config.cond_dropout)),
                }
            })
            .collect();
        let (loss, grads) = loss_and_gradients(&params, &batch, schedule).map_err(|e| match e {
            Error::NonFinite { location } => Error::NonFinite { location: format!("pretrain step {step}: {location}") },
            other => other,
        })?;
        opt.update(&mut params.tensors, &grads, config.lr)?;
        trace.push(loss as f64);
        if step % 500 == 0 {
            tracing::debug!(step, loss, "pretrain");
        }
    }
    Ok((params, trace))
}
