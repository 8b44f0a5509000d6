//! Adam over named parameter maps.

use std::collections::BTreeMap;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::Container;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NamedTensors<S> = BTreeMap<String, Tensor<S>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    m: NamedTensors<S>,
    v: NamedTensors<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one bias-corrected Adam update in place. Parameters without
    /// a gradient entry are left untouched.
    pub fn update(&mut self, params: &mut NamedTensors<S>, grads: &NamedTensors<S>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            p.check_same_shape(g)?;
        }
        self.step += 1;
        let (b1, b2) = (S::lit(self.config.beta1), S::lit(self.config.beta2));
        let eps = S::lit(self.config.eps);
        let c1 = S::one() - b1.powi(self.step as i32);
        let c2 = S::one() - b2.powi(self.step as i32);
        let lr = S::lit(lr);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros_like(g));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros_like(g));
            let iter = p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()).zip(g.data());
            for (((w, m), v), &g) in iter {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl AdamState<f32> {
    /// Moments are stored as `m/<name>` and `v/<name>`.
    pub fn to_container(&self) -> Container {
        let mut tensors = BTreeMap::new();
        for (prefix, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in map {
                tensors.insert(format!("{prefix}/{name}"), t.clone());
            }
        }
        Container { kind: "adam".into(), meta: serde_json::json!({"config": self.config, "step": self.step}), tensors }
    }

    pub fn from_container(c: Container, origin: &Path) -> Result<Self> {
        if c.kind != "adam" {
            return Err(Error::format(origin, format!("expected an adam container, found {}", c.kind)));
        }
        let config = serde_json::from_value(c.meta["config"].clone()).map_err(|e| Error::format(origin, e.to_string()))?;
        let step = c.meta["step"].as_u64().ok_or_else(|| Error::format(origin, "missing step"))?;
        let mut state = AdamState::new(config);
        state.step = step;
        for (key, t) in c.tensors {
            match key.split_once('/') {
                Some(("m", name)) => state.m.insert(name.to_string(), t),
                Some(("v", name)) => state.v.insert(name.to_string(), t),
                _ => return Err(Error::format(origin, format!("unexpected tensor {key}"))),
            };
        }
        Ok(state)
    }
}

/// Functional form of [`AdamState::update`].
pub fn optimizer_step<S: Scalar>(
    params: &NamedTensors<S>,
    grads: &NamedTensors<S>,
    state: &AdamState<S>,
    lr: f64,
) -> Result<(NamedTensors<S>, AdamState<S>)> {
    let (mut p, mut s) = (params.clone(), state.clone());
    s.update(&mut p, grads, lr)?;
    Ok((p, s))
}
