//! Denoiser parameters: the text-conditional expert and the
//! demonstration-conditioned apprentice.
//!
//! Both flavors share a trunk:
//!
//! | tensor | shape |
//! |---|---|
//! | `embed.w`, `embed.b`, `embed.pos` | `[P, D]`, `[1, D]`, `[N, D]` |
//! | `time.w1`, `time.b1`, `time.w2`, `time.b2` | `[Te, D]`, `[1, D]`, `[D, D]`, `[1, D]` |
//! | `text.tokens`, `text.null`, `text.w`, `text.b` | `[V, E]`, `[1, E]`, `[E, D]`, `[1, D]` |
//! | `block.{l}.w1`, `.b1`, `.w2`, `.b2` | `[D, M]`, `[1, M]`, `[M, D]`, `[1, D]` |
//! | `head.w`, `head.b` | `[D, P]`, `[1, P]` |
//!
//! where `P` is the patch length, `N` the patch count, `D` the trunk width.
//! The apprentice adds `demo_attn.{l}.q`, `.k`, `.v` (`[D, A]`), `.o`
//! (`[A, D]`) and `.o_b` (`[1, D]`) per block.

mod gradcheck;
mod net;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::Container;
use crate::optim::NamedTensors;
use crate::rng::{derive_seed, gaussian, stream, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world::grammar::vocab_size;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use net::{
    forward, loss_and_gradients, patchify, unpatchify, ConditionBundle, SamplingSession, TrainItem,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub image_size: usize,
    pub patch: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Inner width of the demonstration attention, split across heads.
    pub demo_width: usize,
    pub max_demos: usize,
    /// Whether demonstration tokens carry their caption embedding.
    pub attend_demo_captions: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            image_size: 16,
            patch: 4,
            time_dim: 16,
            text_dim: 32,
            width: 64,
            mlp_width: 128,
            depth: 2,
            heads: 2,
            demo_width: 32,
            max_demos: 5,
            attend_demo_captions: true,
        }
    }
}

impl ArchitectureConfig {
    /// The smallest configuration exercising every path; used by gradient checks.
    pub fn tiny() -> Self {
        ArchitectureConfig {
            image_size: 4,
            patch: 2,
            time_dim: 4,
            text_dim: 4,
            width: 8,
            mlp_width: 8,
            depth: 2,
            heads: 2,
            demo_width: 4,
            max_demos: 5,
            attend_demo_captions: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_size,
            self.patch,
            self.time_dim,
            self.text_dim,
            self.width,
            self.mlp_width,
            self.depth,
            self.heads,
            self.demo_width,
        ];
        if dims.contains(&0) {
            return Err(Error::range("architecture", "all dimensions must be at least 1"));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::range("architecture", "patch must divide image_size"));
        }
        if self.demo_width % self.heads != 0 {
            return Err(Error::range("architecture", "heads must divide demo_width"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::range("architecture", "time_dim must be even"));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, 3]
    }

    /// Name and shape of every tensor of the given flavor, in init order.
    pub fn shapes(&self, flavor: Flavor) -> Vec<(String, Vec<usize>)> {
        let (p, n, d, m) = (self.patch_len(), self.patches(), self.width, self.mlp_width);
        let (te, e, v) = (self.time_dim, self.text_dim, vocab_size());
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.w".into(), vec![p, d]),
            ("embed.b".into(), vec![1, d]),
            ("embed.pos".into(), vec![n, d]),
            ("time.w1".into(), vec![te, d]),
            ("time.b1".into(), vec![1, d]),
            ("time.w2".into(), vec![d, d]),
            ("time.b2".into(), vec![1, d]),
            ("text.tokens".into(), vec![v, e]),
            ("text.null".into(), vec![1, e]),
            ("text.w".into(), vec![e, d]),
            ("text.b".into(), vec![1, d]),
        ];
        for l in 0..self.depth {
            out.push((format!("block.{l}.w1"), vec![d, m]));
            out.push((format!("block.{l}.b1"), vec![1, m]));
            out.push((format!("block.{l}.w2"), vec![m, d]));
            out.push((format!("block.{l}.b2"), vec![1, d]));
        }
        out.push(("head.w".into(), vec![d, p]));
        out.push(("head.b".into(), vec![1, p]));
        if flavor == Flavor::Apprentice {
            out.extend(self.demo_shapes());
        }
        out
    }

    fn demo_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, a) = (self.width, self.demo_width);
        (0..self.depth)
            .flat_map(|l| {
                [
                    (format!("demo_attn.{l}.q"), vec![d, a]),
                    (format!("demo_attn.{l}.k"), vec![d, a]),
                    (format!("demo_attn.{l}.v"), vec![d, a]),
                    (format!("demo_attn.{l}.o"), vec![a, d]),
                    (format!("demo_attn.{l}.o_b"), vec![1, d]),
                ]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Expert,
    Apprentice,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::Expert => "expert",
            Flavor::Apprentice => "apprentice",
        }
    }
}

/// Named denoiser tensors plus the architecture that fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<S> {
    pub flavor: Flavor,
    pub config: ArchitectureConfig,
    pub tensors: NamedTensors<S>,
}

fn init_tensor<S: Scalar>(name: &str, shape: &[usize], rng: &mut StreamRng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let std = match leaf {
        "b" | "b1" | "b2" | "o_b" | "o" => 0.0,
        "pos" | "tokens" | "null" => 0.5,
        _ => 1.0 / (shape[0] as f64).sqrt(),
    };
    let data = (0..n).map(|_| if std == 0.0 { S::zero() } else { S::lit(std) * gaussian::<S>(rng) }).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn init_named<S: Scalar>(shapes: &[(String, Vec<usize>)], seed: u64) -> NamedTensors<S> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let mut rng = stream(derive_seed(seed, &[i as u64]));
            (name.clone(), init_tensor(name, shape, &mut rng))
        })
        .collect()
}

/// Randomly initialized expert-flavor parameters: scaled Gaussian weights,
/// zero biases.
pub fn init_base<S: Scalar>(config: &ArchitectureConfig, seed: u64) -> Result<ParameterSet<S>> {
    config.validate()?;
    let tensors = init_named(&config.shapes(Flavor::Expert), derive_seed(seed, &[0xba5e]));
    Ok(ParameterSet { flavor: Flavor::Expert, config: config.clone(), tensors })
}

/// Copies the trunk of `base` and adds demonstration attention whose output
/// projections start at zero, so the apprentice initially computes exactly
/// what the base computes.
pub fn upgrade_to_apprentice<S: Scalar>(base: &ParameterSet<S>, seed: u64) -> Result<ParameterSet<S>> {
    base.expect_flavor(Flavor::Expert)?;
    let mut tensors = base.tensors.clone();
    tensors.extend(init_named::<S>(&base.config.demo_shapes(), derive_seed(seed, &[0xa77e])));
    Ok(ParameterSet { flavor: Flavor::Apprentice, config: base.config.clone(), tensors })
}

impl<S: Scalar> ParameterSet<S> {
    pub fn expect_flavor(&self, flavor: Flavor) -> Result<()> {
        if self.flavor != flavor {
            return Err(Error::Flavor { expected: flavor.name(), found: self.flavor.name() });
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self.tensors[name]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Expert-flavor view holding only the shared trunk.
    pub fn trunk_only(&self) -> ParameterSet<S> {
        let names: Vec<String> = self.config.shapes(Flavor::Expert).into_iter().map(|(n, _)| n).collect();
        let tensors = names.into_iter().map(|n| (n.clone(), self.tensors[&n].clone())).collect();
        ParameterSet { flavor: Flavor::Expert, config: self.config.clone(), tensors }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            flavor: self.flavor,
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks names, shapes and finiteness against the architecture.
    pub fn validate(&self) -> Result<()> {
        let want = self.config.shapes(self.flavor);
        if want.len() != self.tensors.len() {
            return Err(Error::Invalid(format!("{} tensors, expected {}", self.tensors.len(), want.len())));
        }
        for (name, shape) in want {
            let t = self.tensors.get(&name).ok_or_else(|| Error::Invalid(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape { expected: shape, found: t.shape().to_vec() });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { location: name });
            }
        }
        Ok(())
    }
}

impl ParameterSet<f32> {
    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.flavor.name().as_bytes());
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: "denoiser".into(),
            meta: serde_json::json!({ "flavor": self.flavor, "architecture": self.config }),
            tensors: self.tensors.clone(),
        }
    }

    pub fn from_container(c: Container, origin: &Path) -> Result<Self> {
        if c.kind != "denoiser" {
            return Err(Error::format(origin, format!("expected a denoiser checkpoint, found {}", c.kind)));
        }
        let flavor: Flavor = serde_json::from_value(c.meta["flavor"].clone())
            .map_err(|e| Error::format(origin, e.to_string()))?;
        let config: ArchitectureConfig = serde_json::from_value(c.meta["architecture"].clone())
            .map_err(|e| Error::format(origin, e.to_string()))?;
        let p = ParameterSet { flavor, config, tensors: c.tensors };
        p.validate().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?, path)
    }
}

/// Gradients keyed like the parameters they belong to.
pub type Grads<S> = BTreeMap<String, Tensor<S>>;

/// Draws the per-item condition-dropout flag.
pub fn draw_drop(rng: &mut StreamRng, rate: f64) -> bool {
    rng.random_bool(rate)
}
