//! Forward graph, training loss and sampling sessions for [`ParameterSet`].

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::diffusion::{forward_marginal, Branch, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world::{Caption, Pair};

use super::{Flavor, Grads, ParameterSet};

/// What a denoiser call is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub prompt: Caption,
    pub demos: Vec<Pair<f32>>,
    /// When set the model sees only the learned null condition.
    pub drop: bool,
}

impl ConditionBundle {
    pub fn text(prompt: Caption) -> Self {
        ConditionBundle { prompt, demos: Vec::new(), drop: false }
    }

    pub fn with_demos(prompt: Caption, demos: Vec<Pair<f32>>) -> Self {
        ConditionBundle { prompt, demos, drop: false }
    }

    pub fn dropped(mut self, drop: bool) -> Self {
        self.drop = drop;
        self
    }
}

/// One training example: the clean target, its timestep and noise draw.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem<S> {
    pub x0: Tensor<S>,
    pub t: usize,
    pub noise: Tensor<S>,
    pub cond: ConditionBundle,
}

/// `[H, W, 3]` image to `[N, P]` patch rows; patches row-major, each patch
/// flattened as `(dy, dx, channel)`.
pub fn patchify<S: Scalar>(image: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let (h, w, c) = image.image_dims()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape { expected: vec![h - h % patch, w - w % patch, c], found: image.shape().to_vec() });
    }
    let (ph, pw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pi in 0..ph {
        for pj in 0..pw {
            for dy in 0..patch {
                let row = (pi * patch + dy) * w + pj * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Tensor::new(vec![ph * pw, patch * patch * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(rows: &Tensor<S>, patch: usize, size: usize) -> Result<Tensor<S>> {
    let c = 3;
    let per = size / patch;
    if rows.shape() != [per * per, patch * patch * c] {
        return Err(Error::Shape { expected: vec![per * per, patch * patch * c], found: rows.shape().to_vec() });
    }
    let mut out = vec![S::zero(); size * size * c];
    let src = rows.data();
    let plen = patch * patch * c;
    for pi in 0..per {
        for pj in 0..per {
            let p = &src[(pi * per + pj) * plen..(pi * per + pj + 1) * plen];
            for dy in 0..patch {
                let row = (pi * patch + dy) * size + pj * patch;
                out[row * c..(row + patch) * c].copy_from_slice(&p[dy * patch * c..(dy + 1) * patch * c]);
            }
        }
    }
    Tensor::new(vec![size, size, c], out)
}

fn stack_patches<S: Scalar>(images: &[&Tensor<S>], patch: usize) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for img in images {
        let p = patchify(img, patch)?;
        rows += p.rows();
        cols = p.cols();
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

fn sinusoid<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out.push(S::lit((t as f64 * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out.push(S::lit((t as f64 * freq).cos()));
    }
    Tensor::from_parts(vec![1, dim], out)
}

/// Per-layer, per-head keys (transposed, `[dh, R]`) and values (`[R, dh]`)
/// over the concatenated demonstration tokens.
struct Memory {
    layers: Vec<Vec<(Var, Var)>>,
}

struct StepInput<'x, S> {
    x_t: &'x Tensor<S>,
    t: usize,
    text: Var,
    memory: Option<&'x Memory>,
}

struct Graph<'p, S: Scalar> {
    tape: Tape<'p, S>,
    params: &'p ParameterSet<S>,
    vars: HashMap<&'p str, Var>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    fn new(params: &'p ParameterSet<S>) -> Self {
        let mut tape = Tape::new();
        let vars = params.tensors.iter().map(|(name, t)| (name.as_str(), tape.param(t))).collect();
        Graph { tape, params, vars }
    }

    fn p(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Var {
        let y = self.tape.matmul(x, self.p(w));
        self.tape.add_row(y, self.p(b))
    }

    /// `[1, D]` text condition; `None` is the learned null condition.
    fn text(&mut self, caption: Option<&Caption>) -> Var {
        let raw = match caption {
            Some(c) => {
                let toks = self.tape.gather(self.p("text.tokens"), &c.token_indices());
                self.tape.mean_rows(toks)
            }
            None => self.p("text.null"),
        };
        self.linear(raw, "text.w", "text.b")
    }

    fn time(&mut self, t: usize) -> Var {
        let s = self.tape.constant(sinusoid(t, self.params.config.time_dim));
        let h = self.linear(s, "time.w1", "time.b1");
        let h = self.tape.silu(h);
        self.linear(h, "time.w2", "time.b2")
    }

    fn embed(&mut self, patches: Tensor<S>, reps: usize) -> Var {
        let n = self.params.config.patches();
        let x = self.tape.constant(patches);
        let h = self.linear(x, "embed.w", "embed.b");
        let idx: Vec<usize> = (0..reps).flat_map(|_| 0..n).collect();
        let pos = self.tape.gather(self.p("embed.pos"), &idx);
        self.tape.add(h, pos)
    }

    fn memory(&mut self, demos: &[Pair<f32>]) -> Result<Memory> {
        let cfg = self.params.config.clone();
        let mut tokens = Vec::with_capacity(demos.len());
        for d in demos {
            let img: Tensor<S> = d.image.cast();
            let e = self.embed(patchify(&img, cfg.patch)?, 1);
            tokens.push(if cfg.attend_demo_captions {
                let c = self.text(Some(&d.caption));
                self.tape.add_row(e, c)
            } else {
                e
            });
        }
        let all = self.tape.concat_rows(&tokens);
        let dh = cfg.demo_width / cfg.heads;
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let k = self.tape.matmul(all, self.p(&format!("demo_attn.{l}.k")));
            let v = self.tape.matmul(all, self.p(&format!("demo_attn.{l}.v")));
            let heads = (0..cfg.heads)
                .map(|h| {
                    let kh = self.tape.slice_cols(k, h * dh, dh);
                    let kt = self.tape.transpose(kh);
                    let vh = self.tape.slice_cols(v, h * dh, dh);
                    (kt, vh)
                })
                .collect();
            layers.push(heads);
        }
        Ok(Memory { layers })
    }

    fn attend(&mut self, h: Var, memory: &Memory, l: usize) -> Var {
        let cfg = &self.params.config;
        let (heads, dh) = (cfg.heads, cfg.demo_width / cfg.heads);
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let q = self.tape.matmul(h, self.p(&format!("demo_attn.{l}.q")));
        let mut outs = Vec::with_capacity(heads);
        for (hd, &(kt, v)) in memory.layers[l].iter().enumerate() {
            let qh = self.tape.slice_cols(q, hd * dh, dh);
            let s = self.tape.matmul(qh, kt);
            let s = self.tape.scale(s, scale);
            let a = self.tape.softmax_rows(s);
            outs.push(self.tape.matmul(a, v));
        }
        let cat = if outs.len() == 1 { outs[0] } else { self.tape.concat_cols(&outs) };
        self.linear(cat, &format!("demo_attn.{l}.o"), &format!("demo_attn.{l}.o_b"))
    }

    /// Stacked x0 predictions `[B·N, P]` for a batch of noised inputs.
    fn trunk(&mut self, items: &[StepInput<'_, S>]) -> Result<Var> {
        let cfg = self.params.config.clone();
        let n = cfg.patches();
        let b = items.len();
        let xs: Vec<&Tensor<S>> = items.iter().map(|i| i.x_t).collect();
        let mut h = self.embed(stack_patches(&xs, cfg.patch)?, b);
        let conds: Vec<Var> = items
            .iter()
            .map(|it| {
                let te = self.time(it.t);
                self.tape.add(te, it.text)
            })
            .collect();
        let cond_rows = if b == 1 {
            None
        } else {
            let stacked = self.tape.concat_rows(&conds);
            let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
            Some(self.tape.gather(stacked, &idx))
        };
        let any_memory = items.iter().any(|i| i.memory.is_some());
        for l in 0..cfg.depth {
            let z = match cond_rows {
                Some(c) => self.tape.add(h, c),
                None => self.tape.add_row(h, conds[0]),
            };
            let m = self.linear(z, &format!("block.{l}.w1"), &format!("block.{l}.b1"));
            let m = self.tape.silu(m);
            let m = self.linear(m, &format!("block.{l}.w2"), &format!("block.{l}.b2"));
            h = self.tape.add(h, m);
            if any_memory {
                let delta = if b == 1 {
                    self.attend(h, items[0].memory.expect("present"), l)
                } else {
                    let mut parts = Vec::with_capacity(b);
                    for (i, it) in items.iter().enumerate() {
                        parts.push(match it.memory {
                            Some(mem) => {
                                let rows: Vec<usize> = (i * n..(i + 1) * n).collect();
                                let hi = self.tape.gather(h, &rows);
                                self.attend(hi, mem, l)
                            }
                            None => self.tape.constant(Tensor::zeros(vec![n, cfg.width])),
                        });
                    }
                    self.tape.concat_rows(&parts)
                };
                h = self.tape.add(h, delta);
            }
            if !self.tape.value(h).is_finite() {
                return Err(Error::NonFinite { location: format!("block.{l}") });
            }
        }
        let out = self.linear(h, "head.w", "head.b");
        if !self.tape.value(out).is_finite() {
            return Err(Error::NonFinite { location: "head".into() });
        }
        Ok(out)
    }
}

fn check_condition<S: Scalar>(params: &ParameterSet<S>, cond: &ConditionBundle) -> Result<()> {
    if !cond.demos.is_empty() && params.flavor == Flavor::Expert {
        return Err(Error::Flavor { expected: Flavor::Apprentice.name(), found: Flavor::Expert.name() });
    }
    if cond.demos.len() > params.config.max_demos {
        return Err(Error::TooManyDemos { count: cond.demos.len(), max: params.config.max_demos });
    }
    Ok(())
}

fn check_image<S: Scalar>(params: &ParameterSet<S>, x: &Tensor<S>) -> Result<()> {
    let want = params.config.image_shape();
    if x.shape() != want {
        return Err(Error::Shape { expected: want.to_vec(), found: x.shape().to_vec() });
    }
    Ok(())
}

/// x0 prediction for a single noised image.
pub fn forward<S: Scalar>(params: &ParameterSet<S>, x_t: &Tensor<S>, t: usize, cond: &ConditionBundle) -> Result<Tensor<S>> {
    check_condition(params, cond)?;
    check_image(params, x_t)?;
    let mut g = Graph::new(params);
    let text = g.text((!cond.drop).then_some(&cond.prompt));
    let memory = if cond.drop || cond.demos.is_empty() { None } else { Some(g.memory(&cond.demos)?) };
    let out = g.trunk(&[StepInput { x_t, t, text, memory: memory.as_ref() }])?;
    unpatchify(g.tape.value(out), params.config.patch, params.config.image_size)
}

/// Mean x0-regression loss over `batch` and its exact gradient with
/// respect to every parameter.
pub fn loss_and_gradients<S: Scalar>(
    params: &ParameterSet<S>,
    batch: &[TrainItem<S>],
    schedule: &NoiseSchedule<S>,
) -> Result<(S, Grads<S>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let mut noised = Vec::with_capacity(batch.len());
    for item in batch {
        check_condition(params, &item.cond)?;
        check_image(params, &item.x0)?;
        if item.t == 0 {
            return Err(Error::range("training step", "t must be at least 1"));
        }
        noised.push(forward_marginal(&item.x0, item.t, schedule, &item.noise)?);
    }
    let mut g = Graph::new(params);
    let mut texts = Vec::with_capacity(batch.len());
    let mut memories = Vec::with_capacity(batch.len());
    for item in batch {
        texts.push(g.text((!item.cond.drop).then_some(&item.cond.prompt)));
        memories.push(if item.cond.drop || item.cond.demos.is_empty() { None } else { Some(g.memory(&item.cond.demos)?) });
    }
    let inputs: Vec<StepInput<'_, S>> = batch
        .iter()
        .enumerate()
        .map(|(i, item)| StepInput { x_t: &noised[i], t: item.t, text: texts[i], memory: memories[i].as_ref() })
        .collect();
    let out = g.trunk(&inputs)?;
    let targets: Vec<&Tensor<S>> = batch.iter().map(|i| &i.x0).collect();
    let target = stack_patches(&targets, params.config.patch)?;
    let loss = g.tape.mse(out, target.data());
    let value = g.tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { location: "loss".into() });
    }
    let grads = g.tape.backward(loss);
    let out = params
        .tensors
        .iter()
        .map(|(name, t)| {
            let gv = grads.get(g.vars[name.as_str()]).map(|s| s.to_vec()).unwrap_or_else(|| vec![S::zero(); t.len()]);
            (name.clone(), Tensor::from_parts(t.shape().to_vec(), gv))
        })
        .collect();
    Ok((value, out))
}

/// A denoiser bound to one condition. The text embeddings and
/// demonstration keys/values are computed once; each step replays only the
/// timestep-dependent trunk.
pub struct SamplingSession<'p, S: Scalar> {
    graph: Graph<'p, S>,
    text_cond: Var,
    text_null: Var,
    memory: Option<Memory>,
    prefix: usize,
}

impl<'p, S: Scalar> SamplingSession<'p, S> {
    pub fn new(params: &'p ParameterSet<S>, cond: &ConditionBundle) -> Result<Self> {
        check_condition(params, cond)?;
        let mut graph = Graph::new(params);
        let text_null = graph.text(None);
        let text_cond = if cond.drop { text_null } else { graph.text(Some(&cond.prompt)) };
        let memory = if cond.drop || cond.demos.is_empty() { None } else { Some(graph.memory(&cond.demos)?) };
        let prefix = graph.tape.len();
        Ok(SamplingSession { graph, text_cond, text_null, memory, prefix })
    }
}

impl<S: Scalar> Denoiser<S> for SamplingSession<'_, S> {
    fn predict_x0(&mut self, x_t: &Tensor<S>, t: usize, branch: Branch) -> Result<Tensor<S>> {
        check_image(self.graph.params, x_t)?;
        self.graph.tape.truncate(self.prefix);
        let (text, memory) = match branch {
            Branch::Conditional => (self.text_cond, self.memory.as_ref()),
            Branch::Unconditional => (self.text_null, None),
        };
        let out = self.graph.trunk(&[StepInput { x_t, t, text, memory }])?;
        let cfg = &self.graph.params.config;
        unpatchify(self.graph.tape.value(out), cfg.patch, cfg.image_size)
    }
}
