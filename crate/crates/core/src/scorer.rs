//! Contrastive image-text embedder and the scores built on it: image-text
//! alignment, the delta score used to gate expert samples, and
//! image-image similarity.
//!
//! The image tower sees raw pixels; the text tower sees mean-pooled token
//! embeddings. Training combines symmetric InfoNCE over image-caption
//! pairs with an image-image InfoNCE over two renders of the same subject,
//! whose in-batch negatives share the subject's color and category, so
//! image-image similarity responds to signatures rather than only to
//! caption-level attributes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::formats::Container;
use crate::optim::{AdamConfig, AdamState, NamedTensors};
use crate::rng::{derive_seed, gaussian, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world::grammar::{vocab_size, Category, CoarseColor};
use crate::world::{Caption, Cluster, Pair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub image_size: usize,
    pub image_hidden: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub batch: usize,
    /// Subjects per image-image batch; 0 disables the view term.
    pub view_batch: usize,
    pub view_weight: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            image_size: 16,
            image_hidden: 128,
            token_dim: 32,
            text_hidden: 64,
            embed_dim: 32,
            temperature: 0.07,
            batch: 64,
            view_batch: 16,
            view_weight: 3.0,
            epochs: 120,
            lr: 1e-3,
        }
    }
}

impl EmbedderConfig {
    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let px = self.image_size * self.image_size * 3;
        vec![
            ("image.w1", vec![px, self.image_hidden]),
            ("image.b1", vec![1, self.image_hidden]),
            ("image.w2", vec![self.image_hidden, self.embed_dim]),
            ("image.b2", vec![1, self.embed_dim]),
            ("text.tokens", vec![vocab_size(), self.token_dim]),
            ("text.w1", vec![self.token_dim, self.text_hidden]),
            ("text.b1", vec![1, self.text_hidden]),
            ("text.w2", vec![self.text_hidden, self.embed_dim]),
            ("text.b2", vec![1, self.embed_dim]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::range("temperature", self.temperature.to_string()));
        }
        if [self.image_size, self.image_hidden, self.token_dim, self.text_hidden, self.embed_dim, self.batch].contains(&0) {
            return Err(Error::range("embedder", "dimensions and batch must be at least 1"));
        }
        Ok(())
    }
}

/// A trained (or initialized) two-tower embedder. Both towers emit unit
/// vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEmbedder<S = f32> {
    pub config: EmbedderConfig,
    pub tensors: NamedTensors<S>,
}

/// `Δ = candidate − best_demo`, with `best_demo` the highest demo score
/// for the same prompt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaScore {
    pub value: f64,
    pub candidate: f64,
    pub best_demo: f64,
}

pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    let c = dot / (na * nb);
    c.max(-S::one()).min(S::one())
}

struct Towers<'p, S: Scalar> {
    tape: Tape<'p, S>,
    vars: HashMap<&'p str, Var>,
}

impl<'p, S: Scalar> Towers<'p, S> {
    fn new(tensors: &'p NamedTensors<S>) -> Self {
        let mut tape = Tape::new();
        let vars = tensors.iter().map(|(k, t)| (k.as_str(), tape.param(t))).collect();
        Towers { tape, vars }
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.tape.matmul(x, self.vars[format!("{prefix}.w1").as_str()]);
        let h = self.tape.add_row(h, self.vars[format!("{prefix}.b1").as_str()]);
        let h = self.tape.silu(h);
        let o = self.tape.matmul(h, self.vars[format!("{prefix}.w2").as_str()]);
        let o = self.tape.add_row(o, self.vars[format!("{prefix}.b2").as_str()]);
        self.tape.normalize_rows(o)
    }

    fn images(&mut self, images: &[&Tensor<f32>]) -> Var {
        let px = images[0].len();
        let data: Vec<S> = images.iter().flat_map(|t| t.data().iter().map(|&v| S::lit(v as f64))).collect();
        let x = self.tape.constant(Tensor::from_parts(vec![images.len(), px], data));
        self.mlp(x, "image")
    }

    fn texts(&mut self, captions: &[&Caption]) -> Var {
        let rows: Vec<Var> = captions
            .iter()
            .map(|c| {
                let g = self.tape.gather(self.vars["text.tokens"], &c.token_indices());
                self.tape.mean_rows(g)
            })
            .collect();
        let x = if rows.len() == 1 { rows[0] } else { self.tape.concat_rows(&rows) };
        self.mlp(x, "text")
    }

    /// Symmetric InfoNCE between row-aligned unit embeddings.
    fn info_nce(&mut self, a: Var, b: Var, temperature: f64) -> Var {
        let n = self.tape.value(a).rows();
        let bt = self.tape.transpose(b);
        let logits = self.tape.matmul(a, bt);
        let logits = self.tape.scale(logits, S::lit(1.0 / temperature));
        let labels: Vec<usize> = (0..n).collect();
        let l1 = self.tape.cross_entropy(logits, &labels);
        let lt = self.tape.transpose(logits);
        let l2 = self.tape.cross_entropy(lt, &labels);
        let sum = self.tape.add(l1, l2);
        self.tape.scale(sum, S::lit(0.5))
    }
}

fn rows<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<S>> {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

/// Symmetric InfoNCE over matched rows of two embedding matrices
/// (`[n, d]`, unit rows). A single pair has loss exactly zero.
pub fn contrastive_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, temperature: f64) -> Result<S> {
    a.check_same_shape(b)?;
    let mut tape: Tape<'_, S> = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let mut t = Towers { tape, vars: HashMap::new() };
    let l = t.info_nce(va, vb, temperature);
    Ok(t.tape.value(l).data()[0])
}

impl<S: Scalar> AlignmentEmbedder<S> {
    pub fn init(config: &EmbedderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let mut rng = stream(derive_seed(seed, &[0xe3b, i as u64]));
                let n: usize = shape.iter().product();
                let std = if name.contains(".b") {
                    0.0
                } else if name == "text.tokens" {
                    1.0
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                let data = (0..n).map(|_| S::lit(std) * gaussian::<S>(&mut rng)).collect();
                (name.to_string(), Tensor::from_parts(shape, data))
            })
            .collect();
        Ok(AlignmentEmbedder { config: config.clone(), tensors })
    }

    fn check_image(&self, image: &Tensor<f32>) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::Shape { expected: vec![s, s, 3], found: image.shape().to_vec() });
        }
        Ok(())
    }

    /// Unit image embeddings, one row per image.
    pub fn embed_images(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<S>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for i in images {
            self.check_image(i)?;
        }
        let mut t = Towers::new(&self.tensors);
        let v = t.images(images);
        Ok(rows(t.tape.value(v)))
    }

    pub fn embed_texts(&self, captions: &[&Caption]) -> Vec<Vec<S>> {
        if captions.is_empty() {
            return Vec::new();
        }
        let mut t = Towers::new(&self.tensors);
        let v = t.texts(captions);
        rows(t.tape.value(v))
    }

    pub fn embed_image(&self, image: &Tensor<f32>) -> Result<Vec<S>> {
        Ok(self.embed_images(&[image])?.remove(0))
    }

    pub fn embed_text(&self, caption: &Caption) -> Vec<S> {
        self.embed_texts(&[caption]).remove(0)
    }

    /// Cosine between the image and text embeddings.
    pub fn clip_score(&self, image: &Tensor<f32>, text: &Caption) -> Result<S> {
        Ok(cosine(&self.embed_image(image)?, &self.embed_text(text)))
    }

    /// Cosine between two image embeddings.
    pub fn image_image_score(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<S> {
        let e = self.embed_images(&[a, b])?;
        Ok(cosine(&e[0], &e[1]))
    }

    /// `clip(candidate, prompt) − max over demos of clip(demo, prompt)`.
    pub fn delta_score(&self, candidate: &Tensor<f32>, demos: &[Pair<f32>], prompt: &Caption) -> Result<DeltaScore> {
        if demos.is_empty() {
            return Err(Error::Invalid("delta score needs at least one demonstration".into()));
        }
        let text = self.embed_text(prompt);
        let mut images: Vec<&Tensor<f32>> = vec![candidate];
        images.extend(demos.iter().map(|p| &p.image));
        let e = self.embed_images(&images)?;
        let candidate = cosine(&e[0], &text).as_f64();
        let best_demo = e[1..].iter().map(|d| cosine(d, &text).as_f64()).fold(f64::NEG_INFINITY, f64::max);
        Ok(DeltaScore { value: candidate - best_demo, candidate, best_demo })
    }

    /// Delta score against the cluster's primary unseen prompt.
    pub fn delta_clip_score(&self, candidate: &Tensor<f32>, cluster: &Cluster) -> Result<DeltaScore> {
        self.delta_score(candidate, &cluster.pairs, cluster.unseen_prompt())
    }

    /// Mean cosine over all unordered image pairs of the cluster.
    pub fn mean_pairwise_similarity(&self, cluster: &Cluster) -> Result<f64> {
        let images: Vec<&Tensor<f32>> = cluster.images().collect();
        let e = self.embed_images(&images)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..e.len() {
            for j in i + 1..e.len() {
                sum += cosine(&e[i], &e[j]).as_f64();
                n += 1;
            }
        }
        Ok(if n == 0 { 1.0 } else { sum / n as f64 })
    }
}

pub type Embedder = AlignmentEmbedder<f32>;

impl Embedder {
    pub fn save(&self, path: &Path) -> Result<()> {
        Container {
            kind: "embedder".into(),
            meta: serde_json::json!({ "config": self.config }),
            tensors: self.tensors.clone(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != "embedder" {
            return Err(Error::format(path, format!("expected an embedder checkpoint, found {}", c.kind)));
        }
        let config: EmbedderConfig =
            serde_json::from_value(c.meta["config"].clone()).map_err(|e| Error::format(path, e.to_string()))?;
        for (name, shape) in config.shapes() {
            match c.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::format(path, format!("tensor {name} missing or misshapen"))),
            }
        }
        Ok(AlignmentEmbedder { config, tensors: c.tensors })
    }
}

/// Keeps clusters whose mean pairwise image similarity lies in `[lo, hi]`,
/// preserving order.
pub fn filter_clusters(clusters: &[Cluster], embedder: &Embedder, lo: f64, hi: f64) -> Result<Vec<Cluster>> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::range("similarity band", format!("[{lo}, {hi}]")));
    }
    let mut out = Vec::new();
    for c in clusters {
        let s = embedder.mean_pairwise_similarity(c)?;
        if (lo..=hi).contains(&s) {
            out.push(c.clone());
        }
    }
    Ok(out)
}

/// Intra-cluster similarity band of the reference recipe, on the score
/// scale of a web-scale image encoder.
pub const REFERENCE_BAND: (f64, f64) = (0.82, 0.98);

/// The band on this embedder's scale: genuine single-subject clusters have
/// mean similarity around 0.7-0.8, mixed-subject clusters well below 0.6.
pub const DESK_BAND: (f64, f64) = (0.60, 0.98);

/// One training example for the embedder. Items sharing a `group` are
/// renders of the same subject.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub image: Tensor<f32>,
    pub caption: Caption,
    pub group: Option<u32>,
}

impl CorpusItem {
    pub fn from_clusters<'c>(clusters: impl IntoIterator<Item = &'c Cluster>) -> Vec<CorpusItem> {
        clusters
            .into_iter()
            .flat_map(|c| {
                c.pairs.iter().map(move |p| CorpusItem { image: p.image.clone(), caption: p.caption.clone(), group: Some(c.subject.id) })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub steps: usize,
    pub loss_trace: Vec<f64>,
}

type Bucket = (CoarseColor, Category);

/// Groups with at least two items, bucketed by the caption's color and category.
fn view_buckets(corpus: &[CorpusItem]) -> Vec<Vec<Vec<usize>>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, item) in corpus.iter().enumerate() {
        if let Some(g) = item.group {
            groups.entry(g).or_default().push(i);
        }
    }
    let mut buckets: BTreeMap<Bucket, Vec<Vec<usize>>> = BTreeMap::new();
    for members in groups.into_values().filter(|m| m.len() >= 2) {
        if let Ok(t) = corpus[members[0]].caption.trace() {
            buckets.entry((t.color, t.category)).or_default().push(members);
        }
    }
    buckets.into_values().filter(|b| b.len() >= 2).collect()
}

/// Trains both towers with in-batch contrastive losses.
pub fn train_embedder<S: Scalar>(
    corpus: &[CorpusItem],
    config: &EmbedderConfig,
    seed: u64,
) -> Result<(AlignmentEmbedder<S>, EmbedderReport)> {
    if corpus.len() < 2 {
        return Err(Error::Invalid(format!("embedder corpus has {} pairs, need at least 2", corpus.len())));
    }
    if corpus.iter().all(|c| c.caption == corpus[0].caption) {
        tracing::warn!("embedder corpus has a single distinct caption; text alignment is degenerate");
    }
    let mut emb = AlignmentEmbedder::<S>::init(config, seed)?;
    for item in corpus {
        emb.check_image(&item.image)?;
    }
    let buckets = if config.view_batch > 1 { view_buckets(corpus) } else { Vec::new() };
    let mut rng = stream(derive_seed(seed, &[0x7ea1]));
    let mut opt = AdamState::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut loss_trace = Vec::new();
    let per_epoch = corpus.len().div_ceil(config.batch);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch).take(per_epoch) {
            let mut views: Vec<(usize, usize)> = Vec::new();
            if !buckets.is_empty() {
                let bucket = &buckets[rng.random_range(0..buckets.len())];
                let mut picks: Vec<&Vec<usize>> = bucket.iter().collect();
                picks.shuffle(&mut rng);
                for members in picks.into_iter().take(config.view_batch) {
                    let a = rng.random_range(0..members.len());
                    let mut b = rng.random_range(0..members.len() - 1);
                    if b >= a {
                        b += 1;
                    }
                    views.push((members[a], members[b]));
                }
            }
            let (loss, grads) = {
                let mut t = Towers::new(&emb.tensors);
                let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &corpus[i].image).collect();
                let captions: Vec<&Caption> = chunk.iter().map(|&i| &corpus[i].caption).collect();
                let vi = t.images(&images);
                let vt = t.texts(&captions);
                let mut loss = t.info_nce(vi, vt, config.temperature);
                if views.len() >= 2 {
                    let a: Vec<&Tensor<f32>> = views.iter().map(|&(a, _)| &corpus[a].image).collect();
                    let b: Vec<&Tensor<f32>> = views.iter().map(|&(_, b)| &corpus[b].image).collect();
                    let (va, vb) = (t.images(&a), t.images(&b));
                    let lv = t.info_nce(va, vb, config.temperature);
                    let lv = t.tape.scale(lv, S::lit(config.view_weight));
                    loss = t.tape.add(loss, lv);
                }
                let value = t.tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite { location: "embedder loss".into() });
                }
                let g = t.tape.backward(loss);
                let grads: NamedTensors<S> = emb
                    .tensors
                    .iter()
                    .filter_map(|(name, p)| {
                        g.get(t.vars[name.as_str()]).map(|d| (name.clone(), Tensor::from_parts(p.shape().to_vec(), d.to_vec())))
                    })
                    .collect();
                (value, grads)
            };
            opt.update(&mut emb.tensors, &grads, config.lr)?;
            loss_trace.push(loss.as_f64());
        }
    }
    let steps = loss_trace.len();
    Ok((emb, EmbedderReport { steps, loss_trace }))
}

/// Image-to-text top-1 accuracy: each query image ranks its own caption
/// against `candidates − 1` other distinct captions drawn from `pairs`.
pub fn retrieval_accuracy<S: Scalar>(emb: &AlignmentEmbedder<S>, pairs: &[Pair<f32>], candidates: usize, seed: u64) -> Result<f64> {
    let mut distinct: Vec<&Caption> = pairs.iter().map(|p| &p.caption).collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < candidates || candidates < 2 {
        return Err(Error::Invalid(format!("{} distinct captions, need {candidates}", distinct.len())));
    }
    let text = emb.embed_texts(&distinct);
    let index: HashMap<&Caption, usize> = distinct.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let images = emb.embed_images(&pairs.iter().map(|p| &p.image).collect::<Vec<_>>())?;
    let mut rng = stream(seed);
    let mut correct = 0;
    for (p, img) in pairs.iter().zip(&images) {
        let own = index[&p.caption];
        let mut others: Vec<usize> = (0..distinct.len()).filter(|&i| i != own).collect();
        others.shuffle(&mut rng);
        let own_score = cosine(img, &text[own]);
        if others[..candidates - 1].iter().all(|&o| cosine(img, &text[o]) < own_score) {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Fraction of trials in which an image scores its own caption above a
/// random different caption.
pub fn discrimination_rate<S: Scalar>(emb: &AlignmentEmbedder<S>, pairs: &[Pair<f32>], trials: usize, seed: u64) -> Result<f64> {
    let images = emb.embed_images(&pairs.iter().map(|p| &p.image).collect::<Vec<_>>())?;
    let texts = emb.embed_texts(&pairs.iter().map(|p| &p.caption).collect::<Vec<_>>());
    let mut rng = stream(seed);
    let mut wins = 0;
    let mut done = 0;
    while done < trials {
        let i = rng.random_range(0..pairs.len());
        let j = rng.random_range(0..pairs.len());
        if pairs[i].caption == pairs[j].caption {
            continue;
        }
        done += 1;
        if cosine(&images[i], &texts[i]) > cosine(&images[i], &texts[j]) {
            wins += 1;
        }
    }
    Ok(wins as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_identical_and_orthogonal_vectors() {
        assert_eq!(cosine(&[0.6f64, 0.8], &[0.6, 0.8]), 1.0);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn single_pair_contrastive_loss_is_zero() {
        let a = Tensor::new(vec![1, 2], vec![0.6f64, 0.8]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        assert_eq!(contrastive_loss(&a, &b, 0.07).unwrap(), 0.0);
        let two_a = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        assert!(contrastive_loss(&two_a, &two_a, 0.07).unwrap() > 0.0);
    }

    #[test]
    fn band_bounds_are_checked() {
        let e = Embedder::init(&EmbedderConfig::default(), 0).unwrap();
        assert!(filter_clusters(&[], &e, 0.9, 0.5).is_err());
        assert!(filter_clusters(&[], &e, 0.82, 0.98).unwrap().is_empty());
    }
}
