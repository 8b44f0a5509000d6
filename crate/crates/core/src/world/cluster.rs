use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::tensor::Tensor;

use super::grammar::{Accessory, Attribute, Caption, CaptionTrace, Context, Skill, SkillFamily, Style};
use super::render::render_scene;
use super::subject::SubjectSpec;
use super::WorldConfig;

pub const MIN_CLUSTER_PAIRS: usize = 3;
pub const MAX_CLUSTER_PAIRS: usize = 10;

/// An (image, caption) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<S> {
    pub image: Tensor<S>,
    pub caption: Caption,
}

/// Demonstrations of one subject plus the unseen prompt(s) an expert is
/// asked to render it in.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub subject: SubjectSpec,
    pub pairs: Vec<Pair<f32>>,
    /// Never empty; the first entry is the cluster's primary unseen prompt.
    pub unseen_prompts: Vec<Caption>,
}

impl Cluster {
    pub fn unseen_prompt(&self) -> &Caption {
        &self.unseen_prompts[0]
    }

    pub fn images(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.pairs.iter().map(|p| &p.image)
    }
}

fn random_skill(family: SkillFamily, rng: &mut StreamRng) -> Option<Skill> {
    match family {
        SkillFamily::Recontextualization => None,
        SkillFamily::AttributeEdit => Some(Skill::Attribute(Attribute::ALL[rng.random_range(0..Attribute::ALL.len())])),
        SkillFamily::Stylization => Some(Skill::Style(Style::ALL[rng.random_range(0..Style::ALL.len())])),
        SkillFamily::Accessorization => Some(Skill::Accessory(Accessory::ALL[rng.random_range(0..Accessory::ALL.len())])),
    }
}

/// Builds a `k`-pair cluster. Demonstrations use distinct contexts and an
/// optional non-recontextualization skill; each unseen prompt uses a
/// context no demonstration uses and a skill family no demonstration uses.
pub fn make_cluster(subject: &SubjectSpec, k: usize, seed: u64, cfg: &WorldConfig) -> Result<Cluster> {
    if !(MIN_CLUSTER_PAIRS..=MAX_CLUSTER_PAIRS).contains(&k) {
        return Err(Error::range("cluster size", format!("{k} not in [{MIN_CLUSTER_PAIRS}, {MAX_CLUSTER_PAIRS}]")));
    }
    let mut rng = stream(derive_seed(seed, &[0xc1]));
    let mut contexts: Vec<Context> = Context::ALL.to_vec();
    contexts.shuffle(&mut rng);
    let (demo_contexts, spare_contexts) = contexts.split_at(k);

    let demo_families = [SkillFamily::AttributeEdit, SkillFamily::Stylization, SkillFamily::Accessorization];
    let mut used = BTreeSet::new();
    let mut pairs = Vec::with_capacity(k);
    for (i, &context) in demo_contexts.iter().enumerate() {
        let skill = if rng.random_bool(cfg.skill_caption_rate) {
            let family = demo_families[rng.random_range(0..demo_families.len())];
            used.insert(family);
            random_skill(family, &mut rng)
        } else {
            None
        };
        let caption = Caption::from_trace(&CaptionTrace {
            color: subject.color,
            category: subject.category,
            context,
            skill,
        });
        let image = render_scene(subject, &caption, derive_seed(seed, &[0x1a, i as u64]), cfg)?;
        pairs.push(Pair { image, caption });
    }

    let available: Vec<SkillFamily> = SkillFamily::ALL.iter().copied().filter(|f| !used.contains(f)).collect();
    let mut unseen_prompts = Vec::with_capacity(cfg.prompts_per_cluster.max(1));
    for j in 0..cfg.prompts_per_cluster.max(1) {
        let family = available[rng.random_range(0..available.len())];
        let context = spare_contexts[(rng.random_range(0..spare_contexts.len()) + j) % spare_contexts.len()];
        let skill = random_skill(family, &mut rng);
        unseen_prompts.push(Caption::from_trace(&CaptionTrace {
            color: subject.color,
            category: subject.category,
            context,
            skill,
        }));
    }
    Ok(Cluster { subject: subject.clone(), pairs, unseen_prompts })
}
