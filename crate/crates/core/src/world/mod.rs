//! The synthetic subject world: subjects with caption-invisible
//! signatures, a caption grammar, a procedural renderer, demonstration
//! clusters and dataset splits.

pub mod cluster;
pub mod dataset;
pub mod grammar;
pub mod render;
pub mod subject;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cluster::{make_cluster, Cluster, Pair, MAX_CLUSTER_PAIRS, MIN_CLUSTER_PAIRS};
pub use dataset::{
    generate_dataset, load_cluster, load_dataset, load_pairs, regenerate, save_cluster, save_dataset, split_dataset,
    validate_dataset, DatasetSummary, Manifest, SeedDataset,
};
pub use grammar::{Accessory, Attribute, Caption, CaptionTrace, Category, CoarseColor, Context, Skill, SkillFamily, Style};
pub use render::{render_scene, subject_mask};
pub use subject::{generate_subjects, SubjectId, SubjectSpec, SIGNATURE_LEN};

/// Minimum pixel L2 distance between renders of two subjects that differ
/// only in signature.
pub const SIGNATURE_L2_FLOOR: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Side length of the square RGB images.
    pub image_size: usize,
    /// Standard deviation of per-pixel render noise, in [0, 1] color units.
    pub pixel_noise: f64,
    /// Training cluster sizes are uniform in `min_pairs..=max_pairs`.
    pub min_pairs: usize,
    pub max_pairs: usize,
    /// Size of every held-out cluster.
    pub heldout_pairs: usize,
    pub prompts_per_cluster: usize,
    /// Probability that a demonstration caption carries a skill modifier.
    pub skill_caption_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_size: 16,
            pixel_noise: 0.02,
            min_pairs: 3,
            max_pairs: 6,
            heldout_pairs: 6,
            prompts_per_cluster: 1,
            skill_caption_rate: 0.45,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::range("image_size", format!("{} is not a positive multiple of 16", self.image_size)));
        }
        let sizes = MIN_CLUSTER_PAIRS..=MAX_CLUSTER_PAIRS;
        if !sizes.contains(&self.min_pairs) || !sizes.contains(&self.max_pairs) || self.min_pairs > self.max_pairs {
            return Err(Error::range("cluster size range", format!("[{}, {}]", self.min_pairs, self.max_pairs)));
        }
        if !sizes.contains(&self.heldout_pairs) {
            return Err(Error::range("heldout_pairs", self.heldout_pairs.to_string()));
        }
        if self.prompts_per_cluster == 0 {
            return Err(Error::range("prompts_per_cluster", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.skill_caption_rate) || !(0.0..=1.0).contains(&self.pixel_noise) {
            return Err(Error::range("rates", "skill_caption_rate and pixel_noise must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * 3
    }
}
