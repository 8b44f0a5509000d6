use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

use super::grammar::{Category, CoarseColor};

pub type SubjectId = u32;

/// Number of symbols in a signature.
pub const SIGNATURE_LEN: usize = 8;
/// Distinct values each signature symbol can take.
pub const SIGNATURE_ALPHABET: u8 = 4;

/// Size of the signature space.
pub fn signature_capacity() -> usize {
    (SIGNATURE_ALPHABET as usize).pow(SIGNATURE_LEN as u32)
}

/// A synthetic subject. Its signature is rendered as a dot/stripe block on
/// the subject and has no counterpart in the caption vocabulary, so only
/// images identify a subject at instance level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub id: SubjectId,
    pub category: Category,
    pub color: CoarseColor,
    pub signature: [u8; SIGNATURE_LEN],
    pub scale: f32,
}

/// Draws `n` subjects with pairwise-distinct signatures. Ids are `0..n`.
pub fn generate_subjects(n: usize, seed: u64) -> Result<Vec<SubjectSpec>> {
    if n == 0 {
        return Err(Error::range("subject count", "at least one subject is required"));
    }
    let capacity = signature_capacity();
    if n > capacity {
        return Err(Error::Capacity { requested: n, capacity });
    }
    let mut rng = stream(derive_seed(seed, &[0x5eb]));
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let signature = loop {
            let mut sig = [0u8; SIGNATURE_LEN];
            sig.iter_mut().for_each(|s| *s = rng.random_range(0..SIGNATURE_ALPHABET));
            if seen.insert(sig) {
                break sig;
            }
        };
        let category = Category::ALL[rng.random_range(0..Category::ALL.len())];
        let color = CoarseColor::ALL[rng.random_range(0..CoarseColor::ALL.len())];
        // two decimals keep the JSON form exact
        let scale = (rng.random_range(60..=100) as f32) / 100.0;
        out.push(SubjectSpec { id: id as SubjectId, category, color, signature, scale });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_subject() {
        assert_eq!(generate_subjects(1, 7).unwrap(), generate_subjects(1, 7).unwrap());
    }

    #[test]
    fn two_subjects_have_distinct_signatures() {
        let s = generate_subjects(2, 7).unwrap();
        assert_ne!(s[0].signature, s[1].signature);
    }

    #[test]
    fn five_hundred_subjects_have_no_signature_collisions() {
        let s = generate_subjects(500, 3).unwrap();
        assert_eq!(s.len(), 500);
        let mut collisions = 0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                if s[i].signature == s[j].signature {
                    collisions += 1;
                }
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn exceeding_the_signature_space_names_the_capacity() {
        let e = generate_subjects(signature_capacity() + 1, 1).unwrap_err();
        assert!(matches!(e, Error::Capacity { capacity: 65536, .. }), "{e}");
        assert!(e.to_string().contains("65536"));
        assert!(generate_subjects(0, 1).is_err());
    }

    #[test]
    fn scales_lie_in_unit_interval() {
        for s in generate_subjects(200, 9).unwrap() {
            assert!(s.scale > 0.0 && s.scale <= 1.0);
        }
    }
}
