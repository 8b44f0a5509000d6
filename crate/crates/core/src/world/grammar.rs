//! Caption grammar.
//!
//! ```text
//! caption  := "a" [attribute] color category prep context [tail]
//! tail     := "wearing" accessory | "as" style
//! ```
//!
//! `prep` is fixed by the context ("on beach", "in forest", "at night").
//! A caption carries at most one skill modifier (attribute, accessory or
//! style). Nothing in the vocabulary describes a subject's signature.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const GRAMMAR_VERSION: u32 = 1;

macro_rules! word_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

word_enum!(
    /// Base shape of a subject.
    Category {
        Circle => "circle", Square => "square", Triangle => "triangle",
        Star => "star", Cross => "cross", Diamond => "diamond",
    }
);

word_enum!(
    /// Hue bucket of a subject.
    CoarseColor {
        Red => "red", Orange => "orange", Yellow => "yellow",
        Green => "green", Blue => "blue", Purple => "purple",
    }
);

word_enum!(
    /// Background scene.
    Context {
        Beach => "beach", Grass => "grass", Snow => "snow", Night => "night",
        Desert => "desert", Forest => "forest", City => "city", River => "river",
        Sunset => "sunset", Room => "room", Space => "space", Kitchen => "kitchen",
    }
);

word_enum!(
    Attribute { Shiny => "shiny", Dark => "dark", Faded => "faded" }
);

word_enum!(
    Style { Sketch => "sketch", Mosaic => "mosaic", Neon => "neon" }
);

word_enum!(
    Accessory { Hat => "hat", Scarf => "scarf", Bow => "bow" }
);

impl Context {
    pub fn preposition(self) -> &'static str {
        match self {
            Context::Beach | Context::Grass | Context::Snow | Context::Desert | Context::River => "on",
            Context::Forest | Context::City | Context::Room | Context::Space | Context::Kitchen => "in",
            Context::Night | Context::Sunset => "at",
        }
    }
}

/// The four kinds of unseen-prompt skills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillFamily {
    Recontextualization,
    AttributeEdit,
    Stylization,
    Accessorization,
}

impl SkillFamily {
    pub const ALL: &'static [SkillFamily] = &[
        SkillFamily::Recontextualization,
        SkillFamily::AttributeEdit,
        SkillFamily::Stylization,
        SkillFamily::Accessorization,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    Attribute(Attribute),
    Style(Style),
    Accessory(Accessory),
}

impl Skill {
    pub fn family(self) -> SkillFamily {
        match self {
            Skill::Attribute(_) => SkillFamily::AttributeEdit,
            Skill::Style(_) => SkillFamily::Stylization,
            Skill::Accessory(_) => SkillFamily::Accessorization,
        }
    }
}

/// Production trace of a caption: what each grammar slot expanded to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionTrace {
    pub color: CoarseColor,
    pub category: Category,
    pub context: Context,
    pub skill: Option<Skill>,
}

const FIXED_WORDS: &[&str] = &["a", "on", "in", "at", "wearing", "as"];

/// The closed vocabulary, in token-id order.
pub fn vocabulary() -> &'static [&'static str] {
    use std::sync::OnceLock;
    static VOCAB: OnceLock<Vec<&'static str>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut v: Vec<&'static str> = FIXED_WORDS.to_vec();
        v.extend(Attribute::ALL.iter().map(|a| a.word()));
        v.extend(CoarseColor::ALL.iter().map(|c| c.word()));
        v.extend(Category::ALL.iter().map(|c| c.word()));
        v.extend(Context::ALL.iter().map(|c| c.word()));
        v.extend(Accessory::ALL.iter().map(|a| a.word()));
        v.extend(Style::ALL.iter().map(|s| s.word()));
        v
    })
}

pub fn vocab_size() -> usize {
    vocabulary().len()
}

pub const MAX_CAPTION_LEN: usize = 16;

fn token_id(word: &str) -> Option<u16> {
    vocabulary().iter().position(|&w| w == word).map(|i| i as u16)
}

/// A tokenized caption. Construct through [`Caption::from_trace`] or
/// [`Caption::parse`]; both guarantee the token sequence is grammatical.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Caption {
    tokens: Vec<u16>,
}

impl Caption {
    pub fn from_trace(trace: &CaptionTrace) -> Caption {
        let mut words = vec!["a"];
        if let Some(Skill::Attribute(a)) = trace.skill {
            words.push(a.word());
        }
        words.push(trace.color.word());
        words.push(trace.category.word());
        words.push(trace.context.preposition());
        words.push(trace.context.word());
        match trace.skill {
            Some(Skill::Accessory(a)) => words.extend(["wearing", a.word()]),
            Some(Skill::Style(s)) => words.extend(["as", s.word()]),
            _ => {}
        }
        let tokens = words.iter().map(|w| token_id(w).expect("grammar words are in the vocabulary")).collect();
        Caption { tokens }
    }

    /// Parses space-separated words. Errors carry the index of the first
    /// offending token.
    pub fn parse(text: &str) -> Result<Caption> {
        let mut tokens = Vec::new();
        for (i, word) in text.split_whitespace().enumerate() {
            let id = token_id(word)
                .ok_or_else(|| Error::Grammar { index: i, reason: format!("unknown word {word:?}") })?;
            tokens.push(id);
        }
        let caption = Caption { tokens };
        caption.trace()?;
        Ok(caption)
    }

    /// Validates raw token ids against the grammar.
    pub fn from_tokens(tokens: Vec<u16>) -> Result<Caption> {
        if let Some(i) = tokens.iter().position(|&t| t as usize >= vocab_size()) {
            return Err(Error::Grammar { index: i, reason: format!("token id {} out of vocabulary", tokens[i]) });
        }
        let caption = Caption { tokens };
        caption.trace()?;
        Ok(caption)
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn token_indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }

    pub fn words(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.tokens.iter().map(|&t| vocabulary()[t as usize])
    }

    /// Recovers the production trace, i.e. parses the tokens back through the
    /// grammar.
    pub fn trace(&self) -> Result<CaptionTrace> {
        let words: Vec<&str> = self.words().collect();
        if words.len() > MAX_CAPTION_LEN {
            return Err(Error::Grammar { index: MAX_CAPTION_LEN, reason: "caption too long".into() });
        }
        let mut pos = 0;
        let err = |index: usize, what: &str| Error::Grammar {
            index,
            reason: match words.get(index) {
                Some(w) => format!("expected {what}, found {w:?}"),
                None => format!("expected {what}, found end of caption"),
            },
        };
        if words.first() != Some(&"a") {
            return Err(err(0, "\"a\""));
        }
        pos += 1;
        let attribute = words.get(pos).and_then(|w| Attribute::from_word(w));
        if attribute.is_some() {
            pos += 1;
        }
        let color = words.get(pos).and_then(|w| CoarseColor::from_word(w)).ok_or_else(|| err(pos, "a color"))?;
        pos += 1;
        let category = words.get(pos).and_then(|w| Category::from_word(w)).ok_or_else(|| err(pos, "a category"))?;
        pos += 1;
        let prep_pos = pos;
        let prep = *words.get(pos).ok_or_else(|| err(pos, "a preposition"))?;
        if !["on", "in", "at"].contains(&prep) {
            return Err(err(pos, "a preposition"));
        }
        pos += 1;
        let context = words.get(pos).and_then(|w| Context::from_word(w)).ok_or_else(|| err(pos, "a context"))?;
        if context.preposition() != prep {
            return Err(Error::Grammar {
                index: prep_pos,
                reason: format!("context {:?} takes {:?}, not {prep:?}", context.word(), context.preposition()),
            });
        }
        pos += 1;
        let mut skill = attribute.map(Skill::Attribute);
        if let Some(&w) = words.get(pos) {
            if skill.is_some() {
                return Err(Error::Grammar { index: pos, reason: "at most one skill modifier".into() });
            }
            match w {
                "wearing" => {
                    pos += 1;
                    let a = words.get(pos).and_then(|w| Accessory::from_word(w)).ok_or_else(|| err(pos, "an accessory"))?;
                    skill = Some(Skill::Accessory(a));
                }
                "as" => {
                    pos += 1;
                    let s = words.get(pos).and_then(|w| Style::from_word(w)).ok_or_else(|| err(pos, "a style"))?;
                    skill = Some(Skill::Style(s));
                }
                _ => return Err(err(pos, "end of caption, \"wearing\" or \"as\"")),
            }
            pos += 1;
            if pos < words.len() {
                return Err(err(pos, "end of caption"));
            }
        }
        Ok(CaptionTrace { color, category, context, skill })
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self.words().collect();
        f.write_str(&words.join(" "))
    }
}

impl fmt::Debug for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Caption({self})")
    }
}

impl Serialize for Caption {
    fn serialize<Z: Serializer>(&self, s: Z) -> std::result::Result<Z::Ok, Z::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Caption {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Caption::parse(&s).map_err(serde::de::Error::custom)
    }
}
