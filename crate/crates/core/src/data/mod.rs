//! Dataset schema, label mapping, synthetic corpus generation, on-disk
//! formats and session-based fold planning.

mod folds;
mod io;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{make_folds, Fold, FoldPlan};
pub use io::{read_blob, read_dataset, write_blob, write_dataset, BLOB_MAGIC, MANIFEST_FILE, META_FILE};
pub use synthetic::{generate_synthetic_dataset, synthetic_lexicon, GeneratorConfig};

pub const NUM_CLASSES: usize = 4;

/// The five emotion labels found in the source annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Emotion {
    Happy,
    Angry,
    Neutral,
    Sad,
    Excited,
}

impl Emotion {
    pub const ALL: [Emotion; 5] = [
        Emotion::Happy,
        Emotion::Angry,
        Emotion::Neutral,
        Emotion::Sad,
        Emotion::Excited,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Happy => "Happy",
            Emotion::Angry => "Angry",
            Emotion::Neutral => "Neutral",
            Emotion::Sad => "Sad",
            Emotion::Excited => "Excited",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Emotion::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Schema(format!("unknown emotion label `{s}`")))
    }
}

/// One of the four target classes, in the fixed order
/// Happy=0, Angry=1, Neutral=2, Sad=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassIndex(u8);

impl ClassIndex {
    pub const NAMES: [&'static str; NUM_CLASSES] = ["Happy", "Angry", "Neutral", "Sad"];

    pub fn new(value: usize) -> Result<Self> {
        if value < NUM_CLASSES {
            Ok(Self(value as u8))
        } else {
            Err(Error::Schema(format!("class index {value} out of range")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }
}

/// Excited is folded into Happy; the rest keep their own class.
pub fn map_label(raw: Emotion) -> ClassIndex {
    ClassIndex(match raw {
        Emotion::Happy | Emotion::Excited => 0,
        Emotion::Angry => 1,
        Emotion::Neutral => 2,
        Emotion::Sad => 3,
    })
}

/// Parses a label string and maps it to its class.
pub fn map_label_str(raw: &str) -> Result<ClassIndex> {
    raw.parse::<Emotion>().map(map_label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// J×d_a feature frames, time-major.
    pub speech: Array2<f32>,
    pub tokens: Vec<u32>,
    /// Uppercase, punctuation-free transcript used as the CTC target.
    pub transcript: String,
    pub raw_label: Emotion,
    pub speaker_id: u32,
    pub session_id: u32,
    /// Precomputed M×d token representations, used by the text passthrough
    /// encoder.
    pub text_features: Option<Array2<f32>>,
}

impl Utterance {
    pub fn label(&self) -> ClassIndex {
        map_label(self.raw_label)
    }

    pub fn num_frames(&self) -> usize {
        self.speech.nrows()
    }
}

/// Word list of a synthetic corpus. Token id = position in `words`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<String>,
    /// Keyword token for each class, indexed by class.
    pub keywords: Vec<u32>,
    /// Label-neutral synonym pairs (both directions are valid paraphrases).
    pub synonyms: Vec<(u32, u32)>,
}

impl Lexicon {
    pub fn is_keyword(&self, token: u32) -> bool {
        self.keywords.contains(&token)
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.words[t as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub d_a: usize,
    pub token_vocab_size: usize,
    pub n_sessions: u32,
    #[serde(default)]
    pub lexicon: Option<Lexicon>,
    /// Ground-truth additive offset per speaker, known for synthetic data.
    #[serde(default)]
    pub speaker_offsets: BTreeMap<u32, Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn sessions(&self) -> Vec<u32> {
        self.utterances
            .iter()
            .map(|u| u.session_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn speakers(&self) -> Vec<u32> {
        self.utterances
            .iter()
            .map(|u| u.speaker_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Utterances whose session is in `sessions`, order preserved.
    pub fn subset_sessions(&self, sessions: &[u32]) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            utterances: self
                .utterances
                .iter()
                .filter(|u| sessions.contains(&u.session_id))
                .cloned()
                .collect(),
        }
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for u in &self.utterances {
            h[u.label().index()] += 1;
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for u in &self.utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Schema(format!("duplicate utterance id `{}`", u.id)));
            }
            if u.speech.nrows() == 0 {
                return Err(Error::Schema(format!("utterance `{}` has no frames", u.id)));
            }
            if u.speech.ncols() != self.meta.d_a {
                return Err(Error::Schema(format!(
                    "utterance `{}` has feature width {}, dataset declares {}",
                    u.id,
                    u.speech.ncols(),
                    self.meta.d_a
                )));
            }
            if u.tokens.is_empty() {
                return Err(Error::Schema(format!("utterance `{}` has no tokens", u.id)));
            }
            if let Some(&bad) = u.tokens.iter().find(|&&t| t as usize >= self.meta.token_vocab_size) {
                return Err(Error::Schema(format!(
                    "utterance `{}` has token {bad} outside vocabulary of {}",
                    u.id, self.meta.token_vocab_size
                )));
            }
            if u.transcript.is_empty() {
                return Err(Error::Schema(format!("utterance `{}` has empty transcript", u.id)));
            }
            if u.session_id == 0 || u.session_id > self.meta.n_sessions {
                return Err(Error::Schema(format!(
                    "utterance `{}` has session {} outside 1..={}",
                    u.id, u.session_id, self.meta.n_sessions
                )));
            }
            if let Some(tf) = &u.text_features {
                if tf.nrows() != u.tokens.len() {
                    return Err(Error::Schema(format!(
                        "utterance `{}` has {} text feature rows for {} tokens",
                        u.id,
                        tf.nrows(),
                        u.tokens.len()
                    )));
                }
            }
        }
        Ok(())
    }
}
