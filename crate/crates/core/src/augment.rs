//! Second views for the augmented contrastive loss: label-neutral text
//! rewrites, speaker swaps on the speech side, and ingestion of pairs
//! produced offline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_blob, write_blob, Dataset, Lexicon, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    #[default]
    LexiconParaphrase,
    TokenDropout,
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeechMode {
    #[default]
    SpeakerShift,
    GaussianJitter,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub text_mode: TextMode,
    pub speech_mode: SpeechMode,
    /// Extra word → synonym entries on top of the corpus lexicon.
    pub paraphrase_table: BTreeMap<String, String>,
    pub use_lexicon_synonyms: bool,
    /// Chance that a token with a synonym gets rewritten.
    pub paraphrase_prob: f64,
    pub dropout_p: f64,
    /// Per-element noise added to the speech view.
    pub jitter_sigma: f64,
    /// Scale of the random constant offset used when true speaker offsets
    /// are unknown.
    pub shift_sigma: f64,
    pub seed: u64,
    pub regenerate_per_step: bool,
    /// Pair manifest for the precomputed modes.
    pub pairs: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            text_mode: TextMode::LexiconParaphrase,
            speech_mode: SpeechMode::SpeakerShift,
            paraphrase_table: BTreeMap::new(),
            use_lexicon_synonyms: true,
            paraphrase_prob: 0.5,
            dropout_p: 0.1,
            jitter_sigma: 0.0,
            shift_sigma: 0.5,
            seed: 0,
            regenerate_per_step: false,
            pairs: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must lie in [0, 0.5), got {}", self.dropout_p)));
        }
        if !(0.0..=1.0).contains(&self.paraphrase_prob) {
            return Err(Error::Config(format!(
                "paraphrase_prob must lie in [0, 1], got {}",
                self.paraphrase_prob
            )));
        }
        for (name, v) in [("jitter_sigma", self.jitter_sigma), ("shift_sigma", self.shift_sigma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn needs_pairs(&self) -> bool {
        self.text_mode == TextMode::Precomputed || self.speech_mode == SpeechMode::Precomputed
    }
}

/// The augmented counterpart of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub speech: Array2<f32>,
    pub tokens: Vec<u32>,
    pub transcript: String,
    pub text_features: Option<Array2<f32>>,
}

/// Token-level rewriting rules resolved against a lexicon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextAugmenter {
    mode: TextMode,
    synonyms: BTreeMap<u32, Vec<u32>>,
    keywords: BTreeSet<u32>,
    paraphrase_prob: f64,
    dropout_p: f64,
}

impl TextAugmenter {
    pub fn new(config: &AugmentConfig, lexicon: Option<&Lexicon>) -> Result<Self> {
        config.validate()?;
        let mut synonyms: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let keywords: BTreeSet<u32> = lexicon.map(|l| l.keywords.iter().copied().collect()).unwrap_or_default();
        if let Some(lex) = lexicon {
            if config.use_lexicon_synonyms {
                for &(a, b) in &lex.synonyms {
                    synonyms.entry(a).or_default().push(b);
                    synonyms.entry(b).or_default().push(a);
                }
            }
            for (from, to) in &config.paraphrase_table {
                let find = |w: &str| {
                    lex.words
                        .iter()
                        .position(|x| x == w)
                        .map(|i| i as u32)
                        .ok_or_else(|| Error::Config(format!("paraphrase word `{w}` is not in the lexicon")))
                };
                synonyms.entry(find(from)?).or_default().push(find(to)?);
            }
        } else if !config.paraphrase_table.is_empty() {
            return Err(Error::Config("a paraphrase table needs a dataset lexicon".into()));
        }
        for (from, tos) in &synonyms {
            if keywords.contains(from) || tos.iter().any(|t| keywords.contains(t)) {
                return Err(Error::Config(
                    "paraphrase table must not map emotion keywords".into(),
                ));
            }
        }
        for tos in synonyms.values_mut() {
            tos.sort_unstable();
            tos.dedup();
        }
        Ok(Self {
            mode: config.text_mode,
            synonyms,
            keywords,
            paraphrase_prob: config.paraphrase_prob,
            dropout_p: config.dropout_p,
        })
    }

    /// Rewrites `tokens`. Keywords are never dropped or remapped and the
    /// length changes by at most a quarter.
    pub fn augment(&self, tokens: &[u32], rng: &mut ChaCha8Rng) -> Vec<u32> {
        match self.mode {
            TextMode::Precomputed => tokens.to_vec(),
            TextMode::LexiconParaphrase => tokens
                .iter()
                .map(|&t| match self.synonyms.get(&t) {
                    Some(alts) if !self.keywords.contains(&t) && rng.random_bool(self.paraphrase_prob) => {
                        *alts.choose(rng).unwrap()
                    }
                    _ => t,
                })
                .collect(),
            TextMode::TokenDropout => {
                let budget = tokens.len() / 4;
                let mut dropped = 0;
                let mut out = Vec::with_capacity(tokens.len());
                for &t in tokens {
                    let drop = !self.keywords.contains(&t) && dropped < budget && rng.random_bool(self.dropout_p);
                    if drop {
                        dropped += 1;
                    } else {
                        out.push(t);
                    }
                }
                out
            }
        }
    }
}

/// Speakers available as augmentation targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeakerPool {
    /// Known additive offsets, keyed by speaker.
    pub offsets: BTreeMap<u32, Vec<f32>>,
    /// Speakers that produced at least one utterance of each class.
    pub by_label: BTreeMap<usize, Vec<u32>>,
    pub speakers: Vec<u32>,
}

impl SpeakerPool {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let mut by_label: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
        for u in &dataset.utterances {
            by_label.entry(u.label().index()).or_default().insert(u.speaker_id);
        }
        Self {
            offsets: dataset.meta.speaker_offsets.clone(),
            by_label: by_label.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
            speakers: dataset.speakers(),
        }
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    /// A different speaker, preferring ones who expressed the same label.
    pub fn sample_target(&self, source: u32, label: usize, rng: &mut ChaCha8Rng) -> Result<u32> {
        if self.speakers.len() < 2 {
            return Err(Error::Augmentation(format!(
                "speaker swap needs at least 2 speakers, pool has {}",
                self.speakers.len()
            )));
        }
        let same: Vec<u32> = self
            .by_label
            .get(&label)
            .map(|v| v.iter().copied().filter(|&s| s != source).collect())
            .unwrap_or_default();
        if let Some(&s) = same.choose(rng) {
            return Ok(s);
        }
        let others: Vec<u32> = self.speakers.iter().copied().filter(|&s| s != source).collect();
        Ok(*others.choose(rng).unwrap())
    }
}

/// Re-voices `frames` as `target`. With known offsets the source offset is
/// swapped for the target one; otherwise a random constant offset is added.
pub fn augment_speech_as(
    frames: &Array2<f32>,
    source: u32,
    target: u32,
    pool: &SpeakerPool,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    let d = frames.ncols();
    let mut out = frames.to_owned();
    if config.speech_mode == SpeechMode::SpeakerShift && source != target {
        let delta: Vec<f64> = match (pool.offsets.get(&source), pool.offsets.get(&target)) {
            (Some(a), Some(b)) if a.len() == d && b.len() == d => {
                a.iter().zip(b).map(|(a, b)| *b as f64 - *a as f64).collect()
            }
            _ => {
                let n = Normal::new(0.0, config.shift_sigma).map_err(|e| Error::Augmentation(e.to_string()))?;
                (0..d).map(|_| n.sample(rng)).collect()
            }
        };
        for mut row in out.rows_mut() {
            for (v, dv) in row.iter_mut().zip(&delta) {
                *v = (*v as f64 + dv) as f32;
            }
        }
    }
    if config.jitter_sigma > 0.0 {
        let n = Normal::new(0.0, config.jitter_sigma).map_err(|e| Error::Augmentation(e.to_string()))?;
        out.mapv_inplace(|v| (v as f64 + n.sample(rng)) as f32);
    }
    Ok(out)
}

/// Speech view of an utterance spoken by `source` with class `label`.
pub fn augment_speech(
    frames: &Array2<f32>,
    source: u32,
    label: usize,
    pool: &SpeakerPool,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    let target = match config.speech_mode {
        SpeechMode::SpeakerShift => pool.sample_target(source, label, rng)?,
        _ => {
            if pool.len() < 2 {
                return Err(Error::Augmentation(format!(
                    "speech augmentation needs at least 2 speakers, pool has {}",
                    pool.len()
                )));
            }
            source
        }
    };
    augment_speech_as(frames, source, target, pool, config, rng)
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Rng for one utterance, independent of processing order.
pub fn utterance_rng(seed: u64, epoch: u64, step: u64, id: &str) -> ChaCha8Rng {
    let h = fnv1a(
        seed.to_le_bytes()
            .into_iter()
            .chain(epoch.to_le_bytes())
            .chain(step.to_le_bytes())
            .chain(id.bytes()),
        0xcbf2_9ce4_8422_2325,
    );
    ChaCha8Rng::seed_from_u64(h)
}

/// Builds augmented views for utterances in dataset order.
pub struct Augmenter {
    pub config: AugmentConfig,
    text: TextAugmenter,
    pool: SpeakerPool,
    lexicon: Option<Lexicon>,
    pairs: Option<BTreeMap<String, AugmentedView>>,
}

impl Augmenter {
    /// `pool_source` supplies the speakers eligible as swap targets
    /// (normally the training split).
    pub fn new(
        config: &AugmentConfig,
        pool_source: &Dataset,
        pairs: Option<BTreeMap<String, AugmentedView>>,
    ) -> Result<Self> {
        let text = TextAugmenter::new(config, pool_source.meta.lexicon.as_ref())?;
        if config.needs_pairs() && pairs.is_none() {
            return Err(Error::Config("precomputed augmentation needs a pair manifest".into()));
        }
        Ok(Self {
            config: config.clone(),
            text,
            pool: SpeakerPool::from_dataset(pool_source),
            lexicon: pool_source.meta.lexicon.clone(),
            pairs,
        })
    }

    pub fn pool(&self) -> &SpeakerPool {
        &self.pool
    }

    pub fn view(&self, utt: &Utterance, epoch: u64, step: u64) -> Result<AugmentedView> {
        let mut rng = utterance_rng(self.config.seed, epoch, step, &utt.id);
        let pair = match &self.pairs {
            Some(p) => Some(
                p.get(&utt.id)
                    .ok_or_else(|| Error::MissingPairs(vec![utt.id.clone()]))?,
            ),
            None => None,
        };
        let (tokens, transcript) = match (self.config.text_mode, pair) {
            (TextMode::Precomputed, Some(p)) => (p.tokens.clone(), p.transcript.clone()),
            _ => {
                let t = self.text.augment(&utt.tokens, &mut rng);
                let transcript = match &self.lexicon {
                    Some(l) => l.render(&t),
                    None => utt.transcript.clone(),
                };
                (t, transcript)
            }
        };
        let speech = match (self.config.speech_mode, pair) {
            (SpeechMode::Precomputed, Some(p)) => p.speech.clone(),
            _ => augment_speech(
                &utt.speech,
                utt.speaker_id,
                utt.label().index(),
                &self.pool,
                &self.config,
                &mut rng,
            )?,
        };
        // Token features only survive when the token sequence does.
        let text_features = match pair {
            Some(p) if p.text_features.is_some() => p.text_features.clone(),
            _ if tokens == utt.tokens => utt.text_features.clone(),
            _ => None,
        };
        Ok(AugmentedView {
            speech,
            tokens,
            transcript,
            text_features,
        })
    }

    pub fn views(&self, utterances: &[&Utterance], epoch: u64, step: u64) -> Result<Vec<AugmentedView>> {
        utterances.par_iter().map(|u| self.view(u, epoch, step)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairEntry {
    id: String,
    features_aug: String,
    tokens_aug: Vec<u32>,
    transcript_aug: String,
}

/// Reads a pair manifest (JSON lines of `{id, features_aug, tokens_aug,
/// transcript_aug}`, feature paths relative to the manifest) and checks it
/// covers every utterance of `base`.
pub fn load_precomputed_pairs(manifest_path: &Path, base: &Dataset) -> Result<BTreeMap<String, AugmentedView>> {
    let file = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let known: BTreeSet<&str> = base.utterances.iter().map(|u| u.id.as_str()).collect();
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PairEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if !known.contains(entry.id.as_str()) {
            return Err(Error::Manifest {
                line: i + 1,
                reason: format!("pair id `{}` is not in the base dataset", entry.id),
            });
        }
        if entry.tokens_aug.is_empty() {
            return Err(Error::Manifest {
                line: i + 1,
                reason: format!("pair `{}` has no tokens", entry.id),
            });
        }
        let speech = read_blob(&dir.join(&entry.features_aug), &entry.id)?;
        if speech.ncols() != base.meta.d_a {
            return Err(Error::Shape(format!(
                "pair `{}` has feature width {}, base dataset has {}",
                entry.id,
                speech.ncols(),
                base.meta.d_a
            )));
        }
        if out.contains_key(&entry.id) {
            return Err(Error::Manifest {
                line: i + 1,
                reason: format!("duplicate pair id `{}`", entry.id),
            });
        }
        out.insert(
            entry.id,
            AugmentedView {
                speech,
                tokens: entry.tokens_aug,
                transcript: entry.transcript_aug,
                text_features: None,
            },
        );
    }
    let missing: Vec<String> = base
        .utterances
        .iter()
        .filter(|u| !out.contains_key(&u.id))
        .map(|u| u.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPairs(missing));
    }
    Ok(out)
}

/// Writes views as a pair manifest plus blobs under `dir`; returns the
/// manifest path.
pub fn write_precomputed_pairs(dir: &Path, views: &BTreeMap<String, AugmentedView>) -> Result<PathBuf> {
    let blobs = dir.join("features_aug");
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let path = dir.join("pairs.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for (id, v) in views {
        let rel = format!("features_aug/{id}.bin");
        write_blob(&dir.join(&rel), &v.speech)?;
        let entry = PairEntry {
            id: id.clone(),
            features_aug: rel,
            tokens_aug: v.tokens.clone(),
            transcript_aug: v.transcript.clone(),
        };
        let line = serde_json::to_string(&entry).expect("serializable");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(path)
}
