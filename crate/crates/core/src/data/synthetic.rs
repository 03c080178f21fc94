use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Emotion, Lexicon, Utterance, NUM_CLASSES};
use crate::error::{Error, Result};

const KEYWORDS: [&str; NUM_CLASSES] = ["GLAD", "MAD", "CALM", "GLUM"];
const FILLERS: [&str; 24] = [
    "THE", "A", "WE", "GO", "SEE", "IT", "IS", "ON", "TO", "DO", "YOU", "NOW", "SO", "AT", "IN",
    "LOOK", "WALK", "TALK", "SAY", "HOME", "HOUSE", "TODAY", "DAY", "WAY",
];
const SYNONYMS: [(&str, &str); 5] = [
    ("SEE", "LOOK"),
    ("GO", "WALK"),
    ("TALK", "SAY"),
    ("HOME", "HOUSE"),
    ("NOW", "TODAY"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_utterances: usize,
    pub n_speakers: u32,
    pub n_sessions: u32,
    pub d_a: usize,
    /// Probability that an utterance carries its class keyword.
    pub class_signal_strength: f64,
    pub seed: u64,
    pub template_amplitude: f64,
    pub speaker_offset_scale: f64,
    pub noise_sigma: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Frames emitted per transcript symbol; matches the speech encoder
    /// stride so CTC alignments stay feasible after downsampling.
    pub frames_per_symbol: usize,
    /// Upper bound on extra frames appended beyond the minimum.
    pub frame_slack: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_utterances: 200,
            n_speakers: 10,
            n_sessions: 5,
            d_a: 16,
            class_signal_strength: 0.9,
            seed: 7,
            template_amplitude: 1.0,
            speaker_offset_scale: 0.5,
            noise_sigma: 0.5,
            min_words: 2,
            max_words: 4,
            frames_per_symbol: 2,
            frame_slack: 4,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.d_a < 4 {
            return Err(Error::Config(format!("d_a must be at least 4, got {}", self.d_a)));
        }
        if self.n_sessions < 2 {
            return Err(Error::Config("n_sessions must be at least 2".into()));
        }
        if self.n_speakers < 2 {
            return Err(Error::Config("n_speakers must be at least 2".into()));
        }
        if self.n_utterances < 4 * self.n_sessions as usize {
            return Err(Error::Config(format!(
                "n_utterances ({}) must be at least 4 × n_sessions ({})",
                self.n_utterances, self.n_sessions
            )));
        }
        if !(0.0..=1.0).contains(&self.class_signal_strength) {
            return Err(Error::Config("class_signal_strength must lie in [0, 1]".into()));
        }
        if self.min_words == 0 || self.max_words < self.min_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        if self.frames_per_symbol == 0 {
            return Err(Error::Config("frames_per_symbol must be positive".into()));
        }
        Ok(())
    }
}

pub fn synthetic_lexicon() -> Lexicon {
    let words: Vec<String> = KEYWORDS.iter().chain(FILLERS.iter()).map(|w| w.to_string()).collect();
    let id = |w: &str| words.iter().position(|x| x == w).unwrap() as u32;
    let synonyms = SYNONYMS.iter().map(|(a, b)| (id(a), id(b))).collect();
    Lexicon {
        keywords: (0..NUM_CLASSES as u32).collect(),
        synonyms,
        words,
    }
}

/// Per-class feature-space template: a sinusoid whose frequency and phase
/// depend on the class.
pub(crate) fn class_template(class: usize, d_a: usize, amplitude: f64) -> Vec<f64> {
    (0..d_a)
        .map(|k| {
            let freq = (class + 1) as f64;
            amplitude * (2.0 * PI * freq * k as f64 / d_a as f64 + class as f64 * PI / 3.0).sin()
        })
        .collect()
}

fn adjacent_repeats(s: &str) -> usize {
    s.as_bytes().windows(2).filter(|w| w[0] == w[1]).count()
}

/// Deterministic synthetic corpus: speech = class template + speaker offset +
/// Gaussian noise; text = filler words plus, with probability
/// `class_signal_strength`, the class keyword.
pub fn generate_synthetic_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lexicon = synthetic_lexicon();
    let d_a = config.d_a;

    let offset_dist = Normal::new(0.0, config.speaker_offset_scale.max(0.0))
        .map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut speaker_offsets = BTreeMap::new();
    for s in 0..config.n_speakers {
        let v: Vec<f32> = (0..d_a).map(|_| offset_dist.sample(&mut rng) as f32).collect();
        speaker_offsets.insert(s, v);
    }
    // Speakers belong to one session each when there are enough of them.
    let session_speakers: Vec<Vec<u32>> = (0..config.n_sessions)
        .map(|sess| {
            if config.n_speakers >= config.n_sessions {
                (0..config.n_speakers).filter(|s| s % config.n_sessions == sess).collect()
            } else {
                (0..config.n_speakers).collect()
            }
        })
        .collect();

    let templates: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|c| class_template(c, d_a, config.template_amplitude))
        .collect();
    let fillers: Vec<u32> = (NUM_CLASSES as u32..lexicon.words.len() as u32).collect();

    let mut utterances = Vec::with_capacity(config.n_utterances);
    for i in 0..config.n_utterances {
        let session_idx = i % config.n_sessions as usize;
        let class = (i / config.n_sessions as usize) % NUM_CLASSES;
        let speaker = *session_speakers[session_idx].choose(&mut rng).unwrap();
        let raw_label = match class {
            0 => {
                if rng.random_bool(0.5) {
                    Emotion::Happy
                } else {
                    Emotion::Excited
                }
            }
            1 => Emotion::Angry,
            2 => Emotion::Neutral,
            _ => Emotion::Sad,
        };

        let n_words = rng.random_range(config.min_words..=config.max_words);
        let mut tokens: Vec<u32> = (0..n_words).map(|_| *fillers.choose(&mut rng).unwrap()).collect();
        if rng.random_bool(config.class_signal_strength) {
            let pos = rng.random_range(0..n_words);
            tokens[pos] = lexicon.keywords[class];
        }
        let transcript = lexicon.render(&tokens);

        let min_frames = config.frames_per_symbol * (transcript.len() + adjacent_repeats(&transcript));
        let n_frames = min_frames + rng.random_range(0..=config.frame_slack);
        let offset = &speaker_offsets[&speaker];
        let template = &templates[class];
        let mut speech = Array2::<f32>::zeros((n_frames, d_a));
        for t in 0..n_frames {
            for k in 0..d_a {
                let v = template[k] + offset[k] as f64 + noise.sample(&mut rng);
                speech[[t, k]] = v as f32;
            }
        }

        utterances.push(Utterance {
            id: format!("ses{}_utt{:04}", session_idx + 1, i),
            speech,
            tokens,
            transcript,
            raw_label,
            speaker_id: speaker,
            session_id: session_idx as u32 + 1,
            text_features: None,
        });
    }

    let dataset = Dataset {
        meta: DatasetMeta {
            d_a,
            token_vocab_size: lexicon.words.len(),
            n_sessions: config.n_sessions,
            lexicon: Some(lexicon),
            speaker_offsets,
        },
        utterances,
    };
    dataset.validate()?;
    Ok(dataset)
}
