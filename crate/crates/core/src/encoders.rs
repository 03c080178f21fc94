//! Stand-in contextual encoders producing the speech sequence `A` (J'×d)
//! and token sequence `T` (M×d) consumed by the fusion module.
//!
//! Speech: one strided 1-D convolution over frames followed by GELU and a
//! stack of self-attention layers. Text: embedding lookup plus sinusoidal
//! positions followed by a stack of self-attention layers. Either side can
//! be replaced by a passthrough of precomputed features.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::mmi::CmeBlockParams;
use crate::nn::{check_finite, to_f64, Mode};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechEncoderParams {
    pub kernel: usize,
    pub stride: usize,
    pub d_in: usize,
    pub d: usize,
    /// (kernel·d_in)×d
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub layers: Vec<CmeBlockParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpeechEncoder {
    Conv(SpeechEncoderParams),
    /// Frames are already J×d encoder outputs.
    Passthrough,
}

pub struct SpeechEncoderSpec {
    pub d_in: usize,
    pub d: usize,
    pub kernel: usize,
    pub stride: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl SpeechEncoderParams {
    pub fn init(store: &mut ParamStore, spec: &SpeechEncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.stride == 0 || spec.kernel < spec.stride {
            return Err(Error::Config(format!(
                "conv kernel ({}) must be at least the stride ({}) and the stride positive",
                spec.kernel, spec.stride
            )));
        }
        let fan_in = spec.kernel * spec.d_in;
        let conv_w = store.add_uniform("speech.conv.w", (fan_in, spec.d), fan_in, true, rng);
        let conv_b = store.add_zeros("speech.conv.b", (1, spec.d), true);
        let layers = (0..spec.layers)
            .map(|i| {
                CmeBlockParams::init(
                    store,
                    &format!("speech.layer{i}"),
                    spec.d,
                    spec.heads,
                    spec.ffn_mult,
                    spec.dropout,
                    true,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kernel: spec.kernel,
            stride: spec.stride,
            d_in: spec.d_in,
            d: spec.d,
            conv_w,
            conv_b,
            layers,
        })
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }

    /// Unfolds frames into one row per output step: row t holds frames
    /// `t*stride .. t*stride + kernel`, zero-padded past the end.
    pub fn unfold(&self, frames: &Mat) -> Mat {
        let j = frames.nrows();
        let out = self.output_frames(j);
        let mut cols = Mat::zeros((out, self.kernel * self.d_in));
        for t in 0..out {
            for u in 0..self.kernel {
                let src = t * self.stride + u;
                if src >= j {
                    break;
                }
                cols.slice_mut(ndarray::s![t, u * self.d_in..(u + 1) * self.d_in])
                    .assign(&frames.row(src));
            }
        }
        cols
    }
}

impl SpeechEncoder {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &Array2<f32>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let x = to_f64(frames);
        check_finite(&x, "speech frames")?;
        match self {
            SpeechEncoder::Passthrough => {
                if x.nrows() == 0 {
                    return Err(Error::Shape("speech sequence is empty".into()));
                }
                Ok(tape.constant(x))
            }
            SpeechEncoder::Conv(p) => {
                if x.ncols() != p.d_in {
                    return Err(Error::Shape(format!(
                        "speech encoder expects {} feature channels, got {}",
                        p.d_in,
                        x.ncols()
                    )));
                }
                if x.nrows() < p.stride {
                    return Err(Error::Shape(format!(
                        "speech input has {} frames, fewer than the stride {}",
                        x.nrows(),
                        p.stride
                    )));
                }
                let cols = tape.constant(p.unfold(&x));
                let w = tape.param(store, p.conv_w);
                let b = tape.param(store, p.conv_b);
                let h = tape.matmul(cols, w);
                let h = tape.add_row(h, b);
                let mut h = tape.gelu(h);
                for layer in &p.layers {
                    h = layer.forward(tape, store, h, h, mode)?.0;
                }
                Ok(h)
            }
        }
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        match self {
            SpeechEncoder::Passthrough => frames,
            SpeechEncoder::Conv(p) => p.output_frames(frames),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    pub vocab_size: usize,
    pub d: usize,
    /// vocab×d
    pub embedding: ParamId,
    pub layers: Vec<CmeBlockParams>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextEncoder {
    Embedding(TextEncoderParams),
    /// Uses the utterance's precomputed M×d token features.
    Passthrough,
}

pub struct TextEncoderSpec {
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub frozen: bool,
}

/// Standard sinusoidal position table, `n`×`d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Mat {
    Mat::from_shape_fn((n, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl TextEncoderParams {
    pub fn init(store: &mut ParamStore, spec: &TextEncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let trainable = !spec.frozen;
        let embedding = store.add_uniform("text.embedding", (spec.vocab_size, spec.d), spec.d, trainable, rng);
        let layers = (0..spec.layers)
            .map(|i| {
                CmeBlockParams::init(
                    store,
                    &format!("text.layer{i}"),
                    spec.d,
                    spec.heads,
                    spec.ffn_mult,
                    spec.dropout,
                    trainable,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab_size: spec.vocab_size,
            d: spec.d,
            embedding,
            layers,
            frozen: spec.frozen,
        })
    }

    /// Rows of the embedding table for `tokens`, plus positions, as a
    /// differentiable gather (one-hot selector times the table).
    fn embed(&self, tape: &mut Tape, store: &ParamStore, tokens: &[u32]) -> Result<Var> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let mut onehot = Mat::zeros((tokens.len(), self.vocab_size));
        for (i, &t) in tokens.iter().enumerate() {
            onehot[[i, t as usize]] = 1.0;
        }
        let sel = tape.constant(onehot);
        let table = tape.param(store, self.embedding);
        let e = tape.matmul(sel, table);
        let pos = tape.constant(sinusoidal_positions(tokens.len(), self.d));
        Ok(tape.add(e, pos))
    }
}

impl TextEncoder {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[u32],
        text_features: Option<&Array2<f32>>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Shape("token sequence is empty".into()));
        }
        match self {
            TextEncoder::Passthrough => {
                let tf = text_features
                    .ok_or_else(|| Error::Shape("text passthrough needs precomputed token features".into()))?;
                let x = to_f64(tf);
                check_finite(&x, "text features")?;
                Ok(tape.constant(x))
            }
            TextEncoder::Embedding(p) => {
                let mut h = p.embed(tape, store, tokens)?;
                for layer in &p.layers {
                    h = layer.forward(tape, store, h, h, mode)?.0;
                }
                Ok(h)
            }
        }
    }
}

pub fn encode_speech(encoder: &SpeechEncoder, store: &ParamStore, frames: &Array2<f32>) -> Result<Mat> {
    let mut tape = Tape::new();
    let v = encoder.forward(&mut tape, store, frames, &mut Mode::Eval)?;
    Ok(tape.value(v).clone())
}

pub fn encode_text(encoder: &TextEncoder, store: &ParamStore, tokens: &[u32]) -> Result<Mat> {
    let mut tape = Tape::new();
    let v = encoder.forward(&mut tape, store, tokens, None, &mut Mode::Eval)?;
    Ok(tape.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff_check;
    use rand::{Rng, SeedableRng};

    fn speech(layers: usize, seed: u64) -> (ParamStore, SpeechEncoder) {
        let mut store = ParamStore::new();
        let spec = SpeechEncoderSpec {
            d_in: 3,
            d: 4,
            kernel: 3,
            stride: 2,
            layers,
            heads: 2,
            ffn_mult: 4,
            dropout: 0.0,
        };
        let p = SpeechEncoderParams::init(&mut store, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, SpeechEncoder::Conv(p))
    }

    fn text(layers: usize, frozen: bool) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let spec = TextEncoderSpec {
            vocab_size: 6,
            d: 4,
            layers,
            heads: 2,
            ffn_mult: 4,
            dropout: 0.0,
            frozen,
        };
        let p = TextEncoderParams::init(&mut store, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (store, TextEncoder::Embedding(p))
    }

    fn frames(j: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((j, 3), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn output_length_is_ceil_division() {
        let (store, enc) = speech(1, 1);
        for j in 2..12 {
            let a = encode_speech(&enc, &store, &frames(j, j as u64)).unwrap();
            assert_eq!(a.dim(), (j.div_ceil(2), 4));
            assert!(a.iter().all(|v| v.is_finite()));
        }
        assert_eq!(encode_speech(&enc, &store, &frames(2, 0)).unwrap().nrows(), 1);
        assert!(matches!(encode_speech(&enc, &store, &frames(1, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_frames_are_deterministic() {
        let (store, enc) = speech(1, 2);
        let z = Array2::<f32>::zeros((6, 3));
        let a = encode_speech(&enc, &store, &z).unwrap();
        let b = encode_speech(&enc, &store, &z).unwrap();
        assert_eq!(a, b);
        let (store0, enc0) = speech(0, 2);
        assert!(encode_speech(&enc0, &store0, &z).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let (store, enc) = speech(0, 3);
        let mut f = frames(4, 1);
        f[[2, 1]] = f32::NAN;
        assert!(matches!(encode_speech(&enc, &store, &f), Err(Error::NumericInput(_))));
    }

    // Oracle: with no attention layers, output row t sees frames
    // t*stride .. t*stride+kernel only.
    #[test]
    fn perturbation_stays_within_receptive_field() {
        let (store, enc) = speech(0, 4);
        let base = frames(11, 5);
        let a0 = encode_speech(&enc, &store, &base).unwrap();
        for f in 0..11 {
            let mut p = base.clone();
            p[[f, 0]] += 0.5;
            let a1 = encode_speech(&enc, &store, &p).unwrap();
            for t in 0..a0.nrows() {
                let inside = t * 2 <= f && f < t * 2 + 3;
                let changed = (0..4).any(|c| a0[[t, c]] != a1[[t, c]]);
                assert_eq!(changed, inside, "frame {f}, row {t}");
            }
        }
    }

    #[test]
    fn text_without_layers_is_embedding_plus_position() {
        let (store, enc) = text(0, true);
        let TextEncoder::Embedding(p) = &enc else { unreachable!() };
        let t = encode_text(&enc, &store, &[2, 2, 5]).unwrap();
        let pos = sinusoidal_positions(3, 4);
        let table = store.value(p.embedding);
        for c in 0..4 {
            assert_eq!(t[[0, c]], table[[2, c]] + pos[[0, c]]);
            assert!(((t[[1, c]] - t[[0, c]]) - (pos[[1, c]] - pos[[0, c]])).abs() < 1e-15);
        }
        assert!(matches!(encode_text(&enc, &store, &[6]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn text_layers_mix_context() {
        let (store, enc) = text(1, true);
        let a = encode_text(&enc, &store, &[1, 2, 3]).unwrap();
        let b = encode_text(&enc, &store, &[1, 2, 4]).unwrap();
        assert!((0..4).any(|c| a[[0, c]] != b[[0, c]]));
        let (store0, enc0) = text(0, true);
        let a = encode_text(&enc0, &store0, &[1, 2, 3]).unwrap();
        let b = encode_text(&enc0, &store0, &[1, 2, 4]).unwrap();
        assert_eq!(a.row(0), b.row(0));
    }

    #[test]
    fn frozen_text_encoder_is_not_trainable() {
        let (store, _) = text(1, true);
        assert_eq!(store.trainable_ids().count(), 0);
        let (store, _) = text(1, false);
        assert_eq!(store.trainable_ids().count(), store.len());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut sstore, senc) = speech(1, 6);
        let f = frames(7, 7);
        let w = Mat::from_shape_fn((4, 1), |(i, _)| i as f64 - 1.5);
        let check = |s: &ParamStore| {
            let mut tape = Tape::new();
            let a = senc.forward(&mut tape, s, &f, &mut Mode::Eval)?;
            let wv = tape.constant(w.clone());
            let m = tape.col_max(a);
            let root = tape.matmul(m, wv);
            Ok((tape.scalar(root), tape.backward(root)))
        };
        let report = finite_diff_check(check, &mut sstore, 1e-3, 1e-4).unwrap();
        assert!(report.passed(), "{report}");

        let (mut tstore, tenc) = text(1, false);
        let check = |s: &ParamStore| {
            let mut tape = Tape::new();
            let t = tenc.forward(&mut tape, s, &[1, 4, 2], None, &mut Mode::Eval)?;
            let wv = tape.constant(w.clone());
            let m = tape.col_max(t);
            let root = tape.matmul(m, wv);
            Ok((tape.scalar(root), tape.backward(root)))
        };
        let report = finite_diff_check(check, &mut tstore, 1e-3, 1e-4).unwrap();
        assert!(report.passed(), "{report}");
    }
}
