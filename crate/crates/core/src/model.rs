//! The full network: encoders, fusion, classifier and CTC head, plus the
//! batch objective combining all four losses.

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentedView;
use crate::autograd::{softmax_rows, Gradients, Mat, Tape, Var};
use crate::data::{Utterance, NUM_CLASSES};
use crate::encoders::{
    SpeechEncoder, SpeechEncoderParams, SpeechEncoderSpec, TextEncoder, TextEncoderParams, TextEncoderSpec,
};
use crate::error::{Error, Result};
use crate::losses::{
    acl_loss_and_grad, cross_entropy_from_logits, ctc_loss_and_grad, ctc_min_frames, scl_loss_and_grad,
    ClassifierParams, CtcHeadParams, CtcVocab, LossComponents, LossConfig,
};
use crate::mmi::{fuse_on_tape, FusionOutput, FusionVars, MmiParams};
use crate::nn::Mode;
use crate::params::{ParamStore, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Speech feature channels.
    pub d_a: usize,
    pub token_vocab_size: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub speech_layers: usize,
    pub text_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub freeze_text: bool,
    pub speech_passthrough: bool,
    pub text_passthrough: bool,
    /// CTC characters in symbol order (blank excluded).
    pub charset: String,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            d_a: 16,
            token_vocab_size: 28,
            conv_kernel: 3,
            conv_stride: 2,
            speech_layers: 1,
            text_layers: 1,
            ffn_mult: 4,
            dropout: 0.1,
            freeze_text: true,
            speech_passthrough: false,
            text_passthrough: false,
            charset: CtcVocab::default().chars.into_iter().collect(),
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// Full-width profile (d = 768, 8 heads).
    pub fn full_scale() -> Self {
        Self {
            d: 768,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn vocab(&self) -> Result<CtcVocab> {
        CtcVocab::new(self.charset.chars().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("heads ({}) must divide d ({})", self.heads, self.d)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.speech_passthrough && self.d_a != self.d {
            return Err(Error::Config(format!(
                "speech passthrough needs d_a == d, got {} and {}",
                self.d_a, self.d
            )));
        }
        if self.token_vocab_size == 0 && !self.text_passthrough {
            return Err(Error::Config("token_vocab_size must be positive".into()));
        }
        self.vocab()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub speech: SpeechEncoder,
    pub text: TextEncoder,
    pub mmi: MmiParams,
    pub classifier: ClassifierParams,
    pub ctc_head: CtcHeadParams,
}

/// Tape handles for one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceVars {
    pub a: Var,
    pub t: Var,
    pub fusion: FusionVars,
    pub logits: Var,
    pub ctc_log_probs: Option<Var>,
}

/// Materialised forward pass, for inspection.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub a: Mat,
    pub t: Mat,
    pub fusion: FusionOutput,
    pub probs: [f64; NUM_CLASSES],
    pub ctc_log_probs: Mat,
}

/// One element of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub utterance: &'a Utterance,
    pub ctc_target: &'a [usize],
    pub augmented: Option<&'a AugmentedView>,
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub components: LossComponents,
    pub total: f64,
    pub grads: Gradients,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let speech = if config.speech_passthrough {
            SpeechEncoder::Passthrough
        } else {
            SpeechEncoder::Conv(SpeechEncoderParams::init(
                &mut store,
                &SpeechEncoderSpec {
                    d_in: config.d_a,
                    d: config.d,
                    kernel: config.conv_kernel,
                    stride: config.conv_stride,
                    layers: config.speech_layers,
                    heads: config.heads,
                    ffn_mult: config.ffn_mult,
                    dropout: config.dropout,
                },
                &mut rng,
            )?)
        };
        let text = if config.text_passthrough {
            TextEncoder::Passthrough
        } else {
            TextEncoder::Embedding(TextEncoderParams::init(
                &mut store,
                &TextEncoderSpec {
                    vocab_size: config.token_vocab_size,
                    d: config.d,
                    layers: config.text_layers,
                    heads: config.heads,
                    ffn_mult: config.ffn_mult,
                    dropout: config.dropout,
                    frozen: config.freeze_text,
                },
                &mut rng,
            )?)
        };
        let mmi = MmiParams::init(&mut store, config.d, config.heads, config.ffn_mult, config.dropout, &mut rng)?;
        let classifier = ClassifierParams::init(&mut store, config.d, &mut rng);
        let ctc_head = CtcHeadParams::init(&mut store, config.d, config.vocab()?, &mut rng);
        store.round_to(config.precision);
        Ok(Self {
            config,
            store,
            speech,
            text,
            mmi,
            classifier,
            ctc_head,
        })
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        self.speech.output_frames(frames)
    }

    /// Encodes a transcript as CTC symbols and checks it fits in the
    /// downsampled frame count.
    pub fn ctc_target(&self, utt: &Utterance) -> Result<Vec<usize>> {
        let target = self.ctc_head.vocab.encode(&utt.transcript).map_err(|e| match e {
            Error::Vocabulary(m) => Error::Vocabulary(format!("utterance `{}`: {m}", utt.id)),
            other => other,
        })?;
        let frames = self.output_frames(utt.num_frames());
        let needed = ctc_min_frames(&target);
        if frames < needed {
            return Err(Error::CtcInfeasible {
                id: Some(utt.id.clone()),
                frames,
                target_len: target.len(),
                repeats: needed - target.len(),
            });
        }
        Ok(target)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        speech: &Array2<f32>,
        tokens: &[u32],
        text_features: Option<&Array2<f32>>,
        with_ctc: bool,
        mode: &mut Mode<'_>,
    ) -> Result<UtteranceVars> {
        let a = self.speech.forward(tape, store, speech, mode)?;
        let t = self.text.forward(tape, store, tokens, text_features, mode)?;
        let fusion = fuse_on_tape(&self.mmi, tape, store, a, t, mode)?;
        let logits = self.classifier.logits(tape, store, fusion.pooled)?;
        let ctc_log_probs = if with_ctc {
            Some(self.ctc_head.log_probs(tape, store, a)?)
        } else {
            None
        };
        Ok(UtteranceVars {
            a,
            t,
            fusion,
            logits,
            ctc_log_probs,
        })
    }

    pub fn trace(&self, utt: &Utterance) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let v = self.forward_on_tape(
            &mut tape,
            &self.store,
            &utt.speech,
            &utt.tokens,
            utt.text_features.as_ref(),
            true,
            &mut Mode::Eval,
        )?;
        let probs_m = softmax_rows(tape.value(v.logits));
        let mut probs = [0.0; NUM_CLASSES];
        for (o, p) in probs.iter_mut().zip(probs_m.row(0).iter()) {
            *o = *p;
        }
        Ok(ForwardTrace {
            a: tape.value(v.a).clone(),
            t: tape.value(v.t).clone(),
            fusion: FusionOutput::from_tape(&tape, &v.fusion),
            probs,
            ctc_log_probs: tape.value(v.ctc_log_probs.unwrap()).clone(),
        })
    }

    /// Class probabilities in eval mode.
    pub fn predict_probs(&self, utt: &Utterance) -> Result<[f64; NUM_CLASSES]> {
        let mut tape = Tape::new();
        let v = self.forward_on_tape(
            &mut tape,
            &self.store,
            &utt.speech,
            &utt.tokens,
            utt.text_features.as_ref(),
            false,
            &mut Mode::Eval,
        )?;
        let probs_m = softmax_rows(tape.value(v.logits));
        let mut probs = [0.0; NUM_CLASSES];
        for (o, p) in probs.iter_mut().zip(probs_m.row(0).iter()) {
            *o = *p;
        }
        Ok(probs)
    }

    pub fn predict(&self, utt: &Utterance) -> Result<usize> {
        let p = self.predict_probs(utt)?;
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if p[i] > p[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Mean CE and CTC over the batch plus batch-level SCL and ACL, weighted
    /// by `config`. Terms with zero weight are neither computed nor part of
    /// the gradient.
    pub fn batch_loss(&self, items: &[BatchItem<'_>], config: &LossConfig, mode: &mut Mode<'_>) -> Result<BatchLoss> {
        self.batch_loss_with(&self.store, items, config, mode)
    }

    /// [`Model::batch_loss`] evaluated at an arbitrary parameter store with
    /// the same layout.
    pub fn batch_loss_with(
        &self,
        store: &ParamStore,
        items: &[BatchItem<'_>],
        config: &LossConfig,
        mode: &mut Mode<'_>,
    ) -> Result<BatchLoss> {
        if items.is_empty() {
            return Err(Error::BatchSize("empty batch".into()));
        }
        let with_ctc = config.alpha != 0.0;
        let with_scl = config.beta != 0.0 && items.len() >= 2;
        let with_acl = config.gamma != 0.0;

        let mut tape = Tape::new();
        let mut ce_terms = Vec::with_capacity(items.len());
        let mut ctc_terms = Vec::new();
        let mut pooled = Vec::with_capacity(items.len());
        let mut ce_sum = 0.0;
        let mut ctc_sum = 0.0;
        for item in items {
            let u = item.utterance;
            let v = self.forward_on_tape(
                &mut tape,
                store,
                &u.speech,
                &u.tokens,
                u.text_features.as_ref(),
                with_ctc,
                mode,
            )?;
            let (ce, g) = cross_entropy_from_logits(tape.value(v.logits), u.label().index())?;
            ce_sum += ce;
            ce_terms.push(tape.external_scalar(v.logits, ce, g));
            if let Some(lp) = v.ctc_log_probs {
                let (l, g) = ctc_loss_and_grad(tape.value(lp), item.ctc_target).map_err(|e| match e {
                    Error::CtcInfeasible {
                        frames,
                        target_len,
                        repeats,
                        ..
                    } => Error::CtcInfeasible {
                        id: Some(u.id.clone()),
                        frames,
                        target_len,
                        repeats,
                    },
                    other => other,
                })?;
                ctc_sum += l;
                ctc_terms.push(tape.external_scalar(lp, l, g));
            }
            pooled.push(v.fusion.pooled);
        }
        let n = items.len() as f64;
        let mut components = LossComponents {
            ce: ce_sum / n,
            ..Default::default()
        };
        let ce = tape.mean_scalars(&ce_terms);
        let ctc = if with_ctc {
            components.ctc = ctc_sum / n;
            Some(tape.mean_scalars(&ctc_terms))
        } else {
            None
        };

        let reps = tape.concat_rows(&pooled);
        let scl = if with_scl {
            let labels: Vec<usize> = items.iter().map(|i| i.utterance.label().index()).collect();
            let (l, g) = scl_loss_and_grad(tape.value(reps), &labels, config)?;
            components.scl = l;
            Some(tape.external_scalar(reps, l, g))
        } else {
            None
        };

        let acl = if with_acl {
            let mut aug_pooled = Vec::with_capacity(items.len());
            for item in items {
                let view = item.augmented.ok_or_else(|| {
                    Error::Config(format!(
                        "augmented contrastive loss needs an augmented view for `{}`",
                        item.utterance.id
                    ))
                })?;
                let v = self.forward_on_tape(
                    &mut tape,
                    store,
                    &view.speech,
                    &view.tokens,
                    view.text_features.as_ref(),
                    false,
                    mode,
                )?;
                aug_pooled.push(v.fusion.pooled);
            }
            let reps_aug = tape.concat_rows(&aug_pooled);
            let both = tape.concat_rows(&[reps, reps_aug]);
            let (l, gz, gw) = acl_loss_and_grad(tape.value(reps), tape.value(reps_aug), config)?;
            components.acl = l;
            let g = concatenate(Axis(0), &[gz.view(), gw.view()]).expect("same widths");
            Some(tape.external_scalar(both, l, g))
        } else {
            None
        };

        let mut terms = vec![(1.0, ce)];
        terms.extend(ctc.map(|v| (config.alpha, v)));
        terms.extend(scl.map(|v| (config.beta, v)));
        terms.extend(acl.map(|v| (config.gamma, v)));
        let root = tape.weighted_sum(&terms);
        let total = tape.scalar(root);
        if !total.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                step: 0,
                reason: format!("non-finite batch loss {total}"),
            });
        }
        let grads = tape.backward(root);
        Ok(BatchLoss {
            components,
            total,
            grads,
        })
    }
}

/// Rows `start..start+len` of a matrix; used by tests that slice batches.
pub fn rows(m: &Mat, start: usize, len: usize) -> Mat {
    m.slice(s![start..start + len, ..]).to_owned()
}
