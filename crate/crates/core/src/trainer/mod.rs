//! Optimisation loop with gradient accumulation, evaluation metrics and
//! leave-one-session-out cross-validation.

mod cv;
mod metrics;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentedView, Augmenter};
use crate::autograd::{Gradients, Mat};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossComponents, LossConfig, Preset};
use crate::model::{BatchItem, Model};
use crate::nn::Mode;
use crate::params::{ParamId, ParamStore};

pub use cv::{cross_validate, cross_validate_with, CvReport, FoldResult};
pub use metrics::{eval_threads, evaluate, predict_all, Metrics};
pub use report::{
    confusion_csv, history_csv, write_confusion_csv, write_history_csv, write_json, HISTORY_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub preset: Preset,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub shuffle: bool,
    /// Keep the parameters of the epoch with the lowest training loss
    /// instead of the final ones.
    pub best_epoch: bool,
    /// Loss weights; read from the `[loss]` section of a run config.
    #[serde(skip)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            accum_steps: 4,
            epochs: 30,
            seed: 0,
            preset: Preset::Full,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            shuffle: true,
            best_epoch: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-width schedule: 100 epochs at a constant 1e-5.
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 100,
            ..Self::default()
        }
    }

    /// Loss weights after the preset is applied.
    pub fn effective_loss(&self) -> LossConfig {
        self.preset.apply(&self.loss)
    }

    pub fn validate(&self) -> Result<()> {
        let loss = self.effective_loss();
        loss.validate()?;
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Config("batch_size and accum_steps must be positive".into()));
        }
        if self.batch_size < 2 && (loss.beta > 0.0 || loss.gamma > 0.0) {
            return Err(Error::BatchSize(format!(
                "contrastive losses need batch_size >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Mean loss components over the micro-batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub ctc: f64,
    pub scl: f64,
    pub acl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub optimizer_steps: usize,
    /// Ids of every utterance that contributed a gradient.
    pub seen_ids: BTreeSet<String>,
    /// 1-based epoch whose parameters were kept, when `best_epoch` is set.
    pub kept_epoch: usize,
}

#[derive(Debug, Clone)]
enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: HashMap<ParamId, Mat>,
        v: HashMap<ParamId, Mat>,
    },
}

impl Optimizer {
    fn new(config: &TrainConfig) -> Self {
        match config.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: config.adam_beta1,
                beta2: config.adam_beta2,
                eps: config.adam_eps,
                t: 0,
                m: HashMap::new(),
                v: HashMap::new(),
            },
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        match self {
            Optimizer::Sgd => {
                for id in ids {
                    if let Some(g) = grads.get(id) {
                        store.value_mut(id).scaled_add(-lr, g);
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for id in ids {
                    let Some(g) = grads.get(id) else { continue };
                    let m = m.entry(id).or_insert_with(|| Mat::zeros(g.dim()));
                    let v = v.entry(id).or_insert_with(|| Mat::zeros(g.dim()));
                    m.zip_mut_with(g, |m, g| *m = *beta1 * *m + (1.0 - *beta1) * g);
                    v.zip_mut_with(g, |v, g| *v = *beta2 * *v + (1.0 - *beta2) * g * g);
                    let p = store.value_mut(id);
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, m, v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + *eps);
                    });
                }
            }
        }
    }
}

fn with_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Divergence { reason, .. } => Error::Divergence { epoch, step, reason },
        other => other,
    }
}

fn grads_finite(g: &Gradients) -> bool {
    g.iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
}

/// Trains `model` on `data`. `pairs` supplies augmented views for the
/// precomputed augmentation modes.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    augment: &AugmentConfig,
    pairs: Option<&BTreeMap<String, AugmentedView>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    augment.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let loss = config.effective_loss();

    let targets: Vec<Vec<usize>> = if loss.alpha != 0.0 {
        data.utterances.iter().map(|u| model.ctc_target(u)).collect::<Result<_>>()?
    } else {
        vec![Vec::new(); data.len()]
    };
    let augmenter = if loss.gamma != 0.0 {
        let subset = pairs.map(|p| {
            data.utterances
                .iter()
                .filter_map(|u| p.get(&u.id).map(|v| (u.id.clone(), v.clone())))
                .collect::<BTreeMap<_, _>>()
        });
        Some(Augmenter::new(augment, data, subset)?)
    } else {
        None
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5155_4646));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x4452_4f50));
    let mut optimizer = Optimizer::new(config);
    let mut history = Vec::with_capacity(config.epochs);
    let mut seen_ids = BTreeSet::new();
    let mut steps = 0usize;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let precision = model.config.precision;

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let epoch_views = match &augmenter {
            Some(a) if !augment.regenerate_per_step => {
                let refs: Vec<_> = data.utterances.iter().collect();
                Some(a.views(&refs, epoch as u64, 0).map_err(|e| with_context(e, epoch, steps))?)
            }
            _ => None,
        };

        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let mut sums = LossComponents::default();
        let mut total_sum = 0.0;
        let mut acc = Gradients::default();
        let mut acc_count = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let step_views = match &augmenter {
                Some(a) if epoch_views.is_none() => {
                    let refs: Vec<_> = batch.iter().map(|&i| &data.utterances[i]).collect();
                    Some(a.views(&refs, epoch as u64, steps as u64 + 1).map_err(|e| with_context(e, epoch, steps))?)
                }
                _ => None,
            };
            let items: Vec<BatchItem<'_>> = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| BatchItem {
                    utterance: &data.utterances[i],
                    ctc_target: &targets[i],
                    augmented: match (&epoch_views, &step_views) {
                        (Some(v), _) => Some(&v[i]),
                        (None, Some(v)) => Some(&v[k]),
                        _ => None,
                    },
                })
                .collect();
            let mut mode = if model.config.dropout > 0.0 {
                Mode::Train(&mut dropout_rng)
            } else {
                Mode::Eval
            };
            let out = model
                .batch_loss(&items, &loss, &mut mode)
                .map_err(|e| with_context(e, epoch, steps + 1))?;
            if !grads_finite(&out.grads) {
                return Err(Error::Divergence {
                    epoch,
                    step: steps + 1,
                    reason: "non-finite gradient".into(),
                });
            }
            for item in &items {
                seen_ids.insert(item.utterance.id.clone());
            }
            sums.ce += out.components.ce;
            sums.ctc += out.components.ctc;
            sums.scl += out.components.scl;
            sums.acl += out.components.acl;
            total_sum += out.total;
            acc.accumulate(&out.grads);
            acc_count += 1;
            if acc_count == config.accum_steps || b + 1 == batches.len() {
                acc.scale(1.0 / acc_count as f64);
                optimizer.step(&mut model.store, &acc, config.learning_rate);
                model.store.round_to(precision);
                steps += 1;
                acc = Gradients::default();
                acc_count = 0;
            }
        }
        let n = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            ce: sums.ce / n,
            ctc: sums.ctc / n,
            scl: sums.scl / n,
            acl: sums.acl / n,
            total: total_sum / n,
        };
        if !record.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: steps,
                reason: format!("epoch loss is {}", record.total),
            });
        }
        if config.best_epoch && best.as_ref().is_none_or(|(l, _, _)| record.total < *l) {
            best = Some((record.total, epoch, model.store.clone()));
        }
        history.push(record);
    }
    let mut kept_epoch = config.epochs;
    if let Some((_, e, store)) = best {
        model.store = store;
        kept_epoch = e;
    }
    Ok(TrainOutcome {
        history,
        optimizer_steps: steps,
        seen_ids,
        kept_epoch,
    })
}
