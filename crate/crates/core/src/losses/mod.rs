//! The four training objectives and their weighted combination.

mod contrastive;
mod ctc;

use ndarray::Axis;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, softmax_rows, Mat, Tape, Var};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;

pub use contrastive::{acl_loss, acl_loss_and_grad, scl_loss, scl_loss_and_grad};
pub use ctc::{
    ctc_log_probs, ctc_loss, ctc_loss_and_grad, ctc_min_frames, read_vocab_file, write_vocab_file, CtcHeadParams,
    CtcVocab,
};

pub const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// CTC weight.
    pub alpha: f64,
    /// Supervised contrastive weight.
    pub beta: f64,
    /// Augmented contrastive weight.
    pub gamma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub exclude_self: bool,
    pub normalize_reps: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            tau: 0.1,
            exclude_self: true,
            normalize_reps: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Ablation presets. Each non-full preset zeroes loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Full,
    WoCtc,
    WoScl,
    WoAcl,
    CeOnly,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Full, Preset::WoCtc, Preset::WoScl, Preset::WoAcl, Preset::CeOnly];

    pub fn apply(self, config: &LossConfig) -> LossConfig {
        let mut c = config.clone();
        match self {
            Preset::Full => {}
            Preset::WoCtc => c.alpha = 0.0,
            Preset::WoScl => c.beta = 0.0,
            Preset::WoAcl => c.gamma = 0.0,
            Preset::CeOnly => {
                c.alpha = 0.0;
                c.beta = 0.0;
                c.gamma = 0.0;
            }
        }
        c
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::WoCtc => "wo_ctc",
            Preset::WoScl => "wo_scl",
            Preset::WoAcl => "wo_acl",
            Preset::CeOnly => "ce_only",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

/// Utterance classifier over the pooled 2d vector: logits = pooled·W_p + B_p.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierParams {
    pub linear: Linear,
}

impl ClassifierParams {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::init(store, "classifier", 2 * d, NUM_CLASSES, true, rng),
        }
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        self.linear.forward(tape, store, pooled)
    }
}

/// `softmax(W_pᵀ [maxpool(A) ; maxpool(fused)] + B_p)`.
pub fn classify(params: &ClassifierParams, store: &ParamStore, a: &Mat, fused: &Mat) -> Result<[f64; NUM_CLASSES]> {
    if a.nrows() == 0 || fused.nrows() == 0 {
        return Err(Error::Shape("classify needs non-empty sequences".into()));
    }
    let pa = a.fold_axis(Axis(0), f64::NEG_INFINITY, |m, v| m.max(*v));
    let pf = fused.fold_axis(Axis(0), f64::NEG_INFINITY, |m, v| m.max(*v));
    let pooled = ndarray::concatenate(Axis(0), &[pa.view(), pf.view()])
        .unwrap()
        .insert_axis(Axis(0));
    let mut tape = Tape::new();
    let pv = tape.constant(pooled);
    let logits = params.logits(&mut tape, store, pv)?;
    let probs = softmax_rows(tape.value(logits));
    let mut out = [0.0; NUM_CLASSES];
    for (o, p) in out.iter_mut().zip(probs.row(0).iter()) {
        *o = *p;
    }
    Ok(out)
}

/// `-ln ŷ_y`, floored at `CE_FLOOR`.
pub fn cross_entropy(probs: &[f64], target: usize) -> f64 {
    -probs[target].max(CE_FLOOR).ln()
}

/// Cross-entropy from a 1×C logit row, computed in log space. Returns the
/// loss and its gradient with respect to the logits.
pub fn cross_entropy_from_logits(logits: &Mat, target: usize) -> Result<(f64, Mat)> {
    if logits.nrows() != 1 || target >= logits.ncols() {
        return Err(Error::Shape(format!(
            "cross entropy expects a 1×C logit row and target < C, got {:?} and {target}",
            logits.dim()
        )));
    }
    let lp = log_softmax_rows(logits);
    let loss = -lp[[0, target]];
    let mut grad = lp.mapv(f64::exp);
    grad[[0, target]] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub ctc: f64,
    pub scl: f64,
    pub acl: f64,
}

/// `ce + α·ctc + β·scl + γ·acl`. A NaN in any weighted component is a
/// divergence.
pub fn total_loss(c: &LossComponents, config: &LossConfig) -> Result<f64> {
    let terms = [
        ("ce", 1.0, c.ce),
        ("ctc", config.alpha, c.ctc),
        ("scl", config.beta, c.scl),
        ("acl", config.gamma, c.acl),
    ];
    let mut total = 0.0;
    for (name, w, v) in terms {
        if v.is_nan() {
            return Err(Error::Divergence {
                epoch: 0,
                step: 0,
                reason: format!("{name} loss is NaN"),
            });
        }
        if w != 0.0 {
            total += w * v;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_and_peaked_classifier() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cls = ClassifierParams::init(&mut store, 2, &mut rng);
        store.set(cls.linear.w, Mat::zeros((4, 4)));
        let a = Mat::from_elem((3, 2), 0.7);
        let f = Mat::from_elem((2, 2), -0.2);
        let p = classify(&cls, &store, &a, &f).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));

        store.set(cls.linear.b, ndarray::array![[10.0, 0.0, 0.0, 0.0]]);
        let p = classify(&cls, &store, &a, &f).unwrap();
        let expected = 10f64.exp() / (10f64.exp() + 3.0);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.99986).abs() < 1e-5);
    }

    #[test]
    fn classifier_outputs_a_simplex_point() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cls = ClassifierParams::init(&mut store, 3, &mut rng);
        let a = Mat::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let f = Mat::from_shape_fn((2, 3), |(i, j)| (i * j) as f64 - 1.0);
        let p = classify(&cls, &store, &a, &f).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v > 0.0));
        let wrong = Mat::zeros((2, 4));
        assert!(matches!(classify(&cls, &store, &a, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.25; 4], 2) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0, 0.0], 0), 0.0);
        assert!((cross_entropy(&[0.7, 0.1, 0.1, 0.1], 0) - 0.356675).abs() < 1e-6);
        assert!((cross_entropy(&[0.0, 1.0, 0.0, 0.0], 0) + CE_FLOOR.ln()).abs() < 1e-12);

        let logits = ndarray::array![[0.7f64.ln(), 0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()]];
        let (l, g) = cross_entropy_from_logits(&logits, 0).unwrap();
        assert!((l + 0.7f64.ln()).abs() < 1e-12);
        assert!((g.sum()).abs() < 1e-12);
    }

    #[test]
    fn weighted_total() {
        let c = LossComponents {
            ce: 1.0,
            ctc: 2.0,
            scl: 3.0,
            acl: 4.0,
        };
        let cfg = LossConfig::default();
        assert!((total_loss(&c, &cfg).unwrap() - 1.9).abs() < 1e-12);
        let ce_only = Preset::CeOnly.apply(&cfg);
        assert_eq!(total_loss(&c, &ce_only).unwrap(), 1.0);
        let wo_acl = Preset::WoAcl.apply(&cfg);
        assert_eq!(wo_acl.gamma, 0.0);
        assert_eq!((wo_acl.alpha, wo_acl.beta), (0.1, 0.1));
        let nan = LossComponents { scl: f64::NAN, ..c };
        assert!(matches!(total_loss(&nan, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn presets_parse() {
        for p in Preset::ALL {
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
        }
        assert!("nope".parse::<Preset>().is_err());
    }
}
