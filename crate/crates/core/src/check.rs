//! Self-check suite: oracle agreement and gradient verification.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{AugmentConfig, Augmenter};
use crate::autograd::{softmax_rows, Gradients, Mat};
use crate::data::{generate_synthetic_dataset, GeneratorConfig};
use crate::error::{Error, Result};
use crate::losses::{
    acl_loss, acl_loss_and_grad, ctc_loss, ctc_loss_and_grad, scl_loss, scl_loss_and_grad, LossConfig,
};
use crate::model::{BatchItem, Model, ModelConfig};
use crate::nn::Mode;
use crate::oracles::{
    acl_bruteforce, ctc_bruteforce, finite_diff_check, finite_diff_check_sampled, scl_bruteforce, GradCheckReport,
};
use crate::params::{ParamStore, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckLevel {
    Fast,
    Full,
}

impl std::str::FromStr for CheckLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(CheckLevel::Fast),
            "full" => Ok(CheckLevel::Full),
            _ => Err(Error::Config(format!("unknown check level `{s}` (fast or full)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckSuite {
    pub results: Vec<CheckResult>,
}

impl CheckSuite {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

impl fmt::Display for CheckSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:<6} {:>8}  detail", "check", "status", "seconds")?;
        for r in &self.results {
            let status = if r.passed { "pass" } else { "FAIL" };
            writeln!(f, "{:<24} {:<6} {:>8.2}  {}", r.name, status, r.seconds, r.detail)?;
        }
        Ok(())
    }
}

/// Random CTC instance: (probabilities J'×V, target of length L).
pub fn random_ctc_instance(rng: &mut ChaCha8Rng, max_frames: usize) -> (Mat, Vec<usize>) {
    let v = rng.random_range(2..=5);
    let l = rng.random_range(1..=4usize);
    let target: Vec<usize> = (0..l).map(|_| rng.random_range(1..v)).collect();
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    let lo = (l + repeats).min(max_frames);
    let frames = rng.random_range(lo.max(1)..=max_frames);
    let logits = Mat::from_shape_fn((frames, v), |_| rng.random_range(-2.0..2.0));
    (softmax_rows(&logits), target)
}

/// Worst relative error between the DP loss and enumeration over `n`
/// random instances. Infeasible instances must be rejected by both.
pub fn ctc_oracle_agreement(n: usize, max_frames: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (probs, target) = random_ctc_instance(&mut rng, max_frames);
        let dp = ctc_loss(&probs.mapv(f64::ln), &target);
        let bf = ctc_bruteforce(&probs, &target);
        match (dp, bf) {
            (Ok(a), Ok(b)) => worst = worst.max((a - b).abs() / b.abs().max(1e-300)),
            (Err(Error::CtcInfeasible { .. }), Err(Error::CtcInfeasible { .. })) => {}
            (a, b) => {
                return Err(Error::GradCheck(format!(
                    "CTC implementations disagree on feasibility: {a:?} vs {b:?}"
                )))
            }
        }
    }
    Ok(worst)
}

pub fn random_batch(rng: &mut ChaCha8Rng, s: usize, dim: usize) -> (Mat, Mat, Vec<usize>) {
    let reps = Mat::from_shape_fn((s, dim), |_| rng.random_range(-1.0..1.0));
    let aug = &reps + &Mat::from_shape_fn((s, dim), |_| rng.random_range(-0.3..0.3));
    let classes = rng.random_range(1..=4);
    let labels = (0..s).map(|_| rng.random_range(0..classes)).collect();
    (reps, aug, labels)
}

/// Worst absolute difference between the losses and their double-loop
/// oracles over `n` random batches with 1 ≤ S ≤ 16.
pub fn contrastive_oracle_agreement(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..n {
        let s = rng.random_range(1..=16);
        let dim = rng.random_range(2..=8);
        let (reps, aug, labels) = random_batch(&mut rng, s, dim);
        let cfg = LossConfig {
            tau: rng.random_range(0.05..1.0),
            exclude_self: i % 5 != 0,
            normalize_reps: i % 7 != 0,
            ..Default::default()
        };
        if s >= 2 {
            worst = worst.max((scl_loss(&reps, &labels, &cfg)? - scl_bruteforce(&reps, &labels, &cfg)).abs());
        }
        worst = worst.max((acl_loss(&reps, &aug, &cfg)? - acl_bruteforce(&reps, &aug, &cfg)).abs());
    }
    Ok(worst)
}

fn matrix_store(m: &Mat) -> (ParamStore, crate::params::ParamId) {
    let mut s = ParamStore::new();
    let id = s.add("x", m.clone(), true);
    (s, id)
}

/// Finite-difference checks of the CTC and contrastive gradients on raw
/// inputs.
pub fn loss_gradient_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let (probs, target) = random_ctc_instance(&mut rng, 7);
    let logits = probs.mapv(f64::ln);
    let (mut store, id) = matrix_store(&logits);
    let ctc = |s: &ParamStore| -> Result<(f64, Gradients)> {
        // Loss as a function of unnormalised logits.
        let lp = crate::autograd::log_softmax_rows(s.value(id));
        let (l, g_lp) = ctc_loss_and_grad(&lp, &target)?;
        let p = lp.mapv(f64::exp);
        let row_sum = g_lp.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let g = &g_lp - &(&p * &row_sum);
        let mut grads = Gradients::default();
        grads.insert(id, g);
        Ok((l, grads))
    };
    reports.push(finite_diff_check(ctc, &mut store, 1e-5, 1e-6)?);

    let (reps, aug, labels) = random_batch(&mut rng, 6, 4);
    let cfg = LossConfig::default();
    let (mut store, id) = matrix_store(&reps);
    let scl = |s: &ParamStore| -> Result<(f64, Gradients)> {
        let (l, g) = scl_loss_and_grad(s.value(id), &labels, &cfg)?;
        let mut grads = Gradients::default();
        grads.insert(id, g);
        Ok((l, grads))
    };
    reports.push(finite_diff_check(scl, &mut store, 1e-5, 1e-6)?);

    let (mut store, id) = matrix_store(&reps);
    let acl = |s: &ParamStore| -> Result<(f64, Gradients)> {
        let (l, g, _) = acl_loss_and_grad(s.value(id), &aug, &cfg)?;
        let mut grads = Gradients::default();
        grads.insert(id, g);
        Ok((l, grads))
    };
    reports.push(finite_diff_check(acl, &mut store, 1e-5, 1e-6)?);
    Ok(reports)
}

/// Settings for the full-model gradient check.
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub d: usize,
    pub heads: usize,
    pub batch: usize,
    pub loss: LossConfig,
    pub step: f64,
    pub tol: f64,
    /// Coordinates checked per tensor; all when `None`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Doubles the analytic gradient of one tensor (negative control).
    pub corrupt_gradient: bool,
}

impl Default for ModelGradCheck {
    fn default() -> Self {
        Self {
            d: 4,
            heads: 2,
            batch: 4,
            loss: LossConfig::default(),
            step: 3e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 3,
            corrupt_gradient: false,
        }
    }
}

/// Central-difference check of the whole network (encoders, fusion, all
/// four losses) in 64-bit mode with dropout off.
pub fn model_gradient_check(spec: &ModelGradCheck) -> Result<GradCheckReport> {
    let data = generate_synthetic_dataset(&GeneratorConfig {
        n_utterances: 40,
        d_a: 6,
        min_words: 1,
        max_words: 2,
        seed: spec.seed,
        ..Default::default()
    })?;
    let config = ModelConfig {
        d: spec.d,
        heads: spec.heads,
        d_a: 6,
        token_vocab_size: data.meta.token_vocab_size,
        dropout: 0.0,
        freeze_text: false,
        precision: Precision::F64,
        ..Default::default()
    };
    let mut model = Model::new(config, spec.seed)?;
    // Two utterances from each of the first classes so every anchor has a
    // positive.
    let picks: Vec<usize> = (0..spec.batch).map(|i| (i / 2) * 5 + i % 2).collect();
    let utts: Vec<_> = picks.iter().map(|&i| &data.utterances[i]).collect();
    let targets: Vec<Vec<usize>> = utts.iter().map(|u| model.ctc_target(u)).collect::<Result<_>>()?;
    let augmenter = Augmenter::new(&AugmentConfig::default(), &data, None)?;
    let views = augmenter.views(&utts, 0, 0)?;
    let items: Vec<BatchItem<'_>> = utts
        .iter()
        .zip(&targets)
        .zip(&views)
        .map(|((u, t), v)| BatchItem {
            utterance: u,
            ctc_target: t,
            augmented: Some(v),
        })
        .collect();
    let corrupt_id = model.mmi.gate.w;
    let f = |s: &ParamStore| -> Result<(f64, Gradients)> {
        let out = model.batch_loss_with(s, &items, &spec.loss, &mut Mode::Eval)?;
        let mut grads = out.grads;
        if spec.corrupt_gradient {
            if let Some(g) = grads.get(corrupt_id) {
                let doubled = g * 2.0;
                grads.insert(corrupt_id, doubled);
            }
        }
        Ok((out.total, grads))
    };
    let mut store = model.store.clone();
    let report = finite_diff_check_sampled(f, &mut store, spec.step, spec.tol, spec.max_coords, spec.seed)?;
    model.store = store;
    Ok(report)
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
    CheckResult {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Runs the suite. With `inject_fault` the model gradient is corrupted so
/// the suite must fail.
pub fn run_checks(level: CheckLevel, inject_fault: bool) -> CheckSuite {
    let full = level == CheckLevel::Full;
    let mut results = Vec::new();

    results.push(timed("ctc_oracle", || {
        let (n, frames) = if full { (200, 8) } else { (60, 6) };
        let worst = ctc_oracle_agreement(n, frames, 1)?;
        Ok((worst < 1e-8, format!("{n} instances, J' <= {frames}, max rel err {worst:.2e}")))
    }));
    results.push(timed("contrastive_oracle", || {
        let n = if full { 100 } else { 40 };
        let worst = contrastive_oracle_agreement(n, 2)?;
        Ok((worst < 1e-10, format!("{n} batches, max abs err {worst:.2e}")))
    }));
    results.push(timed("loss_gradients", || {
        let reports = loss_gradient_checks(3)?;
        let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
        Ok((reports.iter().all(|r| r.passed()), format!("ctc/scl/acl max rel err {worst:.2e}")))
    }));
    results.push(timed("model_gradient", || {
        let spec = ModelGradCheck {
            max_coords: if full { None } else { Some(6) },
            corrupt_gradient: inject_fault,
            ..Default::default()
        };
        let r = model_gradient_check(&spec)?;
        let detail = if r.passed() {
            format!("{} tensors, max rel err {:.2e}", r.tensors.len(), r.max_rel_err())
        } else {
            format!("failing tensors: {}", r.failing_tensors().join(", "))
        };
        Ok((r.passed(), detail))
    }));
    results.push(timed("negative_control", || {
        let spec = ModelGradCheck {
            max_coords: Some(4),
            corrupt_gradient: true,
            ..Default::default()
        };
        let r = model_gradient_check(&spec)?;
        let flagged = r.failing_tensors() == ["mmi.gate.w"];
        Ok((flagged, format!("corrupted tensor flagged: {flagged}")))
    }));
    CheckSuite { results }
}
