//! Brute-force reference implementations and the finite-difference gradient
//! checker. Nothing here calls into the production loss code; every oracle
//! is a literal transcription of the definition.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Mat};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::params::ParamStore;

pub const CTC_ENUMERATION_LIMIT: usize = 1_000_000;

/// Exhaustive CTC: sums the probability of every length-J' labelling over
/// V symbols whose collapse (merge repeats, then drop blank 0) equals
/// `target`. `probs` holds per-frame probabilities, not log-probabilities.
pub fn ctc_bruteforce(probs: &Mat, target: &[usize]) -> Result<f64> {
    let (frames, v) = probs.dim();
    let total = (v as f64).powi(frames as i32);
    if total > CTC_ENUMERATION_LIMIT as f64 {
        return Err(Error::OracleSize(format!(
            "{v}^{frames} labellings exceeds the enumeration limit of {CTC_ENUMERATION_LIMIT}"
        )));
    }
    let total = total as usize;
    let mut path = vec![0usize; frames];
    let mut collapsed = Vec::with_capacity(frames);
    let mut sum = 0.0;
    for code in 0..total {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % v;
            c /= v;
        }
        collapsed.clear();
        let mut prev = usize::MAX;
        for &s in &path {
            if s != prev && s != 0 {
                collapsed.push(s);
            }
            prev = s;
        }
        if collapsed == target {
            let mut p = 1.0;
            for (t, &s) in path.iter().enumerate() {
                p *= probs[[t, s]];
            }
            sum += p;
        }
    }
    if sum == 0.0 {
        let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
        return Err(Error::CtcInfeasible {
            id: None,
            frames,
            target_len: target.len(),
            repeats,
        });
    }
    Ok(-sum.ln())
}

fn unit_rows(m: &Mat, normalize: bool) -> Vec<Vec<f64>> {
    m.rows()
        .into_iter()
        .map(|r| {
            let v: Vec<f64> = r.iter().copied().collect();
            if !normalize {
                return v;
            }
            let mut sq = 0.0;
            for x in &v {
                sq += x * x;
            }
            let n = sq.sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Nested-loop supervised contrastive loss.
pub fn scl_bruteforce(reps: &Mat, labels: &[usize], config: &LossConfig) -> f64 {
    let z = unit_rows(reps, config.normalize_reps);
    let n = z.len();
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        let mut denom = 0.0;
        for k in 0..n {
            if config.exclude_self && k == i {
                continue;
            }
            denom += (dot(&z[i], &z[k]) / config.tau).exp();
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for j in 0..n {
            if config.exclude_self && j == i {
                continue;
            }
            if labels[j] != labels[i] {
                continue;
            }
            let p = (dot(&z[i], &z[j]) / config.tau).exp() / denom;
            acc += p.ln();
            count += 1;
        }
        if count > 0 {
            total += -acc / count as f64;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Nested-loop augmented contrastive loss: row i's positive is augmented row i.
pub fn acl_bruteforce(reps: &Mat, reps_aug: &Mat, config: &LossConfig) -> f64 {
    let z = unit_rows(reps, config.normalize_reps);
    let w = unit_rows(reps_aug, config.normalize_reps);
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += (dot(&z[i], &w[j]) / config.tau).exp();
        }
        let p = (dot(&z[i], &w[i]) / config.tau).exp() / denom;
        total += -p.ln();
    }
    total / n as f64
}

#[derive(Debug, Clone)]
pub struct FailingCoord {
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub failing: Vec<FailingCoord>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.failing.is_empty())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failing_tensors(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !t.failing.is_empty())
            .map(|t| t.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check: step {:e}, tol {:e}", self.step, self.tol)?;
        for t in &self.tensors {
            let status = if t.failing.is_empty() { "ok" } else { "FAIL" };
            write!(
                f,
                "  {:<32} {:>5} coords  max rel err {:.3e}  {status}",
                t.name, t.coords_checked, t.max_rel_err
            )?;
            if let Some(c) = t.failing.first() {
                write!(
                    f,
                    "  (first at [{},{}]: analytic {:.6e}, numeric {:.6e})",
                    c.row, c.col, c.analytic, c.numeric
                )?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central-difference check in one dimension.
pub fn finite_diff_scalar(f: impl Fn(f64) -> f64, theta: f64, step: f64) -> f64 {
    (f(theta + step) - f(theta - step)) / (2.0 * step)
}

/// Checks every coordinate of every trainable tensor in `params`.
///
/// `f` evaluates the scalar and its analytic gradients at the given
/// parameters. Parameters are restored on return.
pub fn finite_diff_check<F>(f: F, params: &mut ParamStore, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    finite_diff_check_sampled(f, params, step, tol, None, 0)
}

/// Like [`finite_diff_check`] but checks at most `max_coords` randomly
/// chosen coordinates per tensor when given.
pub fn finite_diff_check_sampled<F>(
    f: F,
    params: &mut ParamStore,
    step: f64,
    tol: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (base, analytic) = f(params)?;
    if !base.is_finite() {
        return Err(Error::GradCheck("non-finite value at the unperturbed point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.trainable_ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let name = params.name(id).to_string();
        let (rows, cols) = params.value(id).dim();
        let n = rows * cols;
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let zero = Mat::zeros((rows, cols));
        let grad = analytic.get(id).unwrap_or(&zero).clone();
        let mut check = TensorCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            failing: Vec::new(),
        };
        for flat in coords {
            let (r, c) = (flat / cols, flat % cols);
            let orig = params.value(id)[[r, c]];
            params.value_mut(id)[[r, c]] = orig + step;
            let plus = f(params).map(|x| x.0);
            params.value_mut(id)[[r, c]] = orig - step;
            let minus = f(params).map(|x| x.0);
            params.value_mut(id)[[r, c]] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck(format!("non-finite value perturbing {name}[{r},{c}]")));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad[[r, c]];
            let err = relative_error(a, numeric);
            check.max_rel_err = check.max_rel_err.max(err);
            if err > tol {
                check.failing.push(FailingCoord {
                    row: r,
                    col: c,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { step, tol, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_calibration() {
        let fd = finite_diff_scalar(|x| x * x, 3.0, 1e-3);
        assert!((fd - 6.0).abs() < 1e-10);
        assert!(relative_error(6.0, fd) < 1e-10);
    }

    #[test]
    fn quadratic_through_param_store() {
        let mut store = ParamStore::new();
        let id = store.add("theta", array![[3.0]], true);
        let f = |s: &ParamStore| {
            let t = s.value(id)[[0, 0]];
            let mut g = Gradients::default();
            g.insert(id, array![[2.0 * t]]);
            Ok((t * t, g))
        };
        let report = finite_diff_check(f, &mut store, 1e-3, 1e-10).unwrap();
        assert!(report.passed());
        assert_eq!(store.value(id)[[0, 0]], 3.0);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut store = ParamStore::new();
        let good = store.add("good", array![[1.0, -2.0]], true);
        let bad = store.add("bad", array![[0.5, 1.5]], true);
        let f = |s: &ParamStore| {
            let (x, y) = (s.value(good), s.value(bad));
            let v = x.mapv(|a| a * a).sum() + y.mapv(|a| a * a * a).sum();
            let mut g = Gradients::default();
            g.insert(good, x * 2.0);
            g.insert(bad, y.mapv(|a| 3.0 * a * a) * 2.0);
            Ok((v, g))
        };
        let report = finite_diff_check(f, &mut store, 1e-3, 1e-4).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing_tensors(), vec!["bad"]);
    }

    #[test]
    fn ctc_oracle_single_alignment() {
        let probs = Mat::from_elem((1, 3), 1.0 / 3.0);
        let l = ctc_bruteforce(&probs, &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_oracle_two_frames() {
        let probs = Mat::from_elem((2, 3), 1.0 / 3.0);
        let l = ctc_bruteforce(&probs, &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_oracle_infeasible_and_size_guard() {
        let probs = Mat::from_elem((2, 3), 1.0 / 3.0);
        assert!(matches!(ctc_bruteforce(&probs, &[1, 2, 1]), Err(Error::CtcInfeasible { .. })));
        assert!(matches!(ctc_bruteforce(&probs, &[1, 1]), Err(Error::CtcInfeasible { .. })));
        let big = Mat::from_elem((9, 5), 0.2);
        assert!(matches!(ctc_bruteforce(&big, &[1]), Err(Error::OracleSize(_))));
    }

    #[test]
    fn contrastive_oracle_degenerate_cases() {
        let cfg = LossConfig::default();
        let reps = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(scl_bruteforce(&reps, &[0, 1], &cfg), 0.0);
        assert!(scl_bruteforce(&reps, &[0, 0], &cfg).abs() < 1e-15);
        let one = array![[0.3, 0.4]];
        assert!(acl_bruteforce(&one, &one, &cfg).abs() < 1e-15);
    }
}
