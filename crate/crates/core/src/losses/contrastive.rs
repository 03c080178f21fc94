//! Supervised (label-positive) and augmented (view-positive) contrastive
//! losses over a batch of utterance vectors. Gradients are returned with
//! respect to the raw, un-normalised rows.

use super::LossConfig;
use crate::autograd::Mat;
use crate::error::{Error, Result};

struct Normalized {
    z: Mat,
    norms: Vec<f64>,
}

fn normalize(x: &Mat, enabled: bool) -> Normalized {
    if !enabled {
        return Normalized {
            z: x.clone(),
            norms: vec![1.0; x.nrows()],
        };
    }
    let mut z = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Normalized { z, norms }
}

/// Pulls a gradient w.r.t. normalised rows back to the raw rows.
fn unnormalize_grad(n: &Normalized, dz: Mat, enabled: bool) -> Mat {
    if !enabled {
        return dz;
    }
    let mut dx = dz;
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let zi = n.z.row(i);
        let proj = zi.dot(&row);
        row.scaled_add(-proj, &zi);
        row.mapv_inplace(|v| v / n.norms[i]);
    }
    dx
}

fn scl_core(reps: &Mat, labels: &[usize], config: &LossConfig, want_grad: bool) -> Result<(f64, Option<Mat>)> {
    let s = reps.nrows();
    if s < 2 {
        return Err(Error::BatchSize(format!("supervised contrastive loss needs at least 2 rows, got {s}")));
    }
    if labels.len() != s {
        return Err(Error::Shape(format!("{} labels for {s} rows", labels.len())));
    }
    let norm = normalize(reps, config.normalize_reps);
    let logits = norm.z.dot(&norm.z.t()) / config.tau;

    let mut grad_logits = Mat::zeros((s, s));
    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut probs = vec![0.0; s];
    for i in 0..s {
        let candidate = |k: usize| !(config.exclude_self && k == i);
        let positives: Vec<usize> = (0..s).filter(|&j| candidate(j) && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let max = (0..s)
            .filter(|&k| candidate(k))
            .map(|k| logits[[i, k]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in 0..s {
            probs[k] = if candidate(k) { (logits[[i, k]] - max).exp() } else { 0.0 };
            denom += probs[k];
        }
        let log_denom = max + denom.ln();
        let inv_p = 1.0 / positives.len() as f64;
        let mut anchor_loss = 0.0;
        for &j in &positives {
            anchor_loss -= (logits[[i, j]] - log_denom) * inv_p;
        }
        total += anchor_loss;
        anchors += 1;
        if want_grad {
            for k in 0..s {
                grad_logits[[i, k]] = probs[k] / denom;
            }
            for &j in &positives {
                grad_logits[[i, j]] -= inv_p;
            }
        }
    }
    if anchors == 0 {
        return Ok((0.0, want_grad.then(|| Mat::zeros(reps.dim()))));
    }
    let loss = total / anchors as f64;
    if !want_grad {
        return Ok((loss, None));
    }
    grad_logits /= anchors as f64;
    // logits = Z Zᵀ / τ
    let sym = &grad_logits + &grad_logits.t();
    let dz = sym.dot(&norm.z) / config.tau;
    Ok((loss, Some(unnormalize_grad(&norm, dz, config.normalize_reps))))
}

/// Supervised contrastive loss. Positives of anchor `i` are the other rows
/// sharing its label; anchors without positives are skipped.
pub fn scl_loss(reps: &Mat, labels: &[usize], config: &LossConfig) -> Result<f64> {
    scl_core(reps, labels, config, false).map(|(l, _)| l)
}

pub fn scl_loss_and_grad(reps: &Mat, labels: &[usize], config: &LossConfig) -> Result<(f64, Mat)> {
    scl_core(reps, labels, config, true).map(|(l, g)| (l, g.unwrap()))
}

fn acl_core(reps: &Mat, reps_aug: &Mat, config: &LossConfig, want_grad: bool) -> Result<(f64, Option<(Mat, Mat)>)> {
    if reps.dim() != reps_aug.dim() {
        return Err(Error::Shape(format!(
            "augmented contrastive loss: {:?} vs {:?}",
            reps.dim(),
            reps_aug.dim()
        )));
    }
    let s = reps.nrows();
    if s == 0 {
        return Err(Error::BatchSize("augmented contrastive loss needs at least one row".into()));
    }
    let nz = normalize(reps, config.normalize_reps);
    let nw = normalize(reps_aug, config.normalize_reps);
    let logits = nz.z.dot(&nw.z.t()) / config.tau;
    let mut total = 0.0;
    let mut grad_logits = Mat::zeros((s, s));
    for i in 0..s {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += max + denom.ln() - row[i];
        if want_grad {
            for j in 0..s {
                grad_logits[[i, j]] = (row[j] - max).exp() / denom;
            }
            grad_logits[[i, i]] -= 1.0;
        }
    }
    let loss = total / s as f64;
    if !want_grad {
        return Ok((loss, None));
    }
    grad_logits /= s as f64;
    let dz = grad_logits.dot(&nw.z) / config.tau;
    let dw = grad_logits.t().dot(&nz.z) / config.tau;
    Ok((
        loss,
        Some((
            unnormalize_grad(&nz, dz, config.normalize_reps),
            unnormalize_grad(&nw, dw, config.normalize_reps),
        )),
    ))
}

/// Augmented contrastive loss: cross-entropy of `reps·reps_augᵀ/τ` with the
/// diagonal as the target.
pub fn acl_loss(reps: &Mat, reps_aug: &Mat, config: &LossConfig) -> Result<f64> {
    acl_core(reps, reps_aug, config, false).map(|(l, _)| l)
}

/// Returns the loss and gradients w.r.t. `reps` and `reps_aug`.
pub fn acl_loss_and_grad(reps: &Mat, reps_aug: &Mat, config: &LossConfig) -> Result<(f64, Mat, Mat)> {
    acl_core(reps, reps_aug, config, true).map(|(l, g)| {
        let (a, b) = g.unwrap();
        (l, a, b)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{acl_bruteforce, scl_bruteforce};
    use ndarray::{array, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn degenerate_scl_batches() {
        let cfg = LossConfig::default();
        let reps = array![[1.0, 0.2], [0.1, 1.0]];
        assert_eq!(scl_loss(&reps, &[0, 1], &cfg).unwrap(), 0.0);
        assert!(scl_loss(&reps, &[2, 2], &cfg).unwrap().abs() < 1e-15);
        assert!(matches!(scl_loss(&array![[1.0, 0.0]], &[0], &cfg), Err(Error::BatchSize(_))));
    }

    #[test]
    fn three_row_batch_matches_pairwise_oracle() {
        let cfg = LossConfig { tau: 0.1, ..Default::default() };
        let reps = random((3, 5), 1);
        let got = scl_loss(&reps, &[0, 0, 1], &cfg).unwrap();
        let want = scl_bruteforce(&reps, &[0, 0, 1], &cfg);
        assert!((got - want).abs() < 1e-10);
        assert!(got > 0.0);
    }

    #[test]
    fn acl_closed_forms() {
        let cfg = LossConfig { tau: 0.1, ..Default::default() };
        let one = array![[0.6, 0.8]];
        assert!(acl_loss(&one, &one, &cfg).unwrap().abs() < 1e-15);
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let got = acl_loss(&eye, &eye, &cfg).unwrap();
        let want = (1.0 + (-10f64).exp()).ln();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 4.54e-5).abs() < 1e-7);
        assert!(matches!(acl_loss(&eye, &one, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn acl_random_batch_matches_oracle() {
        let cfg = LossConfig::default();
        let a = random((4, 6), 2);
        let b = random((4, 6), 3);
        assert!((acl_loss(&a, &b, &cfg).unwrap() - acl_bruteforce(&a, &b, &cfg)).abs() < 1e-10);
    }

    #[test]
    fn sharper_temperature_favours_self_match() {
        let a = random((5, 8), 4);
        let sharp = LossConfig { tau: 0.01, ..Default::default() };
        let soft = LossConfig { tau: 1.0, ..Default::default() };
        assert!(acl_loss(&a, &a, &sharp).unwrap() < acl_loss(&a, &a, &soft).unwrap());
    }

    fn fd_rows(f: impl Fn(&Mat) -> f64, x: &Mat, g: &Mat) {
        let h = 1e-6;
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut p = x.clone();
                p[[r, c]] += h;
                let mut m = x.clone();
                m[[r, c]] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - g[[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()), "[{r},{c}] {fd} vs {}", g[[r, c]]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (normalize_reps, exclude_self) in [(true, true), (false, true), (true, false)] {
            let cfg = LossConfig {
                normalize_reps,
                exclude_self,
                tau: 0.5,
                ..Default::default()
            };
            let x = random((5, 3), 9);
            let labels = [0, 1, 0, 2, 1];
            let (_, g) = scl_loss_and_grad(&x, &labels, &cfg).unwrap();
            fd_rows(|m| scl_loss(m, &labels, &cfg).unwrap(), &x, &g);

            let y = random((5, 3), 10);
            let (_, gx, gy) = acl_loss_and_grad(&x, &y, &cfg).unwrap();
            fd_rows(|m| acl_loss(m, &y, &cfg).unwrap(), &x, &gx);
            fd_rows(|m| acl_loss(&x, m, &cfg).unwrap(), &y, &gy);
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in any::<u64>(), n in 2usize..8) {
            let cfg = LossConfig::default();
            let x = random((n, 4), seed);
            let y = random((n, 4), seed ^ 1);
            let labels: Vec<usize> = (0..n).map(|i| (seed as usize + i * 7) % 3).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(1);
            perm.swap(0, n - 1);
            let xp = x.select(Axis(0), &perm);
            let yp = y.select(Axis(0), &perm);
            let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let a = scl_loss(&x, &labels, &cfg).unwrap();
            let b = scl_loss(&xp, &lp, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            let a = acl_loss(&x, &y, &cfg).unwrap();
            let b = acl_loss(&xp, &yp, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!(a >= 0.0);
            prop_assert!(scl_loss(&x, &labels, &cfg).unwrap() >= 0.0);
        }
    }
}
