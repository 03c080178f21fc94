//! CTC head and loss. The loss is the log-space forward-backward recursion
//! over the blank-interleaved target of length 2L+1; blank is symbol 0.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;

/// Ordered character set. Symbol `i + 1` is `chars[i]`; 0 is blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtcVocab {
    pub chars: Vec<char>,
}

impl Default for CtcVocab {
    /// Space plus `A`..`Z`.
    fn default() -> Self {
        Self {
            chars: std::iter::once(' ').chain('A'..='Z').collect(),
        }
    }
}

impl CtcVocab {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for c in &chars {
            if !seen.insert(*c) {
                return Err(Error::Vocabulary(format!("duplicate character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Vocabulary("empty character set".into()));
        }
        Ok(Self { chars })
    }

    /// Number of output symbols including blank.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|x| *x == c)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Vocabulary(format!("character {c:?} is not in the CTC vocabulary")))
            })
            .collect()
    }
}

/// One character per line; blank is implicit.
pub fn read_vocab_file(path: &Path) -> Result<CtcVocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut chars = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let mut it = line.chars();
        match (it.next(), it.next()) {
            (None, _) => continue,
            (Some(c), None) => chars.push(c),
            _ => {
                return Err(Error::Vocabulary(format!(
                    "{}: line {} holds more than one character",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    CtcVocab::new(chars)
}

pub fn write_vocab_file(vocab: &CtcVocab, path: &Path) -> Result<()> {
    let mut s = String::new();
    for c in &vocab.chars {
        s.push(*c);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `t̂ = softmax(A·W_c + B_c)` with `W_c` d×V, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcHeadParams {
    pub linear: Linear,
    pub vocab: CtcVocab,
}

impl CtcHeadParams {
    pub fn init(store: &mut ParamStore, d: usize, vocab: CtcVocab, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::init(store, "ctc_head", d, vocab.size(), true, rng),
            vocab,
        }
    }

    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, a: Var) -> Result<Var> {
        let logits = self.linear.forward(tape, store, a)?;
        Ok(tape.log_softmax_rows(logits))
    }
}

pub fn ctc_log_probs(params: &CtcHeadParams, store: &ParamStore, a: &Mat) -> Result<Mat> {
    let d = params.linear.d_in(store);
    if a.ncols() != d {
        return Err(Error::Shape(format!("CTC head expects width {d}, got {}", a.ncols())));
    }
    let logits = a.dot(store.value(params.linear.w)) + store.value(params.linear.b);
    Ok(log_softmax_rows(&logits))
}

/// Minimum frame count for a target: one frame per symbol plus one blank
/// between each adjacent repeated pair.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn validate(logprobs: &Mat, target: &[usize]) -> Result<Vec<usize>> {
    let (frames, v) = logprobs.dim();
    if target.is_empty() {
        return Err(Error::Shape("CTC target must contain at least one symbol".into()));
    }
    if let Some(bad) = target.iter().find(|&&s| s == 0 || s >= v) {
        return Err(Error::Vocabulary(format!(
            "target symbol {bad} outside 1..{v} (0 is blank)"
        )));
    }
    let needed = ctc_min_frames(target);
    if frames < needed {
        return Err(Error::CtcInfeasible {
            id: None,
            frames,
            target_len: target.len(),
            repeats: needed - target.len(),
        });
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(0);
    for &s in target {
        ext.push(s);
        ext.push(0);
    }
    Ok(ext)
}

fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]
}

fn forward(logprobs: &Mat, ext: &[usize]) -> (Vec<Vec<f64>>, f64) {
    let frames = logprobs.nrows();
    let n = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; n]; frames];
    alpha[0][0] = logprobs[[0, ext[0]]];
    alpha[0][1] = logprobs[[0, ext[1]]];
    for t in 1..frames {
        for s in 0..n {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = lse(a, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s) {
                a = lse(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == f64::NEG_INFINITY {
                a
            } else {
                a + logprobs[[t, ext[s]]]
            };
        }
    }
    let log_p = lse(alpha[frames - 1][n - 1], alpha[frames - 1][n - 2]);
    (alpha, log_p)
}

/// Negative log-likelihood of `target` (symbol indices, no blanks) under
/// per-frame log-probabilities `logprobs` (J'×V).
pub fn ctc_loss(logprobs: &Mat, target: &[usize]) -> Result<f64> {
    let ext = validate(logprobs, target)?;
    Ok(-forward(logprobs, &ext).1)
}

/// Loss and its gradient with respect to `logprobs`, treating each entry as
/// an independent input.
pub fn ctc_loss_and_grad(logprobs: &Mat, target: &[usize]) -> Result<(f64, Mat)> {
    let ext = validate(logprobs, target)?;
    let (frames, v) = logprobs.dim();
    let n = ext.len();
    let (alpha, log_p) = forward(logprobs, &ext);

    // beta[t][s]: log-probability of finishing from state s at frame t,
    // excluding frame t's own emission.
    let mut beta = vec![vec![f64::NEG_INFINITY; n]; frames];
    beta[frames - 1][n - 1] = 0.0;
    beta[frames - 1][n - 2] = 0.0;
    for t in (0..frames - 1).rev() {
        for s in 0..n {
            let mut b = beta[t + 1][s] + logprobs[[t + 1, ext[s]]];
            if s + 1 < n {
                b = lse(b, beta[t + 1][s + 1] + logprobs[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < n && can_skip(&ext, s + 2) {
                b = lse(b, beta[t + 1][s + 2] + logprobs[[t + 1, ext[s + 2]]]);
            }
            beta[t][s] = b;
        }
    }

    let mut grad = Mat::zeros((frames, v));
    let mut occupancy = vec![f64::NEG_INFINITY; v];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        for s in 0..n {
            occupancy[ext[s]] = lse(occupancy[ext[s]], alpha[t][s] + beta[t][s]);
        }
        for k in 0..v {
            if occupancy[k] != f64::NEG_INFINITY {
                grad[[t, k]] = -(occupancy[k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::ctc_bruteforce;
    use rand::{Rng, SeedableRng};

    fn uniform(frames: usize, v: usize) -> Mat {
        Mat::from_elem((frames, v), -(v as f64).ln())
    }

    fn random_logprobs(frames: usize, v: usize, rng: &mut ChaCha8Rng) -> Mat {
        let logits = Mat::from_shape_fn((frames, v), |_| rng.random_range(-2.0..2.0));
        log_softmax_rows(&logits)
    }

    #[test]
    fn single_frame_single_symbol() {
        let l = ctc_loss(&uniform(1, 3), &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_alignments() {
        // (A,A), (A,-), (-,A): 3/9
        let l = ctc_loss(&uniform(2, 3), &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_enumeration_for_ab_over_four_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let lp = random_logprobs(4, 3, &mut rng);
        let dp = ctc_loss(&lp, &[1, 2]).unwrap();
        let bf = ctc_bruteforce(&lp.mapv(f64::exp), &[1, 2]).unwrap();
        assert!(((dp - bf) / bf).abs() < 1e-10, "dp {dp} vs brute force {bf}");
    }

    #[test]
    fn repeated_symbols_need_a_blank() {
        assert_eq!(ctc_min_frames(&[1, 1, 2]), 4);
        assert!(matches!(ctc_loss(&uniform(3, 3), &[1, 1, 2]), Err(Error::CtcInfeasible { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = random_logprobs(4, 3, &mut rng);
        let dp = ctc_loss(&lp, &[1, 1, 2]).unwrap();
        let bf = ctc_bruteforce(&lp.mapv(f64::exp), &[1, 1, 2]).unwrap();
        assert!(((dp - bf) / bf).abs() < 1e-10);
    }

    #[test]
    fn bad_targets() {
        assert!(matches!(ctc_loss(&uniform(4, 3), &[3]), Err(Error::Vocabulary(_))));
        assert!(matches!(ctc_loss(&uniform(4, 3), &[0]), Err(Error::Vocabulary(_))));
        assert!(matches!(ctc_loss(&uniform(4, 3), &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lp = random_logprobs(6, 4, &mut rng);
        let target = [1, 3, 3];
        let (_, g) = ctc_loss_and_grad(&lp, &target).unwrap();
        let h = 1e-5;
        for t in 0..6 {
            for k in 0..4 {
                let mut p = lp.clone();
                p[[t, k]] += h;
                let mut m = lp.clone();
                m[[t, k]] -= h;
                let fd = (ctc_loss(&p, &target).unwrap() - ctc_loss(&m, &target).unwrap()) / (2.0 * h);
                assert!((fd - g[[t, k]]).abs() < 1e-7, "[{t},{k}] {fd} vs {}", g[[t, k]]);
            }
            // every alignment sits in exactly one state per frame
            assert!((g.row(t).sum() + 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_head_and_row_normalisation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vocab = CtcVocab::new(vec!['A', 'B', 'C', 'D']).unwrap();
        let head = CtcHeadParams::init(&mut store, 3, vocab, &mut rng);
        let a = Mat::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let lp = ctc_log_probs(&head, &store, &a).unwrap();
        for row in lp.rows() {
            assert!((row.mapv(f64::exp).sum() - 1.0).abs() < 1e-12);
        }
        store.set(head.linear.w, Mat::zeros((3, 5)));
        let lp = ctc_log_probs(&head, &store, &a).unwrap();
        assert!(lp.iter().all(|v| (v - (0.2f64).ln()).abs() < 1e-15));
    }

    #[test]
    fn hand_set_two_symbol_head() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = CtcHeadParams::init(&mut store, 2, CtcVocab::new(vec!['A']).unwrap(), &mut rng);
        store.set(head.linear.w, ndarray::array![[1.0, -1.0], [0.5, 2.0]]);
        store.set(head.linear.b, ndarray::array![[0.1, 0.2]]);
        let a = ndarray::array![[0.3, -0.4]];
        let lp = ctc_log_probs(&head, &store, &a).unwrap();
        let z0: f64 = 0.3 * 1.0 + -0.4 * 0.5 + 0.1;
        let z1: f64 = 0.3 * -1.0 + -0.4 * 2.0 + 0.2;
        let lse = (z0.exp() + z1.exp()).ln();
        assert!((lp[[0, 0]] - (z0 - lse)).abs() < 1e-14);
        assert!((lp[[0, 1]] - (z1 - lse)).abs() < 1e-14);
    }

    #[test]
    fn vocab_encoding_and_file_round_trip() {
        let v = CtcVocab::default();
        assert_eq!(v.size(), 28);
        assert_eq!(v.encode("A B").unwrap(), vec![2, 1, 3]);
        assert!(matches!(v.encode("a"), Err(Error::Vocabulary(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        write_vocab_file(&v, &path).unwrap();
        assert_eq!(read_vocab_file(&path).unwrap(), v);
        fs::write(&path, "AB\n").unwrap();
        assert!(matches!(read_vocab_file(&path), Err(Error::Vocabulary(_))));
    }
}
