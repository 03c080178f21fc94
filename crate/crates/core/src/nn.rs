//! Small helpers shared by the encoder, fusion and head modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout. Identity in eval mode or when `rate == 0`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Var {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let dim = tape.value(x).dim();
            let mask = Mat::from_shape_fn(dim, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            let m = tape.constant(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

/// Affine map `x·W + b` with `W` stored in×out and `b` as 1×out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.add_uniform(format!("{prefix}.w"), (d_in, d_out), d_in, trainable, rng),
            b: store.add_zeros(format!("{prefix}.b"), (1, d_out), trainable),
        }
    }

    pub fn d_in(&self, store: &ParamStore) -> usize {
        store.value(self.w).nrows()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let d_in = self.d_in(store);
        let got = tape.value(x).ncols();
        if got != d_in {
            return Err(Error::Shape(format!("linear `{}` expects width {d_in}, got {got}", store.name(self.w))));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        Ok(tape.add_row(y, b))
    }
}

/// Layer-norm parameters, initialised to the identity transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, trainable: bool) -> Self {
        Self {
            gamma: store.add_ones(format!("{prefix}.gamma"), (1, d), trainable),
            beta: store.add_zeros(format!("{prefix}.beta"), (1, d), trainable),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

pub(crate) fn to_f64(m: &ndarray::Array2<f32>) -> Mat {
    m.mapv(|v| v as f64)
}

pub(crate) fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericInput(format!("{what} contains non-finite values")))
    }
}
