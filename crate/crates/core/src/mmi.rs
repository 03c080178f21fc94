//! Multimodal interaction: cross-modal attention, the three cross-modal
//! encoder blocks, the acoustic gate and the down-projected fusion.
//!
//! Block B attends speech frames over tokens (`P`, one row per frame),
//! block C attends tokens over `P` (`R`, one row per token) and block D
//! attends tokens over speech frames (`Q`, one row per token). The gate
//! scales `Q` elementwise before `[Q_gated ; R]` is projected back to width
//! `d`.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, LayerNormParams, Linear, Mode};
use crate::params::{ParamId, ParamStore};

/// Multi-head cross-modal attention. `wq`, `wk`, `wv` are d×d with the rows
/// of head `i` at `i*d/h .. (i+1)*d/h`, i.e. a stack of per-head (d/h)×d
/// projections.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaParams {
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
}

impl CmaParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("head count {heads} must divide d={d}")));
        }
        Ok(Self {
            heads,
            wq: store.add_uniform(format!("{prefix}.wq"), (d, d), d, trainable, rng),
            wk: store.add_uniform(format!("{prefix}.wk"), (d, d), d, trainable, rng),
            wv: store.add_uniform(format!("{prefix}.wv"), (d, d), d, trainable, rng),
            out: Linear::init(store, &format!("{prefix}.out"), d, d, trainable, rng),
        })
    }

    pub fn d(&self, store: &ParamStore) -> usize {
        store.value(self.wq).ncols()
    }

    /// Returns the output (n_q×d) and one n_q×n_kv attention matrix per head.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, kv: Var) -> Result<(Var, Vec<Var>)> {
        let d = self.d(store);
        let (nq, dq) = tape.value(queries).dim();
        let (nkv, dkv) = tape.value(kv).dim();
        if dq != d || dkv != d {
            return Err(Error::Shape(format!(
                "cross-modal attention expects width {d}, got queries {dq} and keys/values {dkv}"
            )));
        }
        if nq == 0 || nkv == 0 {
            return Err(Error::Shape("cross-modal attention needs at least one query and one key".into()));
        }
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul_bt(queries, wq);
        let k = tape.matmul_bt(kv, wk);
        let v = tape.matmul_bt(kv, wv);
        let mut head_out = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            head_out.push(tape.matmul(attn, vh));
            weights.push(attn);
        }
        let cat = if self.heads == 1 { head_out[0] } else { tape.concat_cols(&head_out) };
        Ok((self.out.forward(tape, store, cat)?, weights))
    }
}

/// One cross-modal encoder layer, post-norm:
/// `x = LN1(q + CMA(q, kv))`, `out = LN2(x + FFN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmeBlockParams {
    pub cma: CmaParams,
    pub ln1: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNormParams,
    pub dropout: f64,
}

impl CmeBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        dropout: f64,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            cma: CmaParams::init(store, &format!("{prefix}.cma"), d, heads, trainable, rng)?,
            ln1: LayerNormParams::init(store, &format!("{prefix}.ln1"), d, trainable),
            ff1: Linear::init(store, &format!("{prefix}.ff1"), d, ffn_mult * d, trainable, rng),
            ff2: Linear::init(store, &format!("{prefix}.ff2"), ffn_mult * d, d, trainable, rng),
            ln2: LayerNormParams::init(store, &format!("{prefix}.ln2"), d, trainable),
            dropout,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        kv: Var,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        let (attn_out, weights) = self.cma.forward(tape, store, queries, kv)?;
        let attn_out = nn::dropout(tape, attn_out, self.dropout, mode);
        let x = tape.add(queries, attn_out);
        let x = self.ln1.forward(tape, store, x);
        let h = self.ff1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        let h = self.ff2.forward(tape, store, h)?;
        let h = nn::dropout(tape, h, self.dropout, mode);
        let y = tape.add(x, h);
        Ok((self.ln2.forward(tape, store, y), weights))
    }
}

/// Acoustic gate: `g = sigmoid([R ; Q]·W_g + B_g)` with `W_g` 2d×d.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl GateParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add_uniform(format!("{prefix}.w"), (2 * d, d), 2 * d, true, rng),
            b: store.add_zeros(format!("{prefix}.b"), (1, d), true),
        }
    }

    /// Returns `(g, Q_gated)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, r: Var, q_raw: Var) -> Result<(Var, Var)> {
        let d = store.value(self.w).ncols();
        let (rd, qd) = (tape.value(r).dim(), tape.value(q_raw).dim());
        if rd != qd || rd.1 != d {
            return Err(Error::Shape(format!(
                "acoustic gate expects two M×{d} inputs, got {}×{} and {}×{}",
                rd.0, rd.1, qd.0, qd.1
            )));
        }
        let cat = tape.concat_cols(&[r, q_raw]);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let z = tape.matmul(cat, w);
        let z = tape.add_row(z, b);
        let g = tape.sigmoid(z);
        let gated = tape.mul(g, q_raw);
        Ok((g, gated))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmiParams {
    pub block_b: CmeBlockParams,
    pub block_c: CmeBlockParams,
    pub block_d: CmeBlockParams,
    pub gate: GateParams,
    /// 2d → d down-projection of `[Q_gated ; R]`.
    pub down: Linear,
}

impl MmiParams {
    pub fn init(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            block_b: CmeBlockParams::init(store, "mmi.block_b", d, heads, ffn_mult, dropout, true, rng)?,
            block_c: CmeBlockParams::init(store, "mmi.block_c", d, heads, ffn_mult, dropout, true, rng)?,
            block_d: CmeBlockParams::init(store, "mmi.block_d", d, heads, ffn_mult, dropout, true, rng)?,
            gate: GateParams::init(store, "mmi.gate", d, rng),
            down: Linear::init(store, "mmi.down", 2 * d, d, true, rng),
        })
    }
}

/// Tape handles for every intermediate of one fusion pass.
#[derive(Debug, Clone)]
pub struct FusionVars {
    pub p: Var,
    pub r: Var,
    pub q_raw: Var,
    pub g: Var,
    pub q_gated: Var,
    pub fused: Var,
    pub pooled: Var,
    pub attention_b: Vec<Var>,
    pub attention_c: Vec<Var>,
    pub attention_d: Vec<Var>,
}

/// Materialised values of one fusion pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// J'×d, block B output.
    pub p: Mat,
    /// M×d speech-aware word representations.
    pub r: Mat,
    /// M×d word-aware speech representations before gating.
    pub q_raw: Mat,
    pub q_gated: Mat,
    /// M×d gate values in (0, 1).
    pub g: Mat,
    /// M×d down-projection of `[Q_gated ; R]`.
    pub fused: Mat,
    /// 1×2d `[maxpool(A) ; maxpool(fused)]`.
    pub pooled: Mat,
    pub attention_b: Vec<Mat>,
    pub attention_c: Vec<Mat>,
    pub attention_d: Vec<Mat>,
}

impl FusionOutput {
    pub fn from_tape(tape: &Tape, v: &FusionVars) -> Self {
        let vals = |xs: &[Var]| xs.iter().map(|x| tape.value(*x).clone()).collect();
        Self {
            p: tape.value(v.p).clone(),
            r: tape.value(v.r).clone(),
            q_raw: tape.value(v.q_raw).clone(),
            q_gated: tape.value(v.q_gated).clone(),
            g: tape.value(v.g).clone(),
            fused: tape.value(v.fused).clone(),
            pooled: tape.value(v.pooled).clone(),
            attention_b: vals(&v.attention_b),
            attention_c: vals(&v.attention_c),
            attention_d: vals(&v.attention_d),
        }
    }
}

fn check_inputs(tape: &Tape, a: Var, t: Var) -> Result<()> {
    let (ja, da) = tape.value(a).dim();
    let (mt, dt) = tape.value(t).dim();
    if ja == 0 || mt == 0 {
        return Err(Error::Shape(format!("fusion needs non-empty inputs, got J'={ja}, M={mt}")));
    }
    if da != dt {
        return Err(Error::Shape(format!("speech width {da} differs from text width {dt}")));
    }
    Ok(())
}

pub fn fuse_on_tape(
    params: &MmiParams,
    tape: &mut Tape,
    store: &ParamStore,
    a: Var,
    t: Var,
    mode: &mut Mode<'_>,
) -> Result<FusionVars> {
    check_inputs(tape, a, t)?;
    let (p, attention_b) = params.block_b.forward(tape, store, a, t, mode)?;
    let (r, attention_c) = params.block_c.forward(tape, store, t, p, mode)?;
    let (q_raw, attention_d) = params.block_d.forward(tape, store, t, a, mode)?;
    let (g, q_gated) = params.gate.forward(tape, store, r, q_raw)?;
    let m = tape.concat_cols(&[q_gated, r]);
    let fused = params.down.forward(tape, store, m)?;
    let pa = tape.col_max(a);
    let pf = tape.col_max(fused);
    let pooled = tape.concat_cols(&[pa, pf]);

    let (jp, d) = tape.value(a).dim();
    let mt = tape.value(t).nrows();
    debug_assert_eq!(tape.value(p).dim(), (jp, d));
    debug_assert_eq!(tape.value(r).dim(), (mt, d));
    debug_assert_eq!(tape.value(q_gated).dim(), (mt, d));
    debug_assert_eq!(tape.value(fused).dim(), (mt, d));
    debug_assert_eq!(tape.value(pooled).dim(), (1, 2 * d));
    Ok(FusionVars {
        p,
        r,
        q_raw,
        g,
        q_gated,
        fused,
        pooled,
        attention_b,
        attention_c,
        attention_d,
    })
}

/// Evaluates cross-modal attention; returns the n_q×d output.
pub fn cross_modal_attention(params: &CmaParams, store: &ParamStore, queries: &Mat, kv: &Mat) -> Result<Mat> {
    cross_modal_attention_with_weights(params, store, queries, kv).map(|(o, _)| o)
}

pub fn cross_modal_attention_with_weights(
    params: &CmaParams,
    store: &ParamStore,
    queries: &Mat,
    kv: &Mat,
) -> Result<(Mat, Vec<Mat>)> {
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let k = tape.constant(kv.clone());
    let (out, w) = params.forward(&mut tape, store, q, k)?;
    Ok((tape.value(out).clone(), w.iter().map(|v| tape.value(*v).clone()).collect()))
}

pub fn cme_block(params: &CmeBlockParams, store: &ParamStore, queries: &Mat, kv: &Mat) -> Result<Mat> {
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let k = tape.constant(kv.clone());
    let (out, _) = params.forward(&mut tape, store, q, k, &mut Mode::Eval)?;
    Ok(tape.value(out).clone())
}

/// `R = C(T, B(A, T))`, M×d.
pub fn speech_aware_word_reps(
    block_b: &CmeBlockParams,
    block_c: &CmeBlockParams,
    store: &ParamStore,
    a: &Mat,
    t: &Mat,
) -> Result<Mat> {
    let p = cme_block(block_b, store, a, t)?;
    cme_block(block_c, store, t, &p)
}

/// `Q_raw = D(T, A)`, M×d.
pub fn word_aware_speech_reps(block_d: &CmeBlockParams, store: &ParamStore, a: &Mat, t: &Mat) -> Result<Mat> {
    cme_block(block_d, store, t, a)
}

/// Returns `(g, Q_gated)`.
pub fn acoustic_gate(params: &GateParams, store: &ParamStore, r: &Mat, q_raw: &Mat) -> Result<(Mat, Mat)> {
    let mut tape = Tape::new();
    let rv = tape.constant(r.clone());
    let qv = tape.constant(q_raw.clone());
    let (g, gated) = params.forward(&mut tape, store, rv, qv)?;
    Ok((tape.value(g).clone(), tape.value(gated).clone()))
}

pub fn fuse(params: &MmiParams, store: &ParamStore, a: &Mat, t: &Mat) -> Result<FusionOutput> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let tv = tape.constant(t.clone());
    let vars = fuse_on_tape(params, &mut tape, store, av, tv, &mut Mode::Eval)?;
    Ok(FusionOutput::from_tape(&tape, &vars))
}
