//! Multi-head scaled dot-product attention with residual and
//! post-layer-norm, over row-major token matrices.
//!
//! Queries attend over a context: self-attention passes the same matrix for
//! both, cross-attention passes a separate context. No positional encoding
//! is applied anywhere, so reordering rows can only reorder (never alter)
//! outputs; masked keys receive exactly zero weight.

use crate::error::{Error, Result};
use crate::params::{ones_vec, xavier_uniform, zeros_vec, Binding, ParamStore};
use crate::tape::{Tape, Var};

/// Epsilon of every layer normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// One attention block: query/key/value/output projections (`[D×D]` each)
/// plus layer-norm gain and bias, all registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    prefix: String,
    pub d_model: usize,
    pub heads: usize,
}

/// Forward result: the normalized output plus per-head attention weights
/// (exposed for diagnostics and tests).
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    /// Registers parameters under `<prefix>.*`. `d_model` must divide evenly
    /// into `heads`.
    pub fn init<R: rand::Rng>(
        prefix: &str,
        d_model: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("attention requires at least one head".into()));
        }
        if !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {d_model} is not divisible by {heads} heads"
            )));
        }
        for mat in ["wq", "wk", "wv", "wo"] {
            store.insert(
                format!("{prefix}.{mat}"),
                xavier_uniform(d_model, d_model, rng)?,
            )?;
        }
        store.insert(format!("{prefix}.ln.gain"), ones_vec(d_model)?)?;
        store.insert(format!("{prefix}.ln.bias"), zeros_vec(d_model)?)?;
        Ok(MultiHeadAttention {
            prefix: prefix.to_string(),
            d_model,
            heads,
        })
    }

    /// Attention of a matrix over itself; `valid` masks both queries' keys.
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        valid: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        self.attend(tape, bind, x, x, valid)
    }

    /// Attention of `queries` over a separate `context`; the output has the
    /// query matrix's shape.
    pub fn cross_attention(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        queries: Var,
        context: Var,
        context_valid: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        self.attend(tape, bind, queries, context, context_valid)
    }

    fn attend(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        queries: Var,
        context: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        for (v, what) in [(queries, "queries"), (context, "context")] {
            let t = tape.value(v);
            if t.rank() != 2 || t.cols() != self.d_model {
                return Err(Error::Shape(format!(
                    "attention {what} must be [rows x {}], got {:?}",
                    self.d_model,
                    t.shape()
                )));
            }
        }
        if let Some(mask) = key_valid {
            let ctx_rows = tape.value(context).rows();
            if mask.len() != ctx_rows {
                return Err(Error::Shape(format!(
                    "key mask length {} does not match {ctx_rows} context rows",
                    mask.len()
                )));
            }
        }

        let wq = bind.var(tape, &format!("{}.wq", self.prefix))?;
        let wk = bind.var(tape, &format!("{}.wk", self.prefix))?;
        let wv = bind.var(tape, &format!("{}.wv", self.prefix))?;
        let wo = bind.var(tape, &format!("{}.wo", self.prefix))?;

        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(context, wk)?;
        let v = tape.matmul(context, wv)?;

        let head_dim = self.d_model / self.heads;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
        let mut heads_out = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * head_dim;
            let qh = tape.slice_cols(q, start, head_dim)?;
            let kh = tape.slice_cols(k, start, head_dim)?;
            let vh = tape.slice_cols(v, start, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, inv_sqrt)?;
            let w = tape.softmax_rows_masked(scaled, key_valid)?;
            // Exact contraction keeps outputs bit-identical when the key
            // rows (and mask) are permuted.
            let ctx = tape.matmul_exact(w, vh)?;
            heads_out.push(ctx);
            weights.push(w);
        }

        let cat = tape.concat_cols(&heads_out)?;
        let proj = tape.matmul(cat, wo)?;
        let residual = tape.add(queries, proj)?;
        let gain = bind.var(tape, &format!("{}.ln.gain", self.prefix))?;
        let bias = bind.var(tape, &format!("{}.ln.bias", self.prefix))?;
        let out = tape.layer_norm(residual, gain, bias, LN_EPS)?;
        Ok(AttentionOutput { out, weights })
    }
}
