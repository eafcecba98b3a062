//! Single-head scaled dot-product self-attention with learned Q/K/V and
//! output projections.
//!
//! Composed from primitive tape ops, so its gradient comes from the same
//! reverse rules the rest of the graph uses. There is no positional
//! encoding here: permuting the input token order permutes the output
//! rows identically, which the anatomy pooling path relies on.

use rand::Rng;

use super::{AdError, Binding, ParamId, ParamSet, Tape, Var};

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub dim: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl SelfAttention {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mat = |params: &mut ParamSet, rng: &mut R, suffix: &str| {
            params.register_normal(&format!("{prefix}.{suffix}"), vec![dim, dim], rng, scale)
        };
        SelfAttention {
            dim,
            wq: mat(params, rng, "wq"),
            bq: params.register_zeros(&format!("{prefix}.bq"), vec![dim]),
            wk: mat(params, rng, "wk"),
            bk: params.register_zeros(&format!("{prefix}.bk"), vec![dim]),
            wv: mat(params, rng, "wv"),
            bv: params.register_zeros(&format!("{prefix}.bv"), vec![dim]),
            wo: mat(params, rng, "wo"),
            bo: params.register_zeros(&format!("{prefix}.bo"), vec![dim]),
        }
    }

    /// tokens: [t, dim] -> [t, dim].
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        tokens: Var,
    ) -> Result<Var, AdError> {
        let q = self.project(tape, binding, tokens, self.wq, self.bq)?;
        let k = self.project(tape, binding, tokens, self.wk, self.bk)?;
        let v = self.project(tape, binding, tokens, self.wv, self.bv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (self.dim as f64).sqrt())?;
        let weights = tape.softmax_rows(scaled)?;
        let mixed = tape.matmul(weights, v)?;
        self.project(tape, binding, mixed, self.wo, self.bo)
    }

    fn project(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: Var,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var, AdError> {
        let projected = tape.matmul(x, binding.var(w))?;
        tape.add_row_broadcast(projected, binding.var(b))
    }
}

/// Free-standing form matching the rest of the op surface.
pub fn self_attention(
    tape: &mut Tape,
    binding: &Binding,
    tokens: Var,
    params: &SelfAttention,
) -> Result<Var, AdError> {
    params.forward(tape, binding, tokens)
}
