//! Scoring heads and the training objective.

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamRegistry, Real, Tape, Tensor, Var};

/// Balancing weight between the product-branch and query-branch vectors in
/// search scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub w_logit: ParamId,
    /// When set, the stored value is used as the weight directly.
    pub unconstrained: bool,
}

impl PredictorParams {
    /// Starts at `w = 0.5` in both parameterizations.
    pub fn register<F: Real>(params: &mut ParamRegistry<F>, unconstrained: bool) -> Result<Self> {
        let init = if unconstrained { 0.5 } else { 0.0 };
        let w_logit = params.register("predictor.w", Tensor::filled(&[1], F::of(init)))?;
        Ok(Self { w_logit, unconstrained })
    }

    pub fn weight<F: Real>(&self, tape: &mut Tape<'_, F>) -> Var {
        let raw = tape.param(self.w_logit);
        if self.unconstrained {
            raw
        } else {
            tape.sigmoid(raw)
        }
    }

    pub fn weight_value<F: Real>(&self, params: &ParamRegistry<F>) -> f64 {
        let raw = params.get(self.w_logit).values()[0].as_f64();
        if self.unconstrained {
            raw
        } else {
            1.0 / (1.0 + (-raw).exp())
        }
    }
}

/// `[B, d]` representations against `[B, C]` candidate ids → `[B, C]` inner
/// products with the candidates' product embeddings.
pub fn score_candidates<F: Real>(
    tape: &mut Tape<'_, F>,
    product_table: ParamId,
    f: Var,
    candidates: &[u32],
    n_candidates: usize,
) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 2 || n_candidates == 0 || candidates.len() != s[0] * n_candidates {
        return Err(Error::ShapeMismatch {
            op: "score_candidates",
            left: s,
            right: vec![candidates.len(), n_candidates],
        });
    }
    if candidates.contains(&0) {
        return Err(Error::data("padding id 0 among scoring candidates"));
    }
    let (batch, d) = (s[0], s[1]);
    let table = tape.param(product_table);
    let emb = tape.gather(table, candidates, &[batch, n_candidates])?;
    let col = tape.reshape(f, &[batch, d, 1])?;
    let scores = tape.bmm(emb, col, false, false)?;
    tape.reshape(scores, &[batch, n_candidates])
}

/// `w·fp + (1 - w)·fq`, written as `fq + w·(fp - fq)`.
pub fn blend<F: Real>(tape: &mut Tape<'_, F>, w: Var, fp: Var, fq: Var) -> Result<Var> {
    let diff = tape.sub(fp, fq)?;
    let scaled = tape.mul_scalar(diff, w)?;
    tape.add(fq, scaled)
}

/// `predict + α·ssl`; a missing ssl term contributes nothing.
pub fn joint_loss<F: Real>(tape: &mut Tape<'_, F>, predict: Var, ssl: Option<Var>, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::config(format!("alpha must be non-negative, got {alpha}")));
    }
    match ssl {
        Some(s) => {
            let weighted = tape.scale(s, F::of(alpha));
            tape.add(predict, weighted)
        }
        None => Ok(predict),
    }
}
