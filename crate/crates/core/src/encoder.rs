//! Dual-branch transformer encoder. Each layer runs self-attention within a
//! branch, cross-attention to the other branch and a feed-forward block,
//! each wrapped as `LayerNorm(x + Dropout(sublayer(x)))`.

use crate::error::{Error, Result};
use crate::numeric::{name_seed, xavier_uniform, ParamId, ParamRegistry, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub msa: AttentionParams,
    pub msa_norm: NormParams,
    /// Absent when the stack is built without cross-attention.
    pub mca: Option<(AttentionParams, NormParams)>,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ffn_norm: NormParams,
}

impl EncoderLayerParams {
    fn ids(&self) -> Vec<ParamId> {
        let att = |a: &AttentionParams| [a.wq, a.wk, a.wv, a.wo];
        let mut ids = att(&self.msa).to_vec();
        ids.extend([self.msa_norm.gamma, self.msa_norm.beta]);
        if let Some((a, n)) = &self.mca {
            ids.extend(att(a));
            ids.extend([n.gamma, n.beta]);
        }
        ids.extend([self.w1, self.b1, self.w2, self.b2, self.ffn_norm.gamma, self.ffn_norm.beta]);
        ids
    }
}

/// `L` encoder layers. Several roles (product branch, query branch,
/// recommendation) may hold the same stack through registry aliases.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayerParams>,
    pub heads: usize,
    pub dropout: f64,
    /// `(suffix, id)` of every parameter, used to build aliases.
    names: Vec<(String, ParamId)>,
}

struct Builder<'a, F> {
    params: &'a mut ParamRegistry<F>,
    prefix: &'a str,
    seed: u64,
    names: Vec<(String, ParamId)>,
}

impl<F: Real> Builder<'_, F> {
    fn add(&mut self, suffix: String, t: Tensor<F>) -> Result<ParamId> {
        let id = self.params.register(format!("{}.{suffix}", self.prefix), t)?;
        self.names.push((suffix, id));
        Ok(id)
    }

    fn matrix(&mut self, layer: usize, sub: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let suffix = format!("layer{layer}.{sub}");
        let seed = name_seed(self.seed, &format!("{}.{suffix}", self.prefix));
        self.add(suffix, xavier_uniform(&[rows, cols], seed))
    }

    fn vector(&mut self, layer: usize, sub: &str, len: usize, fill: f64) -> Result<ParamId> {
        self.add(format!("layer{layer}.{sub}"), Tensor::filled(&[len], F::of(fill)))
    }

    fn attention(&mut self, layer: usize, kind: &str, d: usize) -> Result<AttentionParams> {
        Ok(AttentionParams {
            wq: self.matrix(layer, &format!("{kind}.wq"), d, d)?,
            wk: self.matrix(layer, &format!("{kind}.wk"), d, d)?,
            wv: self.matrix(layer, &format!("{kind}.wv"), d, d)?,
            wo: self.matrix(layer, &format!("{kind}.wo"), d, d)?,
        })
    }

    fn norm(&mut self, layer: usize, kind: &str, d: usize) -> Result<NormParams> {
        Ok(NormParams {
            gamma: self.vector(layer, &format!("{kind}.ln_gamma"), d, 1.0)?,
            beta: self.vector(layer, &format!("{kind}.ln_beta"), d, 0.0)?,
        })
    }
}

pub struct StackShape {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub cross: bool,
    pub dropout: f64,
}

impl EncoderStack {
    pub fn register<F: Real>(
        params: &mut ParamRegistry<F>,
        prefix: &str,
        shape: &StackShape,
        seed: u64,
    ) -> Result<Self> {
        let d = shape.d;
        if shape.heads == 0 || !d.is_multiple_of(shape.heads) {
            return Err(Error::config(format!("{} heads do not divide d = {d}", shape.heads)));
        }
        let mut b = Builder {
            params,
            prefix,
            seed,
            names: Vec::new(),
        };
        let mut layers = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let msa = b.attention(l, "msa", d)?;
            let mca = if shape.cross { Some(b.attention(l, "mca", d)?) } else { None };
            let w1 = b.matrix(l, "ffn.w1", d, 2 * d)?;
            let w2 = b.matrix(l, "ffn.w2", 2 * d, d)?;
            let b1 = b.vector(l, "ffn.b1", 2 * d, 0.0)?;
            let b2 = b.vector(l, "ffn.b2", d, 0.0)?;
            let msa_norm = b.norm(l, "msa", d)?;
            let mca = match mca {
                Some(a) => Some((a, b.norm(l, "mca", d)?)),
                None => None,
            };
            let ffn_norm = b.norm(l, "ffn", d)?;
            layers.push(EncoderLayerParams {
                msa,
                msa_norm,
                mca,
                w1,
                b1,
                w2,
                b2,
                ffn_norm,
            });
        }
        let names = b.names;
        Ok(Self {
            layers,
            heads: shape.heads,
            dropout: shape.dropout,
            names,
        })
    }

    /// Registers `alias_prefix.*` names pointing at this stack's storage and
    /// returns a handle to the same parameters.
    pub fn alias<F: Real>(&self, params: &mut ParamRegistry<F>, alias_prefix: &str) -> Result<Self> {
        for (suffix, id) in &self.names {
            let canonical = params.name(*id).to_string();
            params.alias(format!("{alias_prefix}.{suffix}"), &canonical)?;
        }
        Ok(self.clone())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(EncoderLayerParams::ids).collect()
    }

    pub fn numel<F: Real>(&self, params: &ParamRegistry<F>) -> usize {
        self.param_ids().into_iter().map(|id| params.get(id).len()).sum()
    }

    pub fn has_cross_attention(&self) -> bool {
        self.layers.iter().all(|l| l.mca.is_some())
    }
}

/// Multi-head attention with input projections and output projection:
/// `Concat(head₁..headₕ)·Wᴼ`, head `i` using column block `i` of `Wᵠ, Wᴷ, Wᵛ`.
pub fn multi_head_attention<F: Real>(
    tape: &mut Tape<'_, F>,
    p: &AttentionParams,
    query: Var,
    key_value: Var,
    key_mask: &[bool],
    heads: usize,
) -> Result<Var> {
    let wq = tape.param(p.wq);
    let wk = tape.param(p.wk);
    let wv = tape.param(p.wv);
    let wo = tape.param(p.wo);
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(key_value, wk)?;
    let v = tape.matmul(key_value, wv)?;
    let core = tape.attention(q, k, v, key_mask, heads)?;
    tape.matmul(core, wo)
}

fn residual_norm<F: Real>(tape: &mut Tape<'_, F>, x: Var, sub: Var, norm: &NormParams, dropout: f64) -> Result<Var> {
    let sub = tape.dropout(sub, dropout)?;
    let sum = tape.add(x, sub)?;
    let gamma = tape.param(norm.gamma);
    let beta = tape.param(norm.beta);
    tape.layer_norm(sum, gamma, beta)
}

fn feed_forward<F: Real>(tape: &mut Tape<'_, F>, layer: &EncoderLayerParams, x: Var, dropout: f64) -> Result<Var> {
    let w1 = tape.param(layer.w1);
    let b1 = tape.param(layer.b1);
    let w2 = tape.param(layer.w2);
    let b2 = tape.param(layer.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w2)?;
    let h = tape.add_bias(h, b2)?;
    residual_norm(tape, x, h, &layer.ffn_norm, dropout)
}

fn self_attention<F: Real>(tape: &mut Tape<'_, F>, stack: &EncoderStack, l: usize, x: Var, mask: &[bool]) -> Result<Var> {
    let layer = &stack.layers[l];
    let a = multi_head_attention(tape, &layer.msa, x, x, mask, stack.heads)?;
    residual_norm(tape, x, a, &layer.msa_norm, stack.dropout)
}

fn cross_attention<F: Real>(
    tape: &mut Tape<'_, F>,
    stack: &EncoderStack,
    l: usize,
    x: Var,
    other: Var,
    other_mask: &[bool],
) -> Result<Var> {
    match &stack.layers[l].mca {
        Some((att, norm)) => {
            let a = multi_head_attention(tape, att, x, other, other_mask, stack.heads)?;
            residual_norm(tape, x, a, norm, stack.dropout)
        }
        None => Ok(x),
    }
}

/// Encodes the product branch `[B, T, d]` and query branch `[B, T', d]`
/// (`T' ∈ {T, T+1}`) of a search batch. `product` and `query` are the stacks
/// serving each branch; they are the same stack unless branch sharing is
/// disabled. Returns `(Hᵖ, Hᵠ)`.
pub fn encode_search<F: Real>(
    tape: &mut Tape<'_, F>,
    product: &EncoderStack,
    query: &EncoderStack,
    ep: Var,
    mask_p: &[bool],
    eq: Var,
    mask_q: &[bool],
) -> Result<(Var, Var)> {
    let sp = tape.shape(ep).to_vec();
    let sq = tape.shape(eq).to_vec();
    if sp.len() != 3 || sq.len() != 3 || sp[0] != sq[0] || sp[2] != sq[2] || !(sq[1] == sp[1] || sq[1] == sp[1] + 1) {
        return Err(Error::ShapeMismatch {
            op: "encode_search",
            left: sp,
            right: sq,
        });
    }
    if product.layers.len() != query.layers.len() {
        return Err(Error::config("branch stacks differ in depth"));
    }
    let (mut hp, mut hq) = (ep, eq);
    for l in 0..product.layers.len() {
        let ap = self_attention(tape, product, l, hp, mask_p)?;
        let aq = self_attention(tape, query, l, hq, mask_q)?;
        let cp = cross_attention(tape, product, l, ap, aq, mask_q)?;
        let cq = cross_attention(tape, query, l, aq, ap, mask_p)?;
        hp = feed_forward(tape, &product.layers[l], cp, product.dropout)?;
        hq = feed_forward(tape, &query.layers[l], cq, query.dropout)?;
    }
    Ok((hp, hq))
}

/// Encodes a recommendation batch: the query branch is inactive and the
/// cross-attention sub-layer attends to the product branch itself.
pub fn encode_rec<F: Real>(tape: &mut Tape<'_, F>, stack: &EncoderStack, e: Var, mask: &[bool]) -> Result<Var> {
    if tape.shape(e).len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "encode_rec",
            left: tape.shape(e).to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let mut h = e;
    for l in 0..stack.layers.len() {
        let a = self_attention(tape, stack, l, h, mask)?;
        let c = cross_attention(tape, stack, l, a, a, mask)?;
        h = feed_forward(tape, &stack.layers[l], c, stack.dropout)?;
    }
    Ok(h)
}
