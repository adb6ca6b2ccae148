//! Intent-oriented sessions: locating `N` sessions per sequence, pooling
//! them, adding each session back onto its member positions, and the
//! self-supervised discrimination/alignment loss.
//!
//! Ranges live on a continuous axis where position `t` covers `[t, t+1)`
//! and is represented by its midpoint `t + ½`.

use serde::{Deserialize, Serialize};

use crate::config::MembershipMode;
use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamRegistry, Real, Tape, Tensor, Var};

/// `atanh(0.5)`: with a zero projection the initial half-length becomes
/// `ReLU(tanh(b))·V/N = V/(2N)`, reproducing the uniform split.
pub const LENGTH_BIAS_INIT: f64 = 0.549_306_144_334_054_9;

#[derive(Clone, Debug, PartialEq)]
pub struct IsmParams {
    /// `[N·d, 2N]`: first `N` outputs are offset logits, last `N` length logits.
    pub w: ParamId,
    /// `[N]` bias added to the length logits.
    pub b: ParamId,
    pub n: usize,
    pub d: usize,
}

impl IsmParams {
    /// `W` starts at zero so that the untrained layout is the uniform split.
    pub fn register<F: Real>(params: &mut ParamRegistry<F>, n: usize, d: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("session count must be positive"));
        }
        let w = params.register("session.w", Tensor::zeros(&[n * d, 2 * n]))?;
        let b = params.register("session.b", Tensor::filled(&[n], F::of(LENGTH_BIAS_INIT)))?;
        Ok(Self { w, b, n, d })
    }
}

/// Uniform split of `[0, t]` into `n` sessions, ranges clipped to `[0, t]`
/// like every resolved layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformLayout {
    pub centers: Vec<f64>,
    pub ranges: Vec<(f64, f64)>,
}

pub fn init_uniform(t: usize, n: usize) -> Result<UniformLayout> {
    if n == 0 || n > t {
        return Err(Error::config(format!("cannot split {t} positions into {n} sessions")));
    }
    let width = t as f64 / n as f64;
    let centers: Vec<f64> = (1..=n).map(|i| (i as f64 - 0.5) * width).collect();
    let len = t as f64;
    let ranges = centers
        .iter()
        .map(|c| ((c - width / 2.0).clamp(0.0, len), (c + width / 2.0).clamp(0.0, len)))
        .collect();
    Ok(UniformLayout { centers, ranges })
}

/// Mean-pooling weights of the uniform chunks, `[B, N, T]`. Chunk `i` holds
/// the positions whose midpoint falls in `[(i-1)V/N, iV/N)`. When `V < N`
/// a chunk can be empty; it then takes the position under its center.
pub fn chunk_weights(valid: &[usize], t: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; valid.len() * n * t];
    for (b, &v) in valid.iter().enumerate() {
        let width = v as f64 / n as f64;
        for i in 0..n {
            let row = &mut out[(b * n + i) * t..(b * n + i + 1) * t];
            let (lo, hi) = (i as f64 * width, (i + 1) as f64 * width);
            let members: Vec<usize> = (0..v).filter(|&p| lo <= p as f64 + 0.5 && (p as f64 + 0.5) < hi).collect();
            if members.is_empty() {
                let center = ((i as f64 + 0.5) * width).floor() as usize;
                row[center.min(v - 1)] = 1.0;
            } else {
                let share = 1.0 / members.len() as f64;
                members.into_iter().for_each(|p| row[p] = share);
            }
        }
    }
    out
}

/// Indicator membership `lo ≤ t + ½ < hi` over valid positions, `[B, N, T]`.
/// A session covering no midpoint takes the position nearest its center.
pub fn hard_membership(ranges: &[f64], valid: &[usize], t: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; valid.len() * n * t];
    for (b, &v) in valid.iter().enumerate() {
        for i in 0..n {
            let r = b * n + i;
            let (lo, hi) = (ranges[2 * r], ranges[2 * r + 1]);
            let row = &mut out[r * t..(r + 1) * t];
            let mut any = false;
            for (p, w) in row.iter_mut().enumerate().take(v) {
                let mid = p as f64 + 0.5;
                if lo <= mid && mid < hi {
                    *w = 1.0;
                    any = true;
                }
            }
            if !any {
                let center = ((lo + hi) / 2.0).floor().max(0.0) as usize;
                row[center.min(v - 1)] = 1.0;
            }
        }
    }
    out
}

/// Splits `times[..valid]` at its `n - 1` largest consecutive gaps (earlier
/// gap wins a tie). Returns half-open position ranges `[start, end)`; when
/// there are fewer gaps than needed the trailing sessions repeat the last
/// position.
pub fn largest_gap_ranges(times: &[i64], n: usize) -> Vec<(usize, usize)> {
    let v = times.len();
    let mut gaps: Vec<(i64, usize)> = times.windows(2).enumerate().map(|(i, w)| (w[1] - w[0], i)).collect();
    gaps.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut cuts: Vec<usize> = gaps.iter().take(n.saturating_sub(1)).map(|&(_, i)| i + 1).collect();
    cuts.sort_unstable();
    let mut ranges = Vec::with_capacity(n);
    let mut start = 0;
    for cut in cuts {
        ranges.push((start, cut));
        start = cut;
    }
    ranges.push((start, v));
    while ranges.len() < n {
        ranges.push((v - 1, v));
    }
    ranges
}

/// Where the session ranges come from.
#[derive(Clone, Copy, Debug)]
pub enum LayoutSource<'a> {
    /// Predicted from the encoded sequence by the session projection.
    Learned(&'a IsmParams),
    /// Largest-gap split of the `[B, T]` timestamps.
    TimeGaps(&'a [i64]),
}

pub struct SessionOutput {
    /// `[B, N, d]` session representations.
    pub reps: Var,
    /// `[B, T, d]` enhanced sequence.
    pub enhanced: Var,
    /// `[B, N, 2]` resolved `(lo, hi)` ranges.
    pub ranges: Var,
    /// `[B, N, T]` membership weights.
    pub membership: Var,
    /// `[B, N]` offsets and half-lengths, learned layouts only.
    pub offsets: Option<Var>,
    pub half_lengths: Option<Var>,
}

/// Runs the session module on `h: [B, T, d]` whose row `b` has `valid[b]`
/// leading valid positions.
pub fn run_sessions<F: Real>(
    tape: &mut Tape<'_, F>,
    h: Var,
    valid: &[usize],
    n: usize,
    source: LayoutSource<'_>,
    membership: MembershipMode,
    tau: f64,
) -> Result<SessionOutput> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || n == 0 || valid.len() != s[0] || valid.iter().any(|&v| v == 0 || v > s[1]) {
        return Err(Error::ShapeMismatch {
            op: "run_sessions",
            left: s,
            right: vec![valid.len(), n],
        });
    }
    let (batch, t, d) = (s[0], s[1], s[2]);
    let consts = |f: &dyn Fn(usize, usize) -> f64| -> Vec<F> {
        (0..batch * n).map(|r| F::of(f(r / n, r % n))).collect()
    };

    let (ranges, offsets, half_lengths) = match source {
        LayoutSource::Learned(ism) => {
            if ism.n != n || ism.d != d {
                return Err(Error::ShapeMismatch {
                    op: "run_sessions",
                    left: vec![n, d],
                    right: vec![ism.n, ism.d],
                });
            }
            let chunks = tape.constant(&[batch, n, t], chunk_weights(valid, t, n).into_iter().map(F::of).collect())?;
            let pooled = tape.bmm(chunks, h, false, false)?;
            let flat = tape.reshape(pooled, &[batch, n * d])?;
            let act = tape.relu(flat);
            let w = tape.param(ism.w);
            let logits = tape.matmul(act, w)?;
            let off_logits = tape.slice(logits, 1, 0, n)?;
            let len_logits = tape.slice(logits, 1, n, n)?;

            let off_scale = tape.constant(&[batch, n], consts(&|b, _| valid[b] as f64 / (2 * n) as f64))?;
            let off = tape.tanh(off_logits);
            let offsets = tape.mul(off, off_scale)?;
            let base = tape.constant(&[batch, n], consts(&|b, i| (i as f64 + 0.5) * (valid[b] as f64 / n as f64)))?;
            let centers = tape.add(base, offsets)?;

            let bias = tape.param(ism.b);
            let len = tape.add_bias(len_logits, bias)?;
            let len = tape.tanh(len);
            let len = tape.relu(len);
            // ReLU(tanh(b)) is 0.5 only up to rounding; shifting by the rounding
            // residue makes the zero-projection layout exactly uniform.
            let at_init = F::of(LENGTH_BIAS_INIT).tanh();
            let len = tape.affine(len, F::one(), F::of(0.5) - at_init);
            let len_scale = tape.constant(&[batch, n], consts(&|b, _| valid[b] as f64 / n as f64))?;
            let half = tape.mul(len, len_scale)?;
            let ranges = tape.resolve_ranges(centers, half, valid)?;
            (ranges, Some(offsets), Some(half))
        }
        LayoutSource::TimeGaps(times) => {
            if times.len() != batch * t {
                return Err(Error::ShapeMismatch {
                    op: "run_sessions",
                    left: vec![batch, t],
                    right: vec![times.len()],
                });
            }
            let mut values = Vec::with_capacity(batch * n * 2);
            for (b, &v) in valid.iter().enumerate() {
                for (lo, hi) in largest_gap_ranges(&times[b * t..b * t + v], n) {
                    values.push(F::of(lo as f64));
                    values.push(F::of(hi as f64));
                }
            }
            (tape.constant(&[batch, n, 2], values)?, None, None)
        }
    };

    let hard = matches!(source, LayoutSource::TimeGaps(_)) || membership == MembershipMode::Hard;
    let weights = if hard {
        let r: Vec<f64> = tape.value(ranges).iter().map(|v| v.as_f64()).collect();
        let m = hard_membership(&r, valid, t, n);
        tape.constant(&[batch, n, t], m.into_iter().map(F::of).collect())?
    } else {
        let lo = tape.slice(ranges, 2, 0, 1)?;
        let lo = tape.reshape(lo, &[batch, n])?;
        let hi = tape.slice(ranges, 2, 1, 1)?;
        let hi = tape.reshape(hi, &[batch, n])?;
        tape.membership(lo, hi, valid, t, tau)?
    };
    let normalized = tape.row_normalize(weights)?;
    let reps = tape.bmm(normalized, h, false, false)?;
    let spread = tape.bmm(weights, reps, true, false)?;
    let enhanced = tape.add(h, spread)?;
    Ok(SessionOutput {
        reps,
        enhanced,
        ranges,
        membership: weights,
        offsets,
        half_lengths,
    })
}

/// Sum over `i < N` of `cos(x_i, x_{i+1})` for every batch row, `[B]`-summed.
fn adjacent_similarity<F: Real>(tape: &mut Tape<'_, F>, x: Var) -> Result<Option<Var>> {
    let s = tape.shape(x).to_vec();
    let n = s[1];
    if n < 2 {
        return Ok(None);
    }
    let a = tape.slice(x, 1, 0, n - 1)?;
    let b = tape.slice(x, 1, 1, n - 1)?;
    let c = tape.cosine(a, b)?;
    Ok(Some(tape.sum(c)))
}

/// Session discrimination and alignment loss, averaged over the batch.
/// Recommendation (`q = None`): `Σ cos(pᵢ, pᵢ₊₁)`. Search: adds the same
/// term for the query sessions and subtracts `Σ cos(pᵢ, qᵢ)`.
pub fn ssl_loss<F: Real>(tape: &mut Tape<'_, F>, p: Var, q: Option<Var>) -> Result<Var> {
    let s = tape.shape(p).to_vec();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "ssl_loss",
            left: s,
            right: vec![0, 0, 0],
        });
    }
    let batch = s[0];
    let mut terms = Vec::new();
    if let Some(t) = adjacent_similarity(tape, p)? {
        terms.push(t);
    }
    if let Some(q) = q {
        if tape.shape(q) != s.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "ssl_loss",
                left: s,
                right: tape.shape(q).to_vec(),
            });
        }
        if let Some(t) = adjacent_similarity(tape, q)? {
            terms.push(t);
        }
        let align = tape.cosine(p, q)?;
        let align = tape.sum(align);
        terms.push(tape.scale(align, -F::one()));
    }
    let Some(mut total) = terms.first().copied() else {
        return tape.constant(&[1], vec![F::zero()]);
    };
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, F::one() / F::of(batch as f64)))
}

/// Hard session assignment of one sequence, exportable as a diagnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionAssignment {
    pub sequence: u64,
    pub valid_len: usize,
    pub ranges: Vec<(f64, f64)>,
    /// Member positions of each session under the indicator rule.
    pub members: Vec<Vec<usize>>,
}

impl SessionAssignment {
    pub fn from_ranges(sequence: u64, valid_len: usize, ranges: Vec<(f64, f64)>) -> Self {
        let flat: Vec<f64> = ranges.iter().flat_map(|&(a, b)| [a, b]).collect();
        let m = hard_membership(&flat, &[valid_len], valid_len, ranges.len());
        let members = m
            .chunks(valid_len)
            .map(|row| row.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(p, _)| p).collect())
            .collect();
        Self {
            sequence,
            valid_len,
            ranges,
            members,
        }
    }

    /// Interior boundaries implied by the hard sessions: every `k` in
    /// `1..valid_len` where some session starts or ends.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .members
            .iter()
            .filter(|m| !m.is_empty())
            .flat_map(|m| [m[0], m[m.len() - 1] + 1])
            .filter(|&k| k > 0 && k < self.valid_len)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Symmetric distance between two segmentations of a sequence of `len`
/// positions, given by their interior boundaries: the mean distance from
/// each predicted boundary to the nearest planted one, averaged with the
/// same quantity in the other direction. The sequence ends count as
/// boundaries on both sides, so a missing boundary costs its distance to
/// the nearer end.
pub fn boundary_error(predicted: &[usize], planted: &[usize], len: usize) -> f64 {
    let one_way = |from: &[usize], to: &[usize]| {
        if from.is_empty() {
            return 0.0;
        }
        let total: f64 = from
            .iter()
            .map(|&p| {
                to.iter()
                    .chain(&[0, len])
                    .map(|&q| (p as f64 - q as f64).abs())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / from.len() as f64
    };
    0.5 * (one_way(predicted, planted) + one_way(planted, predicted))
}
