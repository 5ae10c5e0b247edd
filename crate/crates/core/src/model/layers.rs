//! Model stages as free functions over a [`Graph`].
//!
//! Sequences are handled as `[M_pad, F]` matrices; the leading batch axis of
//! a [`SampledSequence`](crate::sampler::SampledSequence) is always 1 and is
//! dropped before these run.

use std::ops::Range;

use wsdmil_autograd::{Graph, Tensor, Var};

use super::config::Pooling;
use crate::error::{Error, Result};

/// Additive logit for excluded keys.
pub const MASK_NEG: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

/// Pseudoinverse used by the Nyström stage. The training path uses the
/// iterative form; tests plug in an exact one.
pub type PinvFn<'a> = &'a dyn Fn(&mut Graph, Var) -> Result<Var>;

pub struct NystromParams {
    pub qkv: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

pub struct WindowParams {
    pub qkv: Var,
    /// `[heads, 3]`.
    pub conv: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

pub struct SergParams {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

pub struct AggregatorParams {
    /// `[hidden, F]`.
    pub v: Var,
    /// `[hidden]`.
    pub w: Var,
}

pub struct ClassifierParams {
    /// `[C, F]`.
    pub weight: Var,
    pub bias: Var,
}

fn matrix_dims(g: &Graph, x: Var) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [m, f] => Ok((m, f)),
        ref s => Err(Error::Argument(format!("expected a [M_pad, F] sequence, got {s:?}"))),
    }
}

fn check_mask(mask: &[bool], m_pad: usize) -> Result<()> {
    if mask.len() != m_pad {
        return Err(Error::Argument(format!(
            "mask has {} entries for {m_pad} positions",
            mask.len()
        )));
    }
    Ok(())
}

fn indicator(values: impl Iterator<Item = bool>, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = values.map(|b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("indicator sized by caller")
}

fn key_bias(values: impl Iterator<Item = bool>, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = values.map(|b| if b { 0.0 } else { MASK_NEG }).collect();
    Tensor::new(shape.to_vec(), data).expect("bias sized by caller")
}

fn affine(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    Ok(g.add(y, bias)?)
}

/// Real positions of each of `landmarks` contiguous segments, dropping
/// segments that hold no real position.
pub fn landmark_segments(mask: &[bool], landmarks: usize) -> Vec<Vec<usize>> {
    let n = mask.len();
    let m = landmarks.clamp(1, n.max(1));
    (0..m)
        .map(|s| (s * n / m..(s + 1) * n / m).filter(|&i| mask[i]).collect::<Vec<_>>())
        .filter(|seg| !seg.is_empty())
        .collect()
}

/// Global attention approximated through segment-mean landmarks:
/// `Linear(softmax(Q K̃ᵀ) · pinv(softmax(Q̃ K̃ᵀ)) · softmax(Q̃ Kᵀ) · V)`.
pub fn nystrom_attention(
    g: &mut Graph,
    x: Var,
    mask: &[bool],
    landmarks: usize,
    pinv: PinvFn,
    p: &NystromParams,
) -> Result<Var> {
    let (m_pad, f) = matrix_dims(g, x)?;
    check_mask(mask, m_pad)?;
    let segs = landmark_segments(mask, landmarks);
    if segs.is_empty() {
        return Err(Error::Argument("sequence has no real positions".into()));
    }
    let padded = mask.iter().any(|&b| !b);

    let qkv = g.matmul(x, p.qkv)?;
    let q = g.narrow(qkv, 1, 0, f)?;
    let k = g.narrow(qkv, 1, f, f)?;
    let v = g.narrow(qkv, 1, 2 * f, f)?;

    let mut avg = Tensor::zeros(&[segs.len(), m_pad]);
    for (s, seg) in segs.iter().enumerate() {
        let w = 1.0 / seg.len() as f64;
        for &i in seg {
            avg.data_mut()[s * m_pad + i] = w;
        }
    }
    let avg = g.constant(avg);
    let q_land = g.matmul(avg, q)?;
    let k_land = g.matmul(avg, k)?;

    let left = g.matmul_nt(q, k_land)?;
    let left = g.softmax(left, 1)?;
    let core = g.matmul_nt(q_land, k_land)?;
    let core = g.softmax(core, 1)?;
    let mut right = g.matmul_nt(q_land, k)?;
    if padded {
        let bias = g.constant(key_bias(mask.iter().copied(), &[m_pad]));
        right = g.add(right, bias)?;
    }
    let right = g.softmax(right, 1)?;

    let context = g.matmul(right, v)?;
    let core_inv = pinv(g, core)?;
    let context = g.matmul(core_inv, context)?;
    let attended = g.matmul(left, context)?;
    let mut h = affine(g, attended, p.out_weight, p.out_bias)?;
    if padded {
        let rows = g.constant(indicator(mask.iter().copied(), &[m_pad, 1]));
        h = g.mul(h, rows)?;
    }
    Ok(h)
}

/// Position ranges of the `grid²` contiguous windows.
pub fn window_ranges(m_pad: usize, grid: usize) -> Result<Vec<Range<usize>>> {
    let windows = grid * grid;
    if windows == 0 || m_pad % windows != 0 {
        return Err(Error::Argument(format!(
            "sequence length {m_pad} is not divisible into {grid}×{grid} windows"
        )));
    }
    let c = m_pad / windows;
    Ok((0..windows).map(|w| w * c..(w + 1) * c).collect())
}

/// Splits a `[M_pad, F]` tensor into its `grid²` windows.
pub fn split_windows(x: &Tensor, grid: usize) -> Result<Vec<Tensor>> {
    let [m_pad, f] = *x.shape() else {
        return Err(Error::Argument(format!("expected [M_pad, F], got {:?}", x.shape())));
    };
    window_ranges(m_pad, grid)?
        .into_iter()
        .map(|r| Ok(Tensor::new(vec![r.len(), f], x.data()[r.start * f..r.end * f].to_vec())?))
        .collect()
}

/// Inverse of [`split_windows`].
pub fn merge_windows(windows: &[Tensor]) -> Result<Tensor> {
    let first = windows.first().ok_or_else(|| Error::Argument("no windows to merge".into()))?;
    let shape = first.shape().to_vec();
    if windows.iter().any(|w| w.shape() != shape.as_slice()) {
        return Err(Error::Argument("windows differ in shape".into()));
    }
    let data = windows.iter().flat_map(|w| w.data().iter().copied()).collect();
    Ok(Tensor::new(vec![shape[0] * windows.len(), shape[1]], data)?)
}

/// Multi-head self-attention inside each of `grid²` contiguous windows,
/// with a per-head length-3 convolution over the key axis of the raw
/// scores as positional bias, followed by the residual
/// `H + Linear(Norm(Linear(Norm(A))))`. Windows without real positions are
/// passed through untouched and the update is zero at padded positions.
pub fn window_attention(
    g: &mut Graph,
    x: Var,
    mask: &[bool],
    grid: usize,
    heads: usize,
    p: &WindowParams,
) -> Result<Var> {
    let (m_pad, f) = matrix_dims(g, x)?;
    check_mask(mask, m_pad)?;
    if heads == 0 || f % heads != 0 {
        return Err(Error::Argument(format!("{f} features do not split into {heads} heads")));
    }
    let ranges = window_ranges(m_pad, grid)?;
    let windows = ranges.len();
    let c = m_pad / windows;
    let dk = f / heads;
    let active: Vec<usize> = (0..windows).filter(|&w| mask[ranges[w].clone()].iter().any(|&b| b)).collect();
    if active.is_empty() {
        return Ok(x);
    }
    let wa = active.len();
    let all_active = wa == windows;
    let padded = active.iter().any(|&w| mask[ranges[w].clone()].iter().any(|&b| !b));

    let xw = g.reshape(x, &[windows, c * f])?;
    let xa = if all_active { xw } else { g.gather_rows(xw, &active)? };
    let xa = g.reshape(xa, &[wa, c, f])?;

    let qkv = g.matmul(xa, p.qkv)?;
    let qkv = g.reshape(qkv, &[wa, c, 3, heads, dk])?;
    let qkv = g.permute(qkv, &[2, 3, 0, 1, 4])?;
    let mut part = |i: usize| -> Result<Var> {
        let t = g.narrow(qkv, 0, i, 1)?;
        Ok(g.reshape(t, &[heads, wa, c, dk])?)
    };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);

    let raw = g.matmul_nt(q, k)?;
    let key_mask = |w: usize, j: usize| mask[ranges[active[w]].start + j];
    let conv_in = if padded {
        let keep = indicator(
            (0..wa).flat_map(|w| (0..c).flat_map(move |_| (0..c).map(move |j| (w, j)))).map(|(w, j)| key_mask(w, j)),
            &[wa, c, c],
        );
        let keep = g.constant(keep);
        g.mul(raw, keep)?
    } else {
        raw
    };
    let pos = g.conv1d_depthwise(conv_in, p.conv)?;
    let scaled = g.scale(raw, 1.0 / (dk as f64).sqrt());
    let mut logits = g.add(scaled, pos)?;
    if padded {
        let bias = key_bias(
            (0..wa).flat_map(|w| (0..c).flat_map(move |_| (0..c).map(move |j| (w, j)))).map(|(w, j)| key_mask(w, j)),
            &[wa, c, c],
        );
        let bias = g.constant(bias);
        logits = g.add(logits, bias)?;
    }
    let att = g.softmax(logits, 3)?;
    let a = g.matmul(att, v)?;
    let a = g.permute(a, &[1, 2, 0, 3])?;
    let a = g.reshape(a, &[wa, c, f])?;

    let n1 = g.layer_norm(a, p.norm1_gain, p.norm1_bias, LN_EPS)?;
    let l1 = affine(g, n1, p.fc1_weight, p.fc1_bias)?;
    let n2 = g.layer_norm(l1, p.norm2_gain, p.norm2_bias, LN_EPS)?;
    let mut update = affine(g, n2, p.fc2_weight, p.fc2_bias)?;
    if padded {
        let rows = indicator(active.iter().flat_map(|&w| mask[ranges[w].clone()].iter().copied()), &[wa, c, 1]);
        let rows = g.constant(rows);
        update = g.mul(update, rows)?;
    }
    let update = g.reshape(update, &[wa, c * f])?;
    let update = if all_active { update } else { g.scatter_rows(update, &active, windows)? };
    let update = g.reshape(update, &[m_pad, f])?;
    Ok(g.add(x, update)?)
}

/// Region gate: one scalar per window from the masked mean over its real
/// positions and all features, squeezed through `ReLU(W₁·z + b₁)` and
/// expanded through `sigmoid(W₂·e + b₂)`. Returns the gated sequence and
/// the `grid²` gates.
pub fn serg_forward(g: &mut Graph, x: Var, mask: &[bool], grid: usize, p: &SergParams) -> Result<(Var, Var)> {
    let (m_pad, f) = matrix_dims(g, x)?;
    check_mask(mask, m_pad)?;
    let ranges = window_ranges(m_pad, grid)?;
    let windows = ranges.len();
    let c = m_pad / windows;
    let padded = mask.iter().any(|&b| !b);

    let xw = g.reshape(x, &[windows, c, f])?;
    let pooled_in = if padded {
        let rows = g.constant(indicator(mask.iter().copied(), &[windows, c, 1]));
        g.mul(xw, rows)?
    } else {
        xw
    };
    let pooled_in = g.reshape(pooled_in, &[windows, c * f])?;
    let sums = g.sum_axis(pooled_in, 1)?;
    let inv: Vec<f64> = ranges
        .iter()
        .map(|r| {
            let n = mask[r.clone()].iter().filter(|&&b| b).count();
            if n == 0 {
                0.0
            } else {
                1.0 / (n * f) as f64
            }
        })
        .collect();
    let inv = g.constant(Tensor::new(vec![windows], inv)?);
    let squeezed = g.mul(sums, inv)?;

    let z = g.reshape(squeezed, &[windows, 1])?;
    let e = g.matmul(p.fc1_weight, z)?;
    let hidden = g.shape(e)[0];
    let e = g.reshape(e, &[hidden])?;
    let e = g.add(e, p.fc1_bias)?;
    let e = g.relu(e);
    let e = g.reshape(e, &[hidden, 1])?;
    let s = g.matmul(p.fc2_weight, e)?;
    let s = g.reshape(s, &[windows])?;
    let s = g.add(s, p.fc2_bias)?;
    let gates = g.sigmoid(s);

    let gate_cols = g.reshape(gates, &[windows, 1])?;
    let flat = g.reshape(x, &[windows, c * f])?;
    let out = g.mul(flat, gate_cols)?;
    let out = g.reshape(out, &[m_pad, f])?;
    Ok((out, gates))
}

/// Pools the real positions into one bag vector `[F]`. For attention
/// pooling the per-instance weights `[M]` (real positions, sequence order)
/// are returned as well.
pub fn pool(
    g: &mut Graph,
    x: Var,
    mask: &[bool],
    pooling: Pooling,
    agg: Option<&AggregatorParams>,
) -> Result<(Var, Option<Var>)> {
    let (m_pad, f) = matrix_dims(g, x)?;
    check_mask(mask, m_pad)?;
    let real: Vec<usize> = (0..m_pad).filter(|&i| mask[i]).collect();
    if real.is_empty() {
        return Err(Error::Argument("cannot pool a bag with no real instances".into()));
    }
    let xr = if real.len() == m_pad { x } else { g.gather_rows(x, &real)? };
    match pooling {
        Pooling::Mean => Ok((g.mean_axis(xr, 0)?, None)),
        Pooling::Max => Ok((g.max_rows(xr)?, None)),
        Pooling::Attention => {
            let p = agg.ok_or_else(|| Error::Argument("attention pooling needs aggregator parameters".into()))?;
            let hidden = g.shape(p.w)[0];
            let proj = g.matmul_nt(xr, p.v)?;
            let proj = g.tanh(proj);
            let w = g.reshape(p.w, &[hidden, 1])?;
            let scores = g.matmul(proj, w)?;
            let weights = g.softmax(scores, 0)?;
            let wt = g.transpose(weights)?;
            let bag = g.matmul(wt, xr)?;
            let bag = g.reshape(bag, &[f])?;
            let weights = g.reshape(weights, &[real.len()])?;
            Ok((bag, Some(weights)))
        }
    }
}

/// `W_c · bag + b_c`.
pub fn classify(g: &mut Graph, bag: Var, p: &ClassifierParams) -> Result<Var> {
    let f = g.shape(bag).iter().product::<usize>();
    let classes = g.shape(p.weight)[0];
    let row = g.reshape(bag, &[1, f])?;
    let logits = g.matmul_nt(row, p.weight)?;
    let logits = g.reshape(logits, &[classes])?;
    Ok(g.add(logits, p.bias)?)
}
