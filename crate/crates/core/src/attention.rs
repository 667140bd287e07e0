//! Attention primitives shared by the denoiser, the adapter and the tape.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise stable softmax with an optional {0,1} mask.
///
/// Masked-out positions receive exactly zero weight (the mask enters as an
/// additive -inf on the logits, so surviving rows stay normalized). A row
/// with no surviving key is a [`Error::DegenerateMask`].
pub(crate) fn softmax_rows_masked<S: Scalar>(
    logits: &Tensor<S>,
    mask: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (m, n) = logits.dims2()?;
    if let Some(mask) = mask {
        if mask.shape() != logits.shape() {
            return Err(Error::shape(format!(
                "mask shape {:?} does not match logits {:?}",
                mask.shape(),
                logits.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != S::zero() && v != S::one()) {
            return Err(Error::input("attention mask must be {0,1}-valued"));
        }
    }
    let keep = |i: usize, j: usize| mask.map_or(true, |mk| mk.data()[i * n + j] == S::one());
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &logits.data()[i * n..(i + 1) * n];
        let mut mx = S::neg_infinity();
        for j in 0..n {
            if keep(i, j) {
                mx = mx.max(row[j]);
            }
        }
        if mx == S::neg_infinity() {
            return Err(Error::DegenerateMask);
        }
        let mut denom = S::zero();
        for j in 0..n {
            if keep(i, j) {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
        }
        for j in 0..n {
            out[i * n + j] /= denom;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    softmax_rows_masked(t, None)
}

/// Single-head scaled dot-product attention.
///
/// Returns both the mixed output and the attention map; the map is what the
/// layout losses operate on.
pub fn scaled_dot_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: Option<&Tensor<S>>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (_, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, _) = v.dims2()?;
    if dq != dk || nk != nv {
        return Err(Error::shape(format!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = S::one() / S::cast((dk as f64).sqrt());
    let scores = q.matmul_nt(k)?.scale(scale)?;
    let attn = softmax_rows_masked(&scores, mask)?;
    let out = attn.matmul(v)?;
    Ok((out, attn))
}

/// Tape-recorded scaled dot-product attention (same semantics as the tensor
/// version; the mask stays a constant).
pub fn scaled_dot_attention_var<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    mask: Option<&Tensor<S>>,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let d = k.with_value(|t| t.dims2().map(|(_, d)| d))?;
    let scale = S::one() / S::cast((d as f64).sqrt());
    let scores = q.matmul_nt(k)?.scale(scale)?;
    let attn = match mask {
        Some(m) => scores.masked_softmax_rows(m)?,
        None => scores.softmax_rows()?,
    };
    let out = attn.matmul(v)?;
    Ok((out, attn))
}

/// Broadcasts a per-key {0,1} vector to the `[queries × keys]` mask layout.
pub fn key_mask_to_full<S: Scalar>(key_mask: &[S], queries: usize) -> Result<Tensor<S>> {
    let n = key_mask.len();
    let mut data = Vec::with_capacity(queries * n);
    for _ in 0..queries {
        data.extend_from_slice(key_mask);
    }
    Tensor::from_vec(vec![queries, n], data)
}
