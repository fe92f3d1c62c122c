use crate::error::{Error, Result};

use super::{Graph, Var};

/// Multi-head scaled dot-product attention followed by the output
/// projection `concat(heads) · w_out + b_out`.
///
/// `q`, `k`, `v` are already-projected `len × dim` arrays. Keys flagged in
/// `key_mask` (true = masked) get exactly zero weight.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    w_out: Var,
    b_out: Option<Var>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    attention_with_weights(g, q, k, v, w_out, b_out, heads, key_mask).map(|(out, _)| out)
}

/// As [`attention`], also returning each head's `len_q × len_k` weight node.
#[allow(clippy::too_many_arguments)]
pub fn attention_with_weights(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    w_out: Var,
    b_out: Option<Var>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let (q_shape, k_shape, v_shape) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    if q_shape.len() != 2 || k_shape.len() != 2 || q_shape[1] != k_shape[1] {
        return Err(Error::Shape {
            op: "attention(q,k)",
            left: q_shape,
            right: k_shape,
        });
    }
    if v_shape.len() != 2 || v_shape[0] != k_shape[0] {
        return Err(Error::Shape {
            op: "attention(k,v)",
            left: k_shape,
            right: v_shape,
        });
    }
    let (len_q, dim) = (q_shape[0], q_shape[1]);
    let len_k = k_shape[0];
    if heads == 0 || dim % heads != 0 || v_shape[1] % heads != 0 {
        return Err(Error::Config(format!(
            "model dimension {dim} is not divisible into {heads} heads"
        )));
    }
    let excluded = match key_mask {
        Some(m) if m.len() != len_k => {
            return Err(Error::Shape {
                op: "attention key_mask",
                left: vec![len_k],
                right: vec![m.len()],
            })
        }
        Some(m) => {
            if m.iter().all(|&x| x) {
                return Err(Error::contract("every key is masked"));
            }
            Some(m.repeat(len_q))
        }
        None => None,
    };

    let dh = dim / heads;
    let dv = v_shape[1] / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let kt = g.transpose(k);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kth, vh) = if heads == 1 {
            (q, kt, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_rows(kt, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dv, (h + 1) * dv)?,
            )
        };
        let scores = g.matmul(qh, kth)?;
        let scores = g.scale(scores, scale);
        let w = match &excluded {
            Some(ex) => g.masked_softmax_rows(scores, ex.clone())?,
            None => g.softmax(scores, 1)?,
        };
        weights.push(w);
        outs.push(g.matmul(w, vh)?);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    let mut out = g.matmul(merged, w_out)?;
    if let Some(b) = b_out {
        out = g.add_row(out, b)?;
    }
    Ok((out, weights))
}
