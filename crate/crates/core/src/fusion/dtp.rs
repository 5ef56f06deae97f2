use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

use super::DtpMetric;

/// Window centers `τ, τ + stride, …` with the whole window inside `[0, T)`.
pub fn window_centers(frames: usize, tau: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (tau..)
        .step_by(stride)
        .take_while(|&t| t + tau < frames)
        .collect()
}

/// `T′ = floor((T − 2τ − 1) / stride) + 1`.
pub fn pooled_len(frames: usize, tau: usize, stride: usize) -> Result<usize> {
    if tau == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "pooling needs tau >= 1 and stride >= 1, got tau={tau} stride={stride}"
        )));
    }
    let width = 2 * tau + 1;
    if frames < width {
        return Err(Error::Graph(format!(
            "{frames} frames cannot hold a pooling window of {width} (tau={tau}); \
             reduce tau or pad upstream"
        )));
    }
    Ok((frames - width) / stride + 1)
}

/// `(name, shape, is_bias)` of one pooling layer: similarity embeddings
/// `theta`, `phi` `[C, E]` and the distinction scorer weight `psi.w [C, 1]`.
///
/// The scorer offset `psi.b [1]` is optional and not part of the learned set:
/// the pooling softmax is invariant to it, so its gradient is identically zero.
pub fn dtp_param_shapes(
    prefix: &str,
    channels: usize,
    embed: usize,
) -> Vec<(String, Vec<usize>, bool)> {
    vec![
        (format!("{prefix}.theta"), vec![channels, embed], false),
        (format!("{prefix}.phi"), vec![channels, embed], false),
        (format!("{prefix}.psi.w"), vec![channels, 1], false),
    ]
}

/// `[W − 1, W·W]` 0/1 matrix summing consecutive-pair terms into `s^{ij}`.
fn chain_matrix(width: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![width - 1, width * width]);
    for i in 0..width {
        for j in 0..width {
            for k in i.min(j)..i.max(j) {
                m.set(&[k, i * width + j], 1.0);
            }
        }
    }
    m
}

/// Symmetric similarity `[.., W, W]` of windows `[.., W, C]`:
/// `s^{ij} = Σ_{k=i}^{j−1} ⟨θ y^k, φ y^{k+1}⟩` for `i < j`, zero diagonal.
pub fn pairwise_similarity(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    window: Var,
) -> Result<Var> {
    let shape = tape.shape(window).to_vec();
    let rank = shape.len();
    if rank < 2 || shape[rank - 2] == 0 {
        return Err(Error::Graph(format!(
            "window must be [.., W, C], got {shape:?}"
        )));
    }
    let width = shape[rank - 2];
    let mut out_shape = shape[..rank - 1].to_vec();
    out_shape.push(width);
    if width == 1 {
        return Ok(tape.constant(Tensor::zeros(out_shape)));
    }
    let theta = tape.param(store, &format!("{prefix}.theta"))?;
    let phi = tape.param(store, &format!("{prefix}.phi"))?;
    let a = tape.linear(window, theta, None)?;
    let b = tape.linear(window, phi, None)?;
    let a = tape.slice(a, rank - 2, 0, width - 1)?;
    let b = tape.slice(b, rank - 2, 1, width - 1)?;
    let prod = tape.mul(a, b)?;
    let links = tape.sum_axis(prod, rank - 1)?;
    let links = if rank == 2 {
        tape.reshape(links, &[1, width - 1])?
    } else {
        links
    };
    let chain = tape.constant(chain_matrix(width));
    let s = tape.matmul(links, chain)?;
    Ok(tape.reshape(s, &out_shape)?)
}

/// `s^i = −(1/W) Σ_{j≠i} s^{ij}` for similarities `[.., W, W]`.
pub fn selection_mask(tape: &mut Tape, similarity: Var) -> Result<Var> {
    let shape = tape.shape(similarity).to_vec();
    let width = shape[shape.len() - 1];
    let total = tape.sum_axis(similarity, shape.len() - 1)?;
    Ok(tape.scale(total, -1.0 / width as f64)?)
}

/// `d^i = ψ(y^i)` for windows `[.., W, C]`, returning `[.., W]`. Reads
/// `psi.w` and, when present, the offset `psi.b`.
pub fn distinction(tape: &mut Tape, store: &ParamStore, prefix: &str, window: Var) -> Result<Var> {
    let shape = tape.shape(window).to_vec();
    let w = tape.param(store, &format!("{prefix}.psi.w"))?;
    let bias = format!("{prefix}.psi.b");
    let b = if store.contains(&bias) {
        Some(tape.param(store, &bias)?)
    } else {
        None
    };
    let d = tape.linear(window, w, b)?;
    Ok(tape.reshape(d, &shape[..shape.len() - 1])?)
}

/// Stacks every pooling window of `seq [B, T, C]` into `[B, T′, W, C]`.
pub fn windows(tape: &mut Tape, seq: Var, tau: usize, stride: usize) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 {
        return Err(Error::Graph(format!(
            "sequence must be [B, T, C], got {shape:?}"
        )));
    }
    pooled_len(shape[1], tau, stride)?;
    let width = 2 * tau + 1;
    let parts = window_centers(shape[1], tau, stride)
        .into_iter()
        .map(|c| {
            let w = tape.slice(seq, 1, c - tau, width)?;
            Ok(tape.reshape(w, &[shape[0], 1, width, shape[2]])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat(&parts, 1)?)
}

/// Weighted sum of each window: `weights [B, T′, W]`, `windows [B, T′, W, C]`.
pub fn weighted_windows(tape: &mut Tape, weights: Var, windows: Var) -> Result<Var> {
    let ws = tape.shape(windows).to_vec();
    let w = tape.reshape(weights, &[ws[0], ws[1], 1, ws[2]])?;
    let pooled = tape.matmul(w, windows)?;
    Ok(tape.reshape(pooled, &[ws[0], ws[1], ws[3]])?)
}

/// Dynamic temporal pooling of `seq [B, T, C]`. Returns the pooled sequence
/// `[B, T′, C]` and the window weights `[B, T′, 2τ+1]`.
pub fn dtp_pool(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    seq: Var,
    tau: usize,
    stride: usize,
    metric: DtpMetric,
) -> Result<(Var, Var)> {
    let win = windows(tape, seq, tau, stride)?;
    let scores = match metric {
        DtpMetric::Similarity => {
            let s = pairwise_similarity(tape, store, prefix, win)?;
            selection_mask(tape, s)?
        }
        DtpMetric::Distinction => distinction(tape, store, prefix, win)?,
        DtpMetric::Both => {
            let s = pairwise_similarity(tape, store, prefix, win)?;
            let s = selection_mask(tape, s)?;
            let d = distinction(tape, store, prefix, win)?;
            tape.add(d, s)?
        }
    };
    let weights = tape.softmax(scores, None)?;
    let pooled = weighted_windows(tape, weights, win)?;
    Ok((pooled, weights))
}
