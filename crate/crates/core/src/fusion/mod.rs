//! Temporal fusion: temporal convolution alternated with dynamic temporal
//! pooling, the pooling baselines, and two-stream fusion.

mod dtp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::enhance::{gru_param_shapes, gru_states};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub use dtp::{
    distinction, dtp_param_shapes, dtp_pool, pairwise_similarity, pooled_len, selection_mask,
    weighted_windows, window_centers, windows,
};

/// Kernel width of the temporal convolutions.
pub const TCN_KERNEL: usize = 3;

/// Which scores feed the pooling softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DtpMetric {
    #[serde(rename = "S")]
    Similarity,
    #[serde(rename = "D")]
    Distinction,
    #[serde(rename = "S+D")]
    Both,
}

/// Temporal reduction applied by the module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    #[serde(rename = "DTP")]
    Dtp,
    #[serde(rename = "AvgP")]
    Avg,
    #[serde(rename = "MaxP")]
    Max,
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "none")]
    None,
}

macro_rules! named_enum {
    ($ty:ident, $what:literal, [$($variant:ident => $name:literal),+ $(,)?]) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name().eq_ignore_ascii_case(s))
                    .ok_or_else(|| {
                        let allowed: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
                        Error::Config(format!("{} `{s}` not one of {}", $what, allowed.join(", ")))
                    })
            }
        }
    };
}

named_enum!(DtpMetric, "dtp_metric", [Similarity => "S", Distinction => "D", Both => "S+D"]);
named_enum!(Pooling, "pooling", [Dtp => "DTP", Avg => "AvgP", Max => "MaxP", Rnn => "RNN", None => "none"]);

/// Shape and variant of one stream's temporal module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DtmConfig {
    /// Input width `D`.
    pub input_dim: usize,
    /// Channel width `C`.
    pub channels: usize,
    /// Similarity embedding width `E`.
    pub embed_dim: usize,
    pub tau: usize,
    pub stride: usize,
    pub pooling: Pooling,
    pub metric: DtpMetric,
}

/// Number of convolution + pooling blocks.
pub const DTM_BLOCKS: usize = 2;

impl DtmConfig {
    /// `(name, shape, is_bias)` of every parameter under `prefix`.
    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>, bool)> {
        if self.pooling == Pooling::Rnn {
            return gru_param_shapes(&format!("{prefix}.rnn"), self.input_dim, self.channels);
        }
        let mut out = Vec::new();
        for block in 1..=DTM_BLOCKS {
            let cin = if block == 1 {
                self.input_dim
            } else {
                self.channels
            };
            out.push((
                format!("{prefix}.tcn{block}.w"),
                vec![TCN_KERNEL, cin, self.channels],
                false,
            ));
            out.push((format!("{prefix}.tcn{block}.b"), vec![self.channels], true));
            if self.pooling == Pooling::Dtp {
                out.extend(dtp_param_shapes(
                    &format!("{prefix}.dtp{block}"),
                    self.channels,
                    self.embed_dim,
                ));
            }
        }
        out
    }

    /// Sequence length after each pooling block, starting from `frames`.
    pub fn lengths(&self, frames: usize) -> Result<Vec<usize>> {
        let mut out = vec![frames];
        if matches!(self.pooling, Pooling::Dtp | Pooling::Avg | Pooling::Max) {
            for _ in 0..DTM_BLOCKS {
                let last = *out.last().expect("non-empty");
                out.push(pooled_len(last, self.tau, self.stride)?);
            }
        }
        Ok(out)
    }
}

/// `relu(conv1d(x, w) + b)` over `x [B, T, Cin]`.
pub fn tcn(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.conv1d(x, w, Some(b))?;
    Ok(tape.relu(y)?)
}

fn uniform_weights(tape: &mut Tape, win: Var) -> Result<Var> {
    let s = tape.shape(win).to_vec();
    let width = s[2];
    Ok(tape.constant(Tensor::full(vec![s[0], s[1], width], 1.0 / width as f64)))
}

/// Output of the temporal module for one stream.
#[derive(Clone, Debug)]
pub struct DtmOutput {
    /// Per-node summary `[B, C]`.
    pub summary: Var,
    /// Window weights `[B, T′, 2τ+1]` of each pooling block that has them.
    pub window_weights: Vec<Var>,
}

/// Reduces `seq [B, T, D]` to `[B, C]`: convolution, pooling, convolution,
/// pooling, then a mean over whatever frames remain. `none` skips pooling;
/// `RNN` replaces the stack by a recurrent pass and keeps its last state.
pub fn dtm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    seq: Var,
    cfg: &DtmConfig,
) -> Result<DtmOutput> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 || shape[2] != cfg.input_dim {
        return Err(Error::Graph(format!(
            "temporal module expects [B, T, {}], got {shape:?}",
            cfg.input_dim
        )));
    }
    if cfg.pooling == Pooling::Rnn {
        let states = gru_states(tape, store, &format!("{prefix}.rnn"), seq, false)?;
        let last = *states
            .last()
            .ok_or_else(|| Error::Graph("empty sequence".into()))?;
        return Ok(DtmOutput {
            summary: last,
            window_weights: Vec::new(),
        });
    }
    let mut x = seq;
    let mut records = Vec::new();
    for block in 1..=DTM_BLOCKS {
        x = tcn(tape, store, &format!("{prefix}.tcn{block}"), x)?;
        match cfg.pooling {
            Pooling::Dtp => {
                let (y, w) = dtp_pool(
                    tape,
                    store,
                    &format!("{prefix}.dtp{block}"),
                    x,
                    cfg.tau,
                    cfg.stride,
                    cfg.metric,
                )?;
                x = y;
                records.push(w);
            }
            Pooling::Avg => {
                let win = windows(tape, x, cfg.tau, cfg.stride)?;
                let w = uniform_weights(tape, win)?;
                x = weighted_windows(tape, w, win)?;
                records.push(w);
            }
            Pooling::Max => {
                let win = windows(tape, x, cfg.tau, cfg.stride)?;
                x = tape.max_axis(win, 2)?;
            }
            Pooling::None | Pooling::Rnn => {}
        }
    }
    let frames = tape.shape(x)[1];
    let summary = if frames == 1 {
        tape.reshape(x, &[shape[0], cfg.channels])?
    } else {
        tape.mean_axis(x, 1)?
    };
    Ok(DtmOutput {
        summary,
        window_weights: records,
    })
}

/// Per-node concatenation `[N, C] ⊕ [N, C] → [N, 2C]`.
pub fn fuse_streams(tape: &mut Tape, visual: Var, semantic: Var) -> Result<Var> {
    let (a, b) = (tape.shape(visual).to_vec(), tape.shape(semantic).to_vec());
    if a != b || a.len() != 2 {
        return Err(Error::Graph(format!(
            "cannot fuse streams of shapes {a:?} and {b:?}"
        )));
    }
    Ok(tape.concat(&[visual, semantic], 1)?)
}

/// Window weights of one pooling block of one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalRecord {
    pub stream: String,
    /// 1-based block index.
    pub layer: usize,
    /// Window centers on the block's input frame axis.
    pub centers: Vec<usize>,
    /// `[node][window][member]`.
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl TemporalRecord {
    pub fn collect(
        tape: &Tape,
        stream: &str,
        layer: usize,
        input_frames: usize,
        tau: usize,
        stride: usize,
        weights: Var,
    ) -> Self {
        let t = tape.value(weights);
        let (windows, width) = (t.shape()[1], t.shape()[2]);
        TemporalRecord {
            stream: stream.to_string(),
            layer,
            centers: window_centers(input_frames, tau, stride),
            weights: t
                .data()
                .chunks(windows * width)
                .map(|node| node.chunks(width).map(<[f64]>::to_vec).collect())
                .collect(),
        }
    }
}
