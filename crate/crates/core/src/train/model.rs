use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::enhance::{enhance, enhance_param_shapes};
use crate::error::{Error, Result};
use crate::fusion::{dtm_forward, fuse_streams, TemporalRecord};
use crate::graph::{build_streams, StreamFeatures, VideoGraphSample};
use crate::heads::{head_param_shapes, joint_loss, readouts, Prediction, PredictionVars};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::spatial::{
    gat_param_shapes, parse_video, AttentionRecord, SpatialAttention, SpatialMode, STREAMS,
};

use super::TrainConfig;

/// `(name, shape, is_bias)` of every parameter the configuration reads.
pub fn param_shapes(cfg: &TrainConfig) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = cfg.stream_dims().param_shapes();
    let dtm = cfg.dtm();
    for name in STREAMS {
        if cfg.temporal_enhancement {
            out.extend(enhance_param_shapes(&format!("te.{name}"), cfg.node_dim));
        }
        let spatial = gat_param_shapes(&format!("sp.{name}"), cfg.node_dim);
        // the fixed-adjacency baselines have no pair scorer
        out.extend(
            spatial
                .into_iter()
                .filter(|(n, _, _)| cfg.spatial == SpatialMode::Gat || !n.ends_with(".wg")),
        );
        out.extend(dtm.param_shapes(&format!("tf.{name}")));
    }
    out.extend(head_param_shapes(
        2 * cfg.channels,
        cfg.readout_hidden,
        cfg.subactivities,
        cfg.affordances,
    ));
    out
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases. `fan_in` is the product
/// of all axes but the last. Parameters are drawn in name order.
pub fn init_params(cfg: &TrainConfig, seed: u64) -> ParamStore {
    let mut shapes = param_shapes(cfg);
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, is_bias) in shapes {
        let n: usize = shape.iter().product();
        let data = if is_bias {
            vec![0.0; n]
        } else {
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        store
            .insert(name, Tensor::new(shape, data).expect("positive dims"))
            .expect("unique names");
    }
    store
}

/// Errors naming every tensor whose presence or shape disagrees with `cfg`.
pub fn check_compatible(cfg: &TrainConfig, store: &ParamStore) -> Result<()> {
    let mut problems = Vec::new();
    let shapes = param_shapes(cfg);
    for (name, shape, _) in &shapes {
        match store.value(name) {
            None => problems.push(format!("missing `{name}` {shape:?}")),
            Some(t) if t.shape() != shape.as_slice() => {
                problems.push(format!("`{name}` is {:?}, expected {shape:?}", t.shape()))
            }
            _ => {}
        }
    }
    for name in store.names() {
        if !shapes.iter().any(|(n, _, _)| n == name) {
            problems.push(format!("unexpected `{name}`"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(problems.join("; ")))
    }
}

/// Checks that a sample fits the configuration's vocabulary and label sets.
pub fn check_sample(cfg: &TrainConfig, sample: &VideoGraphSample) -> Result<()> {
    let id = sample.video_id.as_str();
    if sample.subactivity_label >= cfg.subactivities {
        return Err(Error::record(
            id,
            "subactivity_label",
            format!(
                "{} outside 0..{}",
                sample.subactivity_label, cfg.subactivities
            ),
        ));
    }
    for (k, e) in sample.entities.iter().enumerate() {
        if e.category_id >= cfg.num_categories {
            return Err(Error::record(
                id,
                format!("entities[{k}].category_id"),
                format!("{} outside 0..{}", e.category_id, cfg.num_categories),
            ));
        }
        if let Some(a) = e.affordance_label {
            if a >= cfg.affordances {
                return Err(Error::record(
                    id,
                    format!("entities[{k}].affordance_label"),
                    format!("{a} outside 0..{}", cfg.affordances),
                ));
            }
        }
        if let Some(f) = &e.visual_feature {
            if f.first().map_or(0, Vec::len) != cfg.visual_dim {
                return Err(Error::record(
                    id,
                    format!("entities[{k}].visual_feature"),
                    format!("width {} but visual_dim = {}", f[0].len(), cfg.visual_dim),
                ));
            }
        }
    }
    Ok(())
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub prediction: PredictionVars,
    pub attention: SpatialAttention,
    /// `(stream, block, input frames, weights [N, T′, 2τ+1])`.
    pub temporal: Vec<(&'static str, usize, usize, Var)>,
}

/// Streams → temporal enhancement → spatial parsing → temporal module per
/// stream → fusion → readouts.
pub fn forward_on(
    tape: &mut Tape,
    sample: &VideoGraphSample,
    store: &ParamStore,
    cfg: &TrainConfig,
) -> Result<ForwardVars> {
    let mut streams = build_streams(tape, sample, store, &cfg.stream_dims())?;
    if cfg.temporal_enhancement {
        streams = StreamFeatures {
            visual: enhance(tape, store, "te.visual", streams.visual)?,
            semantic: enhance(tape, store, "te.semantic", streams.semantic)?,
        };
    }
    let (parsed, attention) = parse_video(tape, store, streams, sample, cfg.spatial)?;
    let dtm = cfg.dtm();
    let lengths = dtm.lengths(sample.frames)?;
    let mut summaries = Vec::with_capacity(2);
    let mut temporal = Vec::new();
    for (name, x) in STREAMS.into_iter().zip([parsed.visual, parsed.semantic]) {
        let out = dtm_forward(tape, store, &format!("tf.{name}"), x, &dtm)?;
        for (k, w) in out.window_weights.into_iter().enumerate() {
            temporal.push((name, k + 1, lengths[k], w));
        }
        summaries.push(out.summary);
    }
    let fused = fuse_streams(tape, summaries[0], summaries[1])?;
    let prediction = readouts(
        tape,
        store,
        fused,
        sample.human_index(),
        &sample.object_indices(),
    )?;
    Ok(ForwardVars {
        prediction,
        attention,
        temporal,
    })
}

/// [`forward_on`] plus the joint loss.
pub fn loss_on(
    tape: &mut Tape,
    sample: &VideoGraphSample,
    store: &ParamStore,
    cfg: &TrainConfig,
) -> Result<(ForwardVars, Var)> {
    let fwd = forward_on(tape, sample, store, cfg)?;
    let loss = joint_loss(
        tape,
        fwd.prediction,
        sample.subactivity_label,
        &sample.affordance_labels(),
        cfg.lambda,
    )?;
    Ok((fwd, loss))
}

/// Everything one forward pass exposes, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub prediction: Prediction,
    pub attention: AttentionRecord,
    pub temporal: Vec<TemporalRecord>,
}

pub fn forward(
    sample: &VideoGraphSample,
    store: &ParamStore,
    cfg: &TrainConfig,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let fwd = forward_on(&mut tape, sample, store, cfg)?;
    Ok(collect(&tape, sample, cfg, &fwd))
}

pub(crate) fn collect(
    tape: &Tape,
    sample: &VideoGraphSample,
    cfg: &TrainConfig,
    fwd: &ForwardVars,
) -> ForwardOutput {
    ForwardOutput {
        prediction: Prediction::from_tape(tape, fwd.prediction),
        attention: AttentionRecord::collect(tape, sample, &fwd.attention),
        temporal: fwd
            .temporal
            .iter()
            .map(|&(stream, layer, frames, w)| {
                TemporalRecord::collect(tape, stream, layer, frames, cfg.tau, cfg.stride, w)
            })
            .collect(),
    }
}
