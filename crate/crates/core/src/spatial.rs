//! Per-frame graph attention over the human-object graph, and the
//! fixed-adjacency GCN baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{StreamFeatures, VideoGraphSample};
use crate::numerics::{Mask, ParamStore, Tape, Tensor, Var, LEAKY_SLOPE};

/// Stream names in the order they appear in records and parameter prefixes.
pub const STREAMS: [&str; 2] = ["visual", "semantic"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialMode {
    #[serde(rename = "GAT")]
    Gat,
    #[serde(rename = "GCN")]
    Gcn,
    #[serde(rename = "GCN-full")]
    GcnFull,
}

impl SpatialMode {
    pub const ALL: [SpatialMode; 3] = [SpatialMode::Gat, SpatialMode::Gcn, SpatialMode::GcnFull];

    pub fn name(self) -> &'static str {
        match self {
            SpatialMode::Gat => "GAT",
            SpatialMode::Gcn => "GCN",
            SpatialMode::GcnFull => "GCN-full",
        }
    }
}

impl fmt::Display for SpatialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpatialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("spatial `{s}` not one of GAT, GCN, GCN-full")))
    }
}

/// `(name, shape, is_bias)` of one stream's parameters: pair scorer
/// `wg [2D, 1]` and value map `wh [D, D]`.
pub fn gat_param_shapes(prefix: &str, dim: usize) -> Vec<(String, Vec<usize>, bool)> {
    vec![
        (format!("{prefix}.wg"), vec![2 * dim, 1], false),
        (format!("{prefix}.wh"), vec![dim, dim], false),
    ]
}

/// Attention `[.., N, N]` for node features `x [.., N, D]`:
/// `a_i = softmax_{j ∈ N(i)} LeakyReLU(wg · (x_i ⊕ x_j))`.
pub fn gat_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    neighborhood: &Mask,
) -> Result<Var> {
    let mut shape = tape.shape(x).to_vec();
    let pairs = tape.pair_concat(x)?;
    let wg = tape.param(store, &format!("{prefix}.wg"))?;
    let logits = tape.linear(pairs, wg, None)?;
    let n = shape[shape.len() - 2];
    *shape.last_mut().expect("rank checked by pair_concat") = n;
    let logits = tape.reshape(logits, &shape)?;
    let logits = tape.leaky_relu(logits, LEAKY_SLOPE)?;
    Ok(tape.softmax(logits, Some(neighborhood))?)
}

/// `y_i = relu(Σ_j a_ij · x_j wh)` for `x [.., N, D]`, `attention [.., N, N]`.
pub fn gat_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    attention: Var,
) -> Result<Var> {
    let wh = tape.param(store, &format!("{prefix}.wh"))?;
    let values = tape.linear(x, wh, None)?;
    let mixed = tape.matmul(attention, values)?;
    Ok(tape.relu(mixed)?)
}

/// Row-normalized fixed weights: adjacency plus self-loops, or all-ones.
pub fn gcn_weights(neighborhood: &Mask, fully_connected: bool) -> Tensor {
    let n = neighborhood.shape()[0];
    let mut w = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        let keep: Vec<bool> = (0..n)
            .map(|j| fully_connected || neighborhood.data()[i * n + j])
            .collect();
        let count = keep.iter().filter(|&&k| k).count() as f64;
        for j in 0..n {
            if keep[j] {
                w.set(&[i, j], 1.0 / count);
            }
        }
    }
    w
}

/// The GAT aggregation with [`gcn_weights`] in place of learned attention.
/// Returns the features and the weights broadcast to `[.., N, N]`.
pub fn gcn_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    neighborhood: &Mask,
    fully_connected: bool,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let w = gcn_weights(neighborhood, fully_connected);
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let mut att_shape = shape[..shape.len() - 1].to_vec();
    att_shape.push(w.shape()[0]);
    let data = w.data().repeat(batch);
    let attention = tape.constant(Tensor::new(att_shape, data)?);
    let y = gat_aggregate(tape, store, prefix, x, attention)?;
    Ok((y, attention))
}

/// Learned (or fixed) attention of both streams, each `[T, N, N]`.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttention {
    pub visual: Var,
    pub semantic: Var,
}

/// Applies spatial parsing to both streams frame by frame. Streams are
/// `[N, T, D]`; parameters live under `sp.visual` and `sp.semantic`.
pub fn parse_video(
    tape: &mut Tape,
    store: &ParamStore,
    streams: StreamFeatures,
    sample: &VideoGraphSample,
    mode: SpatialMode,
) -> Result<(StreamFeatures, SpatialAttention)> {
    let mask = sample.neighborhood_mask();
    let mut out = [streams.visual, streams.semantic];
    let mut att = out;
    for (k, name) in STREAMS.iter().enumerate() {
        let prefix = format!("sp.{name}");
        let shape = tape.shape(out[k]).to_vec();
        if shape.len() != 3 || shape[0] != sample.num_nodes() {
            return Err(Error::Graph(format!(
                "{name} stream has shape {shape:?} for {} nodes",
                sample.num_nodes()
            )));
        }
        let frame_major = tape.permute(out[k], &[1, 0, 2])?;
        let (y, a) = match mode {
            SpatialMode::Gat => {
                let a = gat_attention(tape, store, &prefix, frame_major, &mask)?;
                (gat_aggregate(tape, store, &prefix, frame_major, a)?, a)
            }
            SpatialMode::Gcn | SpatialMode::GcnFull => gcn_aggregate(
                tape,
                store,
                &prefix,
                frame_major,
                &mask,
                mode == SpatialMode::GcnFull,
            )?,
        };
        out[k] = tape.permute(y, &[1, 0, 2])?;
        att[k] = a;
    }
    Ok((
        StreamFeatures {
            visual: out[0],
            semantic: out[1],
        },
        SpatialAttention {
            visual: att[0],
            semantic: att[1],
        },
    ))
}

/// Attention matrices of one video, `[frame][i][j]` per stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub video_id: String,
    pub node_ids: Vec<u32>,
    pub visual: Vec<Vec<Vec<f64>>>,
    pub semantic: Vec<Vec<Vec<f64>>>,
}

impl AttentionRecord {
    pub fn collect(tape: &Tape, sample: &VideoGraphSample, attention: &SpatialAttention) -> Self {
        let unpack = |v: Var| -> Vec<Vec<Vec<f64>>> {
            let t = tape.value(v);
            let n = t.shape()[1];
            t.data()
                .chunks(n * n)
                .map(|frame| frame.chunks(n).map(<[f64]>::to_vec).collect())
                .collect()
        };
        AttentionRecord {
            video_id: sample.video_id.clone(),
            node_ids: sample.entities.iter().map(|e| e.node_id).collect(),
            visual: unpack(attention.visual),
            semantic: unpack(attention.semantic),
        }
    }

    pub fn frames(&self) -> usize {
        self.visual.len()
    }

    /// Matrices of the named stream.
    pub fn stream(&self, name: &str) -> Option<&[Vec<Vec<f64>>]> {
        match name {
            "visual" => Some(&self.visual),
            "semantic" => Some(&self.semantic),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::EntityTrack;
    use crate::numerics::grad_check;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn sample(objects: usize, frames: usize) -> VideoGraphSample {
        let entities = (0..=objects)
            .map(|k| EntityTrack {
                node_id: 10 + k as u32,
                is_human: k == 0,
                category_id: k.min(1),
                boxes: vec![[0.1, 0.1, 0.2, 0.2]; frames],
                visual_feature: None,
                affordance_label: (k > 0).then_some(0),
            })
            .collect();
        VideoGraphSample::new("v", entities, 0).unwrap()
    }

    fn store(rng: &mut ChaCha8Rng, dim: usize) -> ParamStore {
        let mut s = ParamStore::new();
        for name in STREAMS {
            for (p, shape, _) in gat_param_shapes(&format!("sp.{name}"), dim) {
                s.insert(p, rand_tensor(rng, &shape)).unwrap();
            }
        }
        s
    }

    fn single(wg: Vec<f64>, wh: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        let d = wh.shape()[0];
        s.insert("g.wg", Tensor::new(vec![2 * d, 1], wg).unwrap())
            .unwrap();
        s.insert("g.wh", wh).unwrap();
        s
    }

    fn attention(s: &ParamStore, x: Tensor, mask: &Mask) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let a = gat_attention(&mut tape, s, "g", xv, mask).unwrap();
        tape.value(a).clone()
    }

    #[test]
    fn zero_scorer_gives_uniform_neighborhood_attention() {
        let g = sample(2, 1);
        let s = single(vec![0.0; 4], Tensor::identity(2));
        let a = attention(
            &s,
            Tensor::from_rows(&[vec![1.0, 2.0], vec![0.3, -1.0], vec![5.0, 0.0]]).unwrap(),
            &g.neighborhood_mask(),
        );
        for j in 0..3 {
            assert_eq!(a.get(&[0, j]), 1.0 / 3.0);
        }
        assert_eq!(a.get(&[1, 2]), 0.0);
        assert_eq!(a.get(&[2, 1]), 0.0);
        assert_eq!(a.get(&[1, 0]), 0.5);
    }

    #[test]
    fn hand_set_logits_give_closed_form_attention() {
        let g = sample(2, 1);
        // only the neighbor half of wg is active, so l_{0,j} = x_j
        let s = single(vec![0.0, 1.0], Tensor::identity(1));
        let x = Tensor::new(vec![3, 1], vec![0.0, 4f64.ln(), 0.0]).unwrap();
        let a = attention(&s, x, &g.neighborhood_mask());
        let expect = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0];
        for j in 0..3 {
            assert!((a.get(&[0, j]) - expect[j]).abs() < 1e-15);
        }
    }

    fn aggregate(s: &ParamStore, x: Tensor, a: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x), tape.constant(a));
        let y = gat_aggregate(&mut tape, s, "g", xv, av).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn self_only_attention_with_identity_values_is_relu() {
        let s = single(vec![0.0; 4], Tensor::identity(2));
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![-0.5, 3.0]]).unwrap();
        let y = aggregate(&s, x.clone(), Tensor::identity(2));
        assert_eq!(y, x.map(|v| v.max(0.0)));
    }

    #[test]
    fn uniform_attention_over_equal_features() {
        let wh = Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
        let s = single(vec![0.0; 4], wh);
        let f = [0.7, 0.2];
        let x = Tensor::from_rows(&[f.to_vec(), f.to_vec()]).unwrap();
        let a = Tensor::full(vec![2, 2], 0.5);
        let y = aggregate(&s, x, a);
        let expect = [(0.7 + 0.4f64).max(0.0), (-0.7 + 0.1f64).max(0.0)];
        for i in 0..2 {
            for d in 0..2 {
                assert!((y.get(&[i, d]) - expect[d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn three_node_aggregation_matches_hand_computation() {
        let wh = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, -1.0]]).unwrap();
        let s = single(vec![0.0; 4], wh);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0, -1.0]]).unwrap();
        // x wh = [3, -2], [1, -1], [2, 1]
        let a = Tensor::from_rows(&[
            vec![0.5, 0.25, 0.25],
            vec![0.5, 0.5, 0.0],
            vec![0.2, 0.0, 0.8],
        ])
        .unwrap();
        let y = aggregate(&s, x, a);
        let expect = [[2.25, 0.0], [2.0, 0.0], [2.2, 0.4]];
        for i in 0..3 {
            for d in 0..2 {
                assert!((y.get(&[i, d]) - expect[i][d]).abs() < 1e-14, "{i} {d}");
            }
        }
    }

    #[test]
    fn gcn_weights_examples() {
        let g = sample(2, 1);
        let w = gcn_weights(&g.neighborhood_mask(), false);
        assert_eq!(&w.data()[..3], &[1.0 / 3.0; 3]);
        assert_eq!(&w.data()[3..6], &[0.5, 0.5, 0.0]);
        let g2 = sample(1, 1);
        assert_eq!(gcn_weights(&g2.neighborhood_mask(), true).data(), &[0.5; 4]);
    }

    #[test]
    fn zero_scorer_gat_equals_gcn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample(3, 4);
        let mut s = store(&mut rng, 5);
        for name in STREAMS {
            s.set_value(&format!("sp.{name}.wg"), Tensor::zeros(vec![10, 1]))
                .unwrap();
        }
        let streams = |tape: &mut Tape, rng: &mut ChaCha8Rng| StreamFeatures {
            visual: tape.constant(rand_tensor(rng, &[4, 4, 5])),
            semantic: tape.constant(rand_tensor(rng, &[4, 4, 5])),
        };
        let mut tape = Tape::new();
        let input = streams(&mut tape, &mut rng);
        let (gat, _) = parse_video(&mut tape, &s, input, &g, SpatialMode::Gat).unwrap();
        let (gcn, _) = parse_video(&mut tape, &s, input, &g, SpatialMode::Gcn).unwrap();
        assert_eq!(tape.value(gat.visual), tape.value(gcn.visual));
        assert_eq!(tape.value(gat.semantic), tape.value(gcn.semantic));
    }

    #[test]
    fn record_holds_one_matrix_per_frame_and_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = sample(2, 2);
        let s = store(&mut rng, 3);
        let mut tape = Tape::new();
        let mut frame = rand_tensor(&mut rng, &[3, 2, 3]);
        for n in 0..3 {
            for d in 0..3 {
                frame.set(&[n, 1, d], frame.get(&[n, 0, d]));
            }
        }
        let input = StreamFeatures {
            visual: tape.constant(frame.clone()),
            semantic: tape.constant(rand_tensor(&mut rng, &[3, 2, 3])),
        };
        let (_, att) = parse_video(&mut tape, &s, input, &g, SpatialMode::Gat).unwrap();
        let rec = AttentionRecord::collect(&tape, &g, &att);
        assert_eq!(rec.frames(), 2);
        assert_eq!(rec.semantic.len(), 2);
        assert_eq!(rec.node_ids, vec![10, 11, 12]);
        assert_eq!(rec.visual[0], rec.visual[1]);
        for m in rec.visual.iter().chain(&rec.semantic) {
            for row in m {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(m[1][2], 0.0);
            assert_eq!(m[2][1], 0.0);
        }
    }

    #[test]
    fn parse_video_is_equivariant_to_object_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = sample(3, 3);
        let order = [0, 2, 3, 1];
        let gp = g.permuted(&order).unwrap();
        let s = store(&mut rng, 4);
        let x = [
            rand_tensor(&mut rng, &[4, 3, 4]),
            rand_tensor(&mut rng, &[4, 3, 4]),
        ];
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for (new, &old) in order.iter().enumerate() {
                for f in 0..3 {
                    for d in 0..4 {
                        out.set(&[new, f, d], t.get(&[old, f, d]));
                    }
                }
            }
            out
        };
        let mut tape = Tape::new();
        let a = StreamFeatures {
            visual: tape.constant(x[0].clone()),
            semantic: tape.constant(x[1].clone()),
        };
        let b = StreamFeatures {
            visual: tape.constant(permute(&x[0])),
            semantic: tape.constant(permute(&x[1])),
        };
        let (ya, aa) = parse_video(&mut tape, &s, a, &g, SpatialMode::Gat).unwrap();
        let (yb, ab) = parse_video(&mut tape, &s, b, &gp, SpatialMode::Gat).unwrap();
        assert!(permute(tape.value(ya.visual)).max_abs_diff(tape.value(yb.visual)) < 1e-12);
        assert!(permute(tape.value(ya.semantic)).max_abs_diff(tape.value(yb.semantic)) < 1e-12);
        let (ra, rb) = (
            AttentionRecord::collect(&tape, &g, &aa),
            AttentionRecord::collect(&tape, &gp, &ab),
        );
        for f in 0..3 {
            for (i, &oi) in order.iter().enumerate() {
                for (j, &oj) in order.iter().enumerate() {
                    assert!((rb.visual[f][i][j] - ra.visual[f][oi][oj]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_check_through_attention_and_aggregation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = sample(3, 2);
        let mut s = ParamStore::new();
        for (p, shape, _) in gat_param_shapes("g", 4) {
            s.insert(p, rand_tensor(&mut rng, &shape)).unwrap();
        }
        s.insert("x", rand_tensor(&mut rng, &[2, 4, 4])).unwrap();
        let weights = rand_tensor(&mut rng, &[2, 4, 4]);
        let mask = g.neighborhood_mask();
        let report = grad_check(
            |tape: &mut Tape, st: &ParamStore| -> Result<Var> {
                let x = tape.param(st, "x")?;
                let a = gat_attention(tape, st, "g", x, &mask)?;
                let y = gat_aggregate(tape, st, "g", x, a)?;
                let w = tape.constant(weights.clone());
                let z = tape.mul(y, w)?;
                Ok(tape.sum(z)?)
            },
            &s,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn object_object_entries_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = sample(2, 1);
        let mut s = ParamStore::new();
        for (p, shape, _) in gat_param_shapes("g", 3) {
            s.insert(p, rand_tensor(&mut rng, &shape)).unwrap();
        }
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[3, 3]));
        let pairs = tape.pair_concat(x).unwrap();
        let wg = tape.param(&s, "g.wg").unwrap();
        let logits = tape.linear(pairs, wg, None).unwrap();
        let logits = tape.reshape(logits, &[3, 3]).unwrap();
        let a = tape.softmax(logits, Some(&g.neighborhood_mask())).unwrap();
        let w = tape.constant(rand_tensor(&mut rng, &[3, 3]));
        let z = tape.mul(a, w).unwrap();
        let loss = tape.sum(z).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dl = grads.get(logits).unwrap();
        assert_eq!(dl.get(&[1, 2]), 0.0);
        assert_eq!(dl.get(&[2, 1]), 0.0);
    }

    #[test]
    fn mode_names_parse() {
        for m in SpatialMode::ALL {
            assert_eq!(m.name().parse::<SpatialMode>().unwrap(), m);
        }
        let err = "GIN".parse::<SpatialMode>().unwrap_err().to_string();
        assert!(err.contains("GCN-full"), "{err}");
    }
}
