//! Temporal enhancement: a residual bidirectional gated recurrent pass over
//! each node's frame sequence.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Parameter names of one gated recurrent cell under `prefix`.
pub fn gru_param_shapes(
    prefix: &str,
    input: usize,
    hidden: usize,
) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = Vec::with_capacity(9);
    for gate in ["z", "r", "n"] {
        out.push((format!("{prefix}.w{gate}"), vec![input, hidden], false));
        out.push((format!("{prefix}.u{gate}"), vec![hidden, hidden], false));
        out.push((format!("{prefix}.b{gate}"), vec![hidden], true));
    }
    out
}

/// Runs a gated recurrent cell over `x [B, T, D]` from a zero state and
/// returns the state after each frame, indexed by frame. With `reverse` the
/// cell reads frames `T-1, …, 0`.
///
/// ```text
/// z = σ(x Wz + h Uz + bz)
/// r = σ(x Wr + h Ur + br)
/// n = tanh(x Wn + r ⊙ (h Un) + bn)
/// h' = n + z ⊙ (h − n)
/// ```
pub fn gru_states(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    reverse: bool,
) -> Result<Vec<Var>> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Graph(format!(
            "recurrent input must be [B, T, D], got {shape:?}"
        )));
    }
    let (batch, frames) = (shape[0], shape[1]);
    let p = |tape: &mut Tape, name: &str| tape.param(store, &format!("{prefix}.{name}"));
    let (wz, uz, bz) = (p(tape, "wz")?, p(tape, "uz")?, p(tape, "bz")?);
    let (wr, ur, br) = (p(tape, "wr")?, p(tape, "ur")?, p(tape, "br")?);
    let (wn, un, bn) = (p(tape, "wn")?, p(tape, "un")?, p(tape, "bn")?);
    let hidden = tape.shape(uz)[0];

    let xz = tape.linear(x, wz, Some(bz))?;
    let xr = tape.linear(x, wr, Some(br))?;
    let xn = tape.linear(x, wn, Some(bn))?;
    let step_input = |tape: &mut Tape, src: Var, t: usize| -> Result<Var> {
        let s = tape.slice(src, 1, t, 1)?;
        Ok(tape.reshape(s, &[batch, hidden])?)
    };

    let mut h = tape.constant(Tensor::zeros(vec![batch, hidden]));
    let mut states = vec![h; frames];
    let order: Vec<usize> = if reverse {
        (0..frames).rev().collect()
    } else {
        (0..frames).collect()
    };
    for t in order {
        let (az, ar, an) = (
            step_input(tape, xz, t)?,
            step_input(tape, xr, t)?,
            step_input(tape, xn, t)?,
        );
        let hz = tape.matmul(h, uz)?;
        let z = tape.add(az, hz)?;
        let z = tape.sigmoid(z)?;
        let hr = tape.matmul(h, ur)?;
        let r = tape.add(ar, hr)?;
        let r = tape.sigmoid(r)?;
        let hn = tape.matmul(h, un)?;
        let gated = tape.mul(r, hn)?;
        let n = tape.add(an, gated)?;
        let n = tape.tanh(n)?;
        let diff = tape.sub(h, n)?;
        let keep = tape.mul(z, diff)?;
        h = tape.add(n, keep)?;
        states[t] = h;
    }
    Ok(states)
}

/// Parameter shapes of the enhancement block for one stream.
/// Hidden width per direction is `D / 2`.
pub fn enhance_param_shapes(prefix: &str, dim: usize) -> Vec<(String, Vec<usize>, bool)> {
    let hidden = (dim / 2).max(1);
    let mut out = gru_param_shapes(&format!("{prefix}.fwd"), dim, hidden);
    out.extend(gru_param_shapes(&format!("{prefix}.bwd"), dim, hidden));
    out.push((format!("{prefix}.proj.w"), vec![2 * hidden, dim], false));
    out.push((format!("{prefix}.proj.b"), vec![dim], true));
    out
}

/// `out[n][t] = x[n][t] + proj(forward_state[n][t] ⊕ backward_state[n][t])`
/// for a stream `x [N, T, D]`. Nodes are processed independently.
pub fn enhance(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::Graph(format!(
            "enhance expects [N, T, D], got {shape:?}"
        )));
    }
    let (n, frames) = (shape[0], shape[1]);
    let fwd = gru_states(tape, store, &format!("{prefix}.fwd"), x, false)?;
    let bwd = gru_states(tape, store, &format!("{prefix}.bwd"), x, true)?;
    let mut steps = Vec::with_capacity(frames);
    for t in 0..frames {
        let both = tape.concat(&[fwd[t], bwd[t]], 1)?;
        let width = tape.shape(both)[1];
        steps.push(tape.reshape(both, &[n, 1, width])?);
    }
    let states = tape.concat(&steps, 1)?;
    let w = tape.param(store, &format!("{prefix}.proj.w"))?;
    let b = tape.param(store, &format!("{prefix}.proj.b"))?;
    let delta = tape.linear(states, w, Some(b))?;
    Ok(tape.add(x, delta)?)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn store(rng: &mut ChaCha8Rng, dim: usize, zero: bool) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, shape, _) in enhance_param_shapes("te", dim) {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| if zero { 0.0 } else { rng.gen_range(-0.8..0.8) })
                .collect();
            s.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
        }
        s
    }

    fn input(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn run(s: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = enhance(&mut tape, s, "te", xv).unwrap();
        tape.value(y).clone()
    }

    fn reverse_frames(x: &Tensor) -> Tensor {
        let s = x.shape();
        let mut out = x.clone();
        for n in 0..s[0] {
            for t in 0..s[1] {
                for d in 0..s[2] {
                    out.set(&[n, s[1] - 1 - t, d], x.get(&[n, t, d]));
                }
            }
        }
        out
    }

    #[test]
    fn zero_parameters_give_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = store(&mut rng, 6, true);
        let x = input(&mut rng, [3, 5, 6]);
        assert_eq!(run(&s, &x), x);
    }

    #[test]
    fn single_frame_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = store(&mut rng, 4, false);
        let x = input(&mut rng, [2, 1, 4]);
        let y = run(&s, &x);
        assert_eq!(y.shape(), &[2, 1, 4]);
        assert!(y.is_finite());
    }

    #[test]
    fn reversing_time_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 4;
        let s = store(&mut rng, dim, false);
        let x = input(&mut rng, [2, 3, dim]);

        let mut swapped = ParamStore::new();
        for (name, p) in s.iter() {
            let renamed = if let Some(rest) = name.strip_prefix("te.fwd.") {
                format!("te.bwd.{rest}")
            } else if let Some(rest) = name.strip_prefix("te.bwd.") {
                format!("te.fwd.{rest}")
            } else {
                name.to_string()
            };
            swapped.insert(renamed, p.value.clone()).unwrap();
        }
        // the projection reads [fwd ⊕ bwd]; swap its two row blocks as well
        let w = s.value("te.proj.w").unwrap();
        let h = w.shape()[0] / 2;
        let mut w2 = w.clone();
        for r in 0..2 * h {
            for c in 0..dim {
                w2.set(&[(r + h) % (2 * h), c], w.get(&[r, c]));
            }
        }
        swapped.set_value("te.proj.w", w2).unwrap();

        let lhs = run(&swapped, &reverse_frames(&x));
        let rhs = reverse_frames(&run(&s, &x));
        assert!(lhs.max_abs_diff(&rhs) < 1e-14, "{}", lhs.max_abs_diff(&rhs));
    }

    #[test]
    fn nodes_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = store(&mut rng, 4, false);
        let x = input(&mut rng, [3, 4, 4]);
        let mut edited = x.clone();
        for t in 0..4 {
            for d in 0..4 {
                edited.set(&[1, t, d], 5.0 * (t as f64 - d as f64));
            }
        }
        let (a, b) = (run(&s, &x), run(&s, &edited));
        for n in [0, 2] {
            for t in 0..4 {
                for d in 0..4 {
                    assert_eq!(a.get(&[n, t, d]), b.get(&[n, t, d]));
                }
            }
        }
    }

    #[test]
    fn gradient_check_through_enhance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = store(&mut rng, 4, false);
        s.insert("x", input(&mut rng, [2, 4, 4])).unwrap();
        let weights = input(&mut rng, [2, 4, 4]);
        let report = grad_check(
            |tape: &mut Tape, st: &ParamStore| -> Result<Var> {
                let x = tape.param(st, "x")?;
                let y = enhance(tape, st, "te", x)?;
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
}
