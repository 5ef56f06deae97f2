//! Dense tensors, a reverse-mode tape, parameter storage, finite-difference
//! checks and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport};
pub use params::{Param, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Mask, Tensor};

/// Slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has every entry masked out")]
    AllMasked { row: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("backward needs a single-value loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::{analytic_gradients, compare, numerical_gradients};
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn difference_resolution_is_one_ulp_over_two_steps() {
        use super::gradcheck::difference_resolution;
        assert_eq!(difference_resolution(1.0, 0.5), f64::EPSILON);
        assert_eq!(difference_resolution(-8.0, 1e-5), 8.0 * f64::EPSILON / 2e-5);
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert_eq!(t(&[2, 3], &[0., 1., 2., 3., 4., 5.]).get(&[1, 2]), 5.0);
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1., 2.]));
        let w = tape.constant(Tensor::identity(2));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2.]);

        let x = tape.constant(t(&[2], &[1., 1.]));
        let w = tape.constant(t(&[2, 1], &[2., 3.]));
        let b = tape.constant(t(&[1], &[1.]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 4]));
        let w = tape.constant(Tensor::zeros(vec![5, 2]));
        let err = tape.linear(x, w, None).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                op: "linear",
                left: vec![3, 4],
                right: vec![5, 2]
            }
        );
        assert!(err.to_string().contains("[3, 4]") && err.to_string().contains("[5, 2]"));
    }

    #[test]
    fn linear_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[3, 4]);
        let mut store = ParamStore::new();
        store.insert("w", random(&mut rng, &[4, 3])).unwrap();
        let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let xv = tape.constant(x.clone());
            let w = tape.param(s, "w")?;
            let y = tape.linear(xv, w, None)?;
            tape.sum(y)
        };
        let report = grad_check(f, &store, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x, None).unwrap();
        for &v in tape.value(y).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let x = tape.constant(t(&[3], &[5., 5., 5.]));
        let mask = Mask::new(vec![3], vec![true, true, false]).unwrap();
        let y = tape.softmax(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);

        let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, None).unwrap();
        let expected = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, e) in tape.value(y).data().iter().zip(expected) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_all_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let mask = Mask::new(vec![2, 2], vec![true, false, false, false]).unwrap();
        assert_eq!(
            tape.softmax(x, Some(&mask)).unwrap_err(),
            NumericsError::AllMasked { row: 1 }
        );
    }

    #[test]
    fn masked_softmax_entries_get_exactly_zero_gradient() {
        let mut store = ParamStore::new();
        store
            .insert("x", t(&[2, 3], &[0.3, -1.2, 2.0, 0.5, 0.1, -0.7]))
            .unwrap();
        let mask = Mask::new(vec![2, 3], vec![true, false, true, false, true, true]).unwrap();
        let weights = t(&[2, 3], &[1.0, 2.0, -3.0, 0.5, 4.0, 1.5]);
        let g = analytic_gradients(
            |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
                let x = tape.param(s, "x")?;
                let y = tape.softmax(x, Some(&mask))?;
                let w = tape.constant(weights.clone());
                let z = tape.mul(y, w)?;
                tape.sum(z)
            },
            &store,
        )
        .unwrap();
        let grad = g.grad("x").unwrap().data();
        assert_eq!(grad[1], 0.0);
        assert_eq!(grad[3], 0.0);
        assert!(grad[0] != 0.0);
    }

    #[test]
    fn leaky_relu_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[2., -2.]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[1], -0.4, epsilon = 1e-15);
        assert_eq!(tape.value(y).data()[0], 2.0);
        let z = tape.constant(t(&[1], &[0.]));
        let y = tape.leaky_relu(z, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
        assert!(tape.leaky_relu(z, 1.5).is_err());

        let mut store = ParamStore::new();
        store.insert("x", t(&[2], &[-1., 1.])).unwrap();
        let g = analytic_gradients(
            |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
                let x = tape.param(s, "x")?;
                let y = tape.leaky_relu(x, 0.2)?;
                tape.sum(y)
            },
            &store,
        )
        .unwrap();
        assert_eq!(g.grad("x").unwrap().data(), &[0.2, 1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert_abs_diff_eq!(tape.value(l).data()[0], 2f64.ln(), epsilon = 1e-15);

        let x = tape.constant(t(&[2], &[100., 0.]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v.is_finite() && (0.0..1e-40).contains(&v));

        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let l = tape.cross_entropy(x, &[2]).unwrap();
        let e = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let oracle = -(3f64.exp() / e).ln();
        assert_abs_diff_eq!(tape.value(l).data()[0], oracle, epsilon = 1e-14);
        assert_abs_diff_eq!(oracle, 0.40761, epsilon = 1e-5);

        assert_eq!(
            tape.cross_entropy(x, &[3]).unwrap_err(),
            NumericsError::LabelOutOfRange {
                label: 3,
                classes: 3
            }
        );
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[3, 4]);
        let mut store = ParamStore::new();
        store.insert("w", random(&mut rng, &[4, 2])).unwrap();
        store.insert("b", random(&mut rng, &[2])).unwrap();
        let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let xv = tape.constant(x.clone());
            let w = tape.param(s, "w")?;
            let b = tape.param(s, "b")?;
            let y = tape.linear(xv, w, Some(b))?;
            tape.sum(y)
        };
        let report = grad_check(f, &store, 1e-5, 1e-4).unwrap();
        assert!(report.passed());

        let mut analytic = analytic_gradients(f, &store).unwrap();
        for (_, p) in analytic.iter_mut() {
            p.grad = p.grad.map(|g| g * 1.01);
        }
        let numeric = numerical_gradients(f, &store, 1e-5, None).unwrap();
        let report = compare(&analytic, &numeric, None, 1e-5, 1e-4);
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("x", t(&[1], &[1e308])).unwrap();
        let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let x = tape.param(s, "x")?;
            let y = tape.scale(x, 10.0)?;
            tape.sum(y)
        };
        assert_eq!(
            grad_check(f, &store, 1e-5, 1e-4).unwrap_err(),
            NumericsError::NonFinite { op: "scale" }
        );
    }

    #[test]
    fn backward_touches_exactly_the_used_parameters() {
        let mut store = ParamStore::new();
        store.insert("used", t(&[2], &[1., 2.])).unwrap();
        store.insert("unused", t(&[2], &[3., 4.])).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, "used").unwrap();
        let y = tape.sum(u).unwrap();
        tape.backward_into(y, &mut store).unwrap();
        assert_eq!(store.grad("used").unwrap().data(), &[1., 1.]);
        assert_eq!(store.grad("unused").unwrap().data(), &[0., 0.]);
        assert_eq!(tape.param_names(), vec!["used"]);
    }

    #[test]
    fn conv1d_center_tap_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[2, 5, 3]);
        let mut w = Tensor::zeros(vec![3, 3, 3]);
        for c in 0..3 {
            w.set(&[1, c, c], 1.0);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let y = tape.conv1d(xv, wv, None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv1d_pads_with_zeros() {
        // kernel [1, 1, 1] on a single channel: y_t = x_{t-1} + x_t + x_{t+1}
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1], &[1., 2., 3., 4.]));
        let w = tape.constant(t(&[3, 1, 1], &[1., 1., 1.]));
        let y = tape.conv1d(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 6., 9., 7.]);
    }

    #[test]
    fn pair_concat_layout() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1., 2.]));
        let y = tape.pair_concat(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1., 1., 1., 2., 2., 1., 2., 2.]);
    }

    #[test]
    fn permute_and_slice() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0., 1., 2., 3., 4., 5.]));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 3., 1., 4., 2., 5.]);
        let s = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[1., 2., 4., 5.]);
        let c = tape.concat(&[x, s], 1).unwrap();
        assert_eq!(
            tape.value(c).data(),
            &[0., 1., 2., 1., 2., 3., 4., 5., 4., 5.]
        );
        assert!(tape.slice(x, 1, 2, 2).is_err());
    }

    #[test]
    fn max_axis_breaks_ties_low() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1., 5., 1., 2., 0., 5.]));
        let y = tape.max_axis(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 5.]);
    }

    /// Builds a scalar from one operator applied to random parameters.
    fn op_objective(op: &str, tape: &mut Tape, s: &ParamStore, weights: &Tensor) -> Result<Var> {
        let a = tape.param(s, "a")?;
        let out = match op {
            "linear" => {
                let w = tape.param(s, "w")?;
                let b = tape.param(s, "b")?;
                tape.linear(a, w, Some(b))?
            }
            "matmul" => {
                let c = tape.param(s, "c")?;
                tape.matmul(a, c)?
            }
            "add" => {
                let c = tape.param(s, "a2")?;
                tape.add(a, c)?
            }
            "sub" => {
                let c = tape.param(s, "a2")?;
                tape.sub(a, c)?
            }
            "mul" => {
                let c = tape.param(s, "a2")?;
                tape.mul(a, c)?
            }
            "scale" => tape.scale(a, -1.7)?,
            "concat" => {
                let c = tape.param(s, "a2")?;
                let y = tape.concat(&[a, c], 1)?;
                tape.slice(y, 1, 1, weights.shape()[1])?
            }
            "permute" => {
                let y = tape.permute(a, &[1, 0, 2])?;
                tape.permute(y, &[1, 0, 2])?
            }
            "pair" => {
                let y = tape.pair_concat(a)?;
                let by_row = tape.sum_axis(y, 2)?;
                let by_col = tape.sum_axis(y, 1)?;
                let y = tape.mul(by_row, by_col)?;
                let d = weights.shape()[2];
                let mix: Vec<f64> = (0..2 * d * d)
                    .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
                    .collect();
                let mix = tape.constant(Tensor::new(vec![2 * d, d], mix)?);
                tape.linear(y, mix, None)?
            }
            "softmax" => {
                let mask = Mask::new(
                    weights.shape()[1..].to_vec(),
                    (0..weights.len() / weights.shape()[0])
                        .map(|i| (i % weights.shape()[2]) % 3 != 1)
                        .collect(),
                )?;
                tape.softmax(a, Some(&mask))?
            }
            "leaky_relu" => tape.leaky_relu(a, LEAKY_SLOPE)?,
            "relu" => tape.relu(a)?,
            "tanh" => tape.tanh(a)?,
            "sigmoid" => tape.sigmoid(a)?,
            "mean" => {
                let m = tape.mean_axis(a, 1)?;
                let r = tape.mean(a)?;
                let shape = tape.shape(m).to_vec();
                let r = tape.reshape(r, &[1, 1])?;
                let cols = shape.iter().product::<usize>();
                let r = tape.gather_rows(r, &vec![0; cols])?;
                let r = tape.reshape(r, &shape)?;
                let z = tape.add(m, r)?;
                let z = tape.reshape(z, &[shape[0], 1, shape[1]])?;
                tape.concat(&vec![z; weights.shape()[1]], 1)?
            }
            "max" => {
                let m = tape.max_axis(a, 1)?;
                let shape = tape.shape(m).to_vec();
                let z = tape.reshape(m, &[shape[0], 1, shape[1]])?;
                tape.concat(&vec![z; weights.shape()[1]], 1)?
            }
            "conv1d" => {
                let w = tape.param(s, "k")?;
                let b = tape.param(s, "b")?;
                tape.conv1d(a, w, Some(b))?
            }
            "gather" => {
                let shape = tape.shape(a).to_vec();
                let flat = tape.reshape(a, &[shape[0] * shape[1], shape[2]])?;
                let n = shape[0] * shape[1];
                let idx: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
                let g = tape.gather_rows(flat, &idx)?;
                tape.reshape(g, &shape)?
            }
            other => panic!("unknown op {other}"),
        };
        let w = tape.constant(weights.clone());
        let z = tape.mul(out, w)?;
        tape.sum(z)
    }

    #[test]
    fn every_operator_passes_grad_check_on_random_shapes() {
        let ops = [
            "linear",
            "matmul",
            "add",
            "sub",
            "mul",
            "scale",
            "concat",
            "permute",
            "pair",
            "softmax",
            "leaky_relu",
            "relu",
            "tanh",
            "sigmoid",
            "mean",
            "max",
            "conv1d",
            "gather",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..6 {
            for op in ops {
                let b = rng.gen_range(1..=4);
                let n = rng.gen_range(2..=8);
                let d = rng.gen_range(1..=8);
                let dout = rng.gen_range(1..=8);
                let mut store = ParamStore::new();
                store.insert("a", random(&mut rng, &[b, n, d])).unwrap();
                store.insert("a2", random(&mut rng, &[b, n, d])).unwrap();
                store.insert("w", random(&mut rng, &[d, dout])).unwrap();
                store.insert("b", random(&mut rng, &[dout])).unwrap();
                store.insert("c", random(&mut rng, &[b, d, dout])).unwrap();
                store.insert("k", random(&mut rng, &[3, d, dout])).unwrap();
                let out_shape = match op {
                    "linear" | "matmul" | "conv1d" => vec![b, n, dout],
                    "pair" => vec![b, n, d],
                    _ => vec![b, n, d],
                };
                let weights = random(&mut rng, &out_shape);
                let report = grad_check(
                    |tape: &mut Tape, s: &ParamStore| op_objective(op, tape, s, &weights),
                    &store,
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(
                    report.passed(),
                    "op {op} trial {trial} shape [{b},{n},{d}]: {:?}",
                    report.worst()
                );
            }
        }
    }

    #[test]
    fn cross_entropy_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.insert("z", random(&mut rng, &[4, 5])).unwrap();
        let report = grad_check(
            |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
                let z = tape.param(s, "z")?;
                tape.cross_entropy(z, &[0, 4, 2, 2])
            },
            &store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[3, 4, 5]);
        let w = random(&mut rng, &[5, 6]);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.linear(xv, wv, None).unwrap();
            let y = tape.softmax(y, None).unwrap();
            tape.value(y).clone()
        };
        let a = run();
        let b = run();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(
                rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 4), 1..6),
                mask_bits in prop::collection::vec(any::<bool>(), 4),
                shift in -50.0f64..50.0,
            ) {
                let mut bits = mask_bits.clone();
                bits[0] = true;
                let r = rows.len();
                let data: Vec<f64> = rows.concat();
                let mask = Mask::new(vec![4], bits.clone()).unwrap();
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(vec![r, 4], data.clone()).unwrap());
                let y = tape.softmax(x, Some(&mask)).unwrap();
                let shifted = tape.constant(Tensor::new(vec![r, 4], data.iter().map(|v| v + shift).collect()).unwrap());
                let ys = tape.softmax(shifted, Some(&mask)).unwrap();
                for (row, srow) in tape.value(y).data().chunks(4).zip(tape.value(ys).data().chunks(4)) {
                    let total: f64 = row.iter().sum();
                    prop_assert!((total - 1.0).abs() <= 1e-12);
                    for c in 0..4 {
                        if !bits[c] { prop_assert_eq!(row[c], 0.0); } else { prop_assert!(row[c] > 0.0); }
                        prop_assert!((row[c] - srow[c]).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}
