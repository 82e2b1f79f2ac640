//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the handful of operations the forecasting network needs are
//! provided. Broadcasting is limited to scalar-with-tensor and equal
//! shapes; anything else is a shape error.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Unary, Var, CONV_WIDTH};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central-difference gradient of `f` with respect to each input.
    fn numeric_grads(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], step: f64) -> Vec<Tensor> {
        inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut g = Tensor::zeros(t.shape());
                for i in 0..t.len() {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[i] += step;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[i] -= step;
                    g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
                }
                g
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Builds `build` on a fresh tape, backpropagates and compares every
    /// input gradient with central differences.
    fn check(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) {
        let eval = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).item().unwrap()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let numeric = numeric_grads(&eval, inputs, 1e-5);
        for (k, (v, num)) in vars.iter().zip(&numeric).enumerate() {
            let analytic = grads.get_or_zeros(*v, &inputs[k]);
            for (a, n) in analytic.data().iter().zip(num.data()) {
                assert!(rel_err(*a, *n) < 1e-6, "input {k}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let a = tape.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((tape.value(out).at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn conv1d_zero_input_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 6]));
        let k = tape.constant(Tensor::filled(&[5, 3], 0.7));
        let b = tape.constant(Tensor::vector(vec![0.0; 3]));
        let out = tape.conv1d_same(x, k, b).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_impulse_matches_sliding_window() {
        let x = vec![0.0, 0.0, 1.0, 0.0, 0.0];
        let kernel = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::vector(x.clone()));
        let k = tape.constant(Tensor::matrix(5, 1, kernel.clone()).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let out = tape.conv1d_same(xv, k, b).unwrap();
        // Sliding-window oracle: out[t] = Σ_j k[j] x[t + j - 2].
        let oracle: Vec<f64> = (0..5i64)
            .map(|t| {
                (0..5i64)
                    .map(|j| {
                        let src = t + j - 2;
                        if (0..5).contains(&src) {
                            kernel[j as usize] * x[src as usize]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        assert_eq!(oracle, vec![5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(tape.value(out).data(), oracle.as_slice());
    }

    #[test]
    fn conv1d_center_impulse_kernel_is_identity() {
        let x = vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.5];
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::vector(x.clone()));
        let k = tape.constant(Tensor::matrix(5, 1, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let out = tape.conv1d_same(xv, k, b).unwrap();
        assert_eq!(tape.value(out).data(), x.as_slice());
    }

    #[test]
    fn conv1d_rejects_empty_signal() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![]));
        let k = tape.constant(Tensor::zeros(&[5, 2]));
        let b = tape.constant(Tensor::vector(vec![0.0; 2]));
        assert!(matches!(tape.conv1d_same(x, k, b), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);

        let z = tape.param(Tensor::scalar(0.0));
        let s = tape.sin(z);
        assert_eq!(tape.value(s).item().unwrap(), 0.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(z).unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let r = tape.relu(x);
        let g = tape.backward(r).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn elementwise_rejects_incompatible_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(tape.mul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[3, 4]);
        let y = random(&mut rng, &[3, 4]);
        let c = random(&mut rng, &[1]);
        check(
            &|t, v| {
                let a = t.tanh(v[0]);
                let b = t.sin(v[1]);
                let p = t.mul(a, b).unwrap();
                let q = t.add(p, v[2]).unwrap();
                let r = t.scale_shift(q, 1.7, -0.3);
                let s = t.sub(r, v[0]).unwrap();
                let l = t.leaky_relu(s, 0.2);
                let w = t.mul(l, v[2]).unwrap();
                t.sum_all(w)
            },
            &[x, y, c],
        );
    }

    #[test]
    fn structured_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = random(&mut rng, &[4, 6]);
        let w = random(&mut rng, &[6, 6]);
        let bias = random(&mut rng, &[6]);
        let scale = random(&mut rng, &[4]);
        let gain = random(&mut rng, &[6]);
        let shift = random(&mut rng, &[6]);
        let k = random(&mut rng, &[5, 3]);
        let kb = random(&mut rng, &[3]);
        check(
            &|t, v| {
                let z = t.matmul(v[0], v[1]).unwrap();
                let z = t.add_bias(z, v[2]).unwrap();
                let z = t.row_scale(z, v[3]).unwrap();
                let z = t.layer_norm(z, v[4], v[5], 1e-8).unwrap();
                let pooled = t.mean_rows(z).unwrap();
                let conv = t.conv1d_same(v[3], v[6], v[7]).unwrap();
                let conv = t.tanh(conv);
                let cp = t.mean_rows(conv).unwrap();
                let cat = t.concat(&[pooled, cp]).unwrap();
                let sq = t.mul(cat, cat).unwrap();
                t.mean_all(sq)
            },
            &[h, w, bias, scale, gain, shift, k, kb],
        );
    }

    #[test]
    fn softmax_and_pair_sum_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random(&mut rng, &[4, 1]);
        let b = random(&mut rng, &[4, 1]);
        let vals = random(&mut rng, &[4, 3]);
        let mask = Tensor::from_rows(&[
            vec![1.0, 0.5, 0.0, 0.0],
            vec![0.5, 1.0, 0.0, 0.9],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.9, 0.0, 1.0],
        ])
        .unwrap();
        check(
            &|t, v| {
                let s = t.pair_sum(v[0], v[1]).unwrap();
                let s = t.leaky_relu(s, 0.2);
                let alpha = t.softmax_masked(s, &mask).unwrap();
                let out = t.matmul(alpha, v[2]).unwrap();
                let out = t.sin(out);
                t.sum_all(out)
            },
            &[a, b, vals],
        );
    }

    #[test]
    fn softmax_single_entry_rows_are_one() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[vec![3.0, -2.0], vec![0.1, 9.0]]).unwrap());
        let mask = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = tape.softmax_masked(s, &mask).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_scores_split_evenly() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::filled(&[2, 4], 0.25));
        let mask = Tensor::from_rows(&[vec![1.0, 0.4, 0.0, 0.7], vec![0.3, 1.0, 0.0, 0.0]]).unwrap();
        let out = tape.softmax_masked(s, &mask).unwrap();
        let v = tape.value(out);
        for j in [0, 1, 3] {
            assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v.at(0, 2), 0.0);
        assert!((v.at(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores = random(&mut rng, &[4, 4]);
        let mut mask = random(&mut rng, &[4, 4]);
        for i in 0..4 {
            mask.data_mut()[i * 4 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let s = tape.constant(scores.clone());
        let out = tape.softmax_masked(s, &mask).unwrap();
        let v = tape.value(out);
        for i in 0..4 {
            let denom: f64 = (0..4)
                .filter(|&j| mask.at(i, j) > 0.0)
                .map(|j| scores.at(i, j).exp())
                .sum();
            let mut row_sum = 0.0;
            for j in 0..4 {
                let expected = if mask.at(i, j) > 0.0 {
                    scores.at(i, j).exp() / denom
                } else {
                    0.0
                };
                assert!((v.at(i, j) - expected).abs() < 1e-12);
                row_sum += v.at(i, j);
            }
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_all_zero_mask_row() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[2, 2]));
        let mask = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(tape.softmax_masked(s, &mask), Err(Error::DegenerateRow(1))));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.5));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 1.0);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let prod = tape.mul(c, p).unwrap();
        let loss = tape.sum_all(prod);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn mean_pool_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap());
        let m = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 1.0]);

        let row = tape.constant(Tensor::from_rows(&[vec![4.0, -1.0, 7.0]]).unwrap());
        let m = tape.mean_rows(row).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, -1.0, 7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random(&mut rng, &[5, 3]);
        let v = tape.constant(r.clone());
        let m = tape.mean_rows(v).unwrap();
        for j in 0..3 {
            let mut s = 0.0;
            for i in 0..5 {
                s += r.at(i, j);
            }
            assert_eq!(tape.value(m).data()[j], s / 5.0);
        }
    }

    #[test]
    fn tape_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = random(&mut rng, &[3, 3]);
        let build = |tape: &mut Tape, x: Var, which: u8| -> Var {
            match which {
                0 => {
                    let t = tape.tanh(x);
                    tape.sum_all(t)
                }
                _ => {
                    let s = tape.mul(x, x).unwrap();
                    tape.mean_all(s)
                }
            }
        };
        let grad = |which: Option<u8>| {
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let loss = match which {
                Some(w) => build(&mut tape, x, w),
                None => {
                    let a = build(&mut tape, x, 0);
                    let b = build(&mut tape, x, 1);
                    tape.add(a, b).unwrap()
                }
            };
            tape.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let (g0, g1, both) = (grad(Some(0)), grad(Some(1)), grad(None));
        for i in 0..9 {
            assert!((g0.data()[i] + g1.data()[i] - both.data()[i]).abs() < 1e-14);
        }
    }
}
