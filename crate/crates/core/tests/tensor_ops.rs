use proptest::prelude::*;
use qgca_core::gradcheck;
use qgca_core::tensor::{Adam, AdamState, ParamGrads, ParamStore, ReduceKind, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn unary_examples() {
    let tape = Tape::new();
    assert_eq!(tape.leaf(Tensor::scalar(0.0)).sigmoid().unwrap().value().item(), 0.5);
    assert_eq!(tape.leaf(Tensor::scalar(0.0)).tanh().unwrap().value().item(), 0.0);
    let e = tape.leaf(Tensor::vector(vec![0.0, 2f64.ln()])).exp().unwrap().value();
    close(e.data(), &[1.0, 2.0], 1e-15);
}

#[test]
fn log_of_non_positive_names_the_index() {
    let tape = Tape::new();
    let err = tape.leaf(Tensor::vector(vec![1.0, 2.0, 0.0])).log().unwrap_err();
    assert!(matches!(err, TensorError::Domain { index: 2, .. }));
}

#[test]
fn binary_examples_and_loop_oracle() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(a.mul(b).unwrap().value().data(), &[3.0, 8.0]);
    assert_eq!(a.add(tape.leaf(Tensor::zeros(vec![2]))).unwrap().value(), a.value());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (x, y) = (random(&[2, 3], &mut rng), random(&[2, 3], &mut rng));
        let (xv, yv) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
        let sum = xv.add(yv).unwrap().value();
        let diff = xv.sub(yv).unwrap().value();
        let prod = xv.mul(yv).unwrap().value();
        for i in 0..6 {
            assert_eq!(sum.data()[i], x.data()[i] + y.data()[i]);
            assert_eq!(diff.data()[i], x.data()[i] - y.data()[i]);
            assert_eq!(prod.data()[i], x.data()[i] * y.data()[i]);
        }
    }
}

#[test]
fn incompatible_shapes_report_both() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![3, 2]));
    match a.add(b).unwrap_err() {
        TensorError::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn broadcast_gradients_sum_over_expanded_axes() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(vec![4, 3], 2.0));
    let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = x.mul(b).unwrap().sum().unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(b).unwrap().data(), &[8.0, 8.0, 8.0]);
    assert_eq!(g.wrt(x).unwrap().row(0), &[1.0, 2.0, 3.0]);
}

#[test]
fn matmul_examples_and_triple_loop() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], &mut rng);
    let eye = Tensor::new(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    assert_eq!(tape.leaf(a.clone()).matmul(tape.leaf(eye)).unwrap().value(), a);
    let six = tape.leaf(Tensor::from_rows(&[vec![2.0]]).unwrap());
    let three = tape.leaf(Tensor::from_rows(&[vec![3.0]]).unwrap());
    assert_eq!(six.matmul(three).unwrap().value().item(), 6.0);

    let b = random(&[4, 2], &mut rng);
    let c = tape.leaf(a.clone()).matmul(tape.leaf(b.clone())).unwrap().value();
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..4).map(|k| a.get(&[i, k]) * b.get(&[k, j])).sum();
            assert!((c.get(&[i, j]) - want).abs() < 1e-12);
        }
    }
    assert!(tape.leaf(a.clone()).matmul(tape.leaf(a)).is_err());
}

fn conv1d_oracle(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let (l, cin) = (x.shape()[0], x.shape()[1]);
    let (kw, cout) = (k.shape()[0], k.shape()[2]);
    let half = (kw / 2) as isize;
    let mut out = vec![0.0; l * cout];
    for t in 0..l {
        for o in 0..cout {
            let mut acc = 0.0;
            for dk in 0..kw {
                let src = t as isize + dk as isize - half;
                if src < 0 || src >= l as isize {
                    continue;
                }
                for c in 0..cin {
                    acc += x.get(&[src as usize, c]) * k.get(&[dk, c, o]);
                }
            }
            out[t * cout + o] = acc;
        }
    }
    out
}

#[test]
fn conv1d_examples_and_sliding_window() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5, 1], &mut rng);
    let ident = tape.leaf(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    assert_eq!(tape.leaf(x.clone()).conv1d(ident).unwrap().value(), x);

    let k = random(&[3, 2, 4], &mut rng);
    let zero = tape.leaf(Tensor::zeros(vec![5, 2])).conv1d(tape.leaf(k.clone())).unwrap().value();
    assert!(zero.data().iter().all(|&v| v == 0.0));

    let x = random(&[5, 2], &mut rng);
    let y = tape.leaf(x.clone()).conv1d(tape.leaf(k.clone())).unwrap().value();
    assert_eq!(y.shape(), &[5, 4]);
    close(y.data(), &conv1d_oracle(&x, &k), 1e-12);

    let even = tape.leaf(Tensor::zeros(vec![2, 2, 4]));
    assert!(matches!(tape.leaf(x).conv1d(even), Err(TensorError::Config(_))));
}

fn conv2d_oracle(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let (t, f, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let mut out = vec![0.0; t * f * cout];
    for i in 0..t {
        for j in 0..f {
            for o in 0..cout {
                let mut acc = 0.0;
                for di in 0..kh {
                    for dj in 0..kw {
                        let si = i as isize + di as isize - (kh / 2) as isize;
                        let sj = j as isize + dj as isize - (kw / 2) as isize;
                        if si < 0 || sj < 0 || si >= t as isize || sj >= f as isize {
                            continue;
                        }
                        for c in 0..cin {
                            acc += x.get(&[si as usize, sj as usize, c]) * k.get(&[di, dj, c, o]);
                        }
                    }
                }
                out[(i * f + j) * cout + o] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_examples_and_loop_oracle() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[4, 4, 2], &mut rng);
    let mut delta = vec![0.0; 9 * 4];
    // centre tap, channel c → c
    delta[4 * 4] = 1.0;
    delta[4 * 4 + 3] = 1.0;
    let delta = tape.leaf(Tensor::new(vec![3, 3, 2, 2], delta).unwrap());
    assert_eq!(tape.leaf(x.clone()).conv2d(delta).unwrap().value(), x);

    let k = random(&[3, 3, 2, 3], &mut rng);
    let zero = tape.leaf(Tensor::zeros(vec![4, 4, 2])).conv2d(tape.leaf(k.clone())).unwrap().value();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let y = tape.leaf(x.clone()).conv2d(tape.leaf(k.clone())).unwrap().value();
    close(y.data(), &conv2d_oracle(&x, &k), 1e-12);

    let wrong = tape.leaf(Tensor::zeros(vec![3, 3, 5, 3]));
    assert!(matches!(tape.leaf(x).conv2d(wrong), Err(TensorError::Shape { .. })));
}

#[test]
fn lp_pool_examples() {
    let tape = Tape::new();
    let c = tape.leaf(Tensor::full(vec![2, 4], 1.5)).lp_pool(4.0, &[2, 2], &[2, 2]).unwrap().value();
    close(c.data(), &[1.5, 1.5], 1e-14);
    let z = tape.leaf(Tensor::zeros(vec![1, 2])).lp_pool(4.0, &[1, 2], &[1, 2]).unwrap().value();
    assert_eq!(z.data(), &[0.0]);
    let v = tape.leaf(Tensor::vector(vec![1.0, 2.0])).lp_pool(4.0, &[2], &[2]).unwrap().value();
    assert!((v.item() - 8.5f64.powf(0.25)).abs() < 1e-14);
    assert!((v.item() - 1.7075).abs() < 1e-4);
    assert!(matches!(
        tape.leaf(Tensor::zeros(vec![1, 2])).lp_pool(4.0, &[2, 2], &[1, 1]),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let u = tape.leaf(Tensor::full(vec![5], 0.3)).softmax(0).unwrap().value();
    close(u.data(), &[0.2; 5], 1e-15);
    let s = tape.leaf(Tensor::vector(vec![0.0, 3f64.ln()])).softmax(0).unwrap().value();
    close(s.data(), &[0.25, 0.75], 1e-15);
    let nan = tape.leaf(Tensor::vector(vec![0.0, f64::NAN])).softmax(0);
    assert!(matches!(nan, Err(TensorError::Numeric { index: 1, .. })));
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    let n = tape.leaf(Tensor::vector(vec![3.0, 4.0])).reduce(ReduceKind::L2Norm, None).unwrap();
    assert!((n.value().item() - 5.0).abs() < 1e-12);
    assert_eq!(tape.leaf(Tensor::zeros(vec![3, 2])).mean().unwrap().value().item(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = random(&[17], &mut rng);
    let mut acc = 0.0;
    for x in v.data() {
        acc += x;
    }
    assert!((tape.leaf(v).sum().unwrap().value().item() - acc).abs() < 1e-12);
    let rows = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap());
    let per_row = rows.reduce(ReduceKind::L2Norm, Some(1)).unwrap().value();
    assert!((per_row.data()[0] - 5.0).abs() < 1e-12);
    assert!((per_row.data()[1] - 1e-6).abs() < 1e-12);
}

#[test]
fn l2norm_gradient_is_finite_at_zero() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![4]));
    let g = tape.backward(x.reduce(ReduceKind::L2Norm, None).unwrap()).unwrap();
    assert!(g.wrt(x).unwrap().is_finite());
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = tape.leaf(random(&[3, 2], &mut rng));
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let g = tape.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_contract_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    let s = x.sum().unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(TensorError::Contract(_))));
    let other = Tape::new();
    let y = other.leaf(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn two_uses_sum_their_partials() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.0]));
    let y = x.exp().unwrap().add(x.scale(3.0).unwrap()).unwrap().sum().unwrap();
    let g = tape.backward(y).unwrap();
    close(g.wrt(x).unwrap().data(), &[0.5f64.exp() + 3.0, (-1f64).exp() + 3.0], 1e-15);
}

#[test]
fn ops_are_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 4, 2], &mut rng);
    let k = random(&[3, 3, 2, 2], &mut rng);
    let run = || {
        let tape = Tape::new();
        tape.leaf(x.clone()).conv2d(tape.leaf(k.clone())).unwrap().softmax(1).unwrap().value()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::new();
    let i = store.add("w", Tensor::vector(vec![0.5, -0.5]), true).unwrap();
    let mut state = AdamState::new(&store);
    let mut grads = ParamGrads::zeros(&store);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let g = tape.backward(p[i].sum().unwrap()).unwrap();
    grads.accumulate(&g, 1.0).unwrap();
    Adam::default().step(&mut store, &grads, &mut state).unwrap();
    close(store.get(i).tensor.data(), &[0.499, -0.501], 1e-9);
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in [1, 8] {
        for e in gradcheck::suite(seed).unwrap() {
            assert!(e.passes(), "{} (seed {seed}): relative error {}", e.check.name, e.check.rel_error);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        vals in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let tape = Tape::new();
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let y = tape.leaf(x.clone()).softmax(1).unwrap().value();
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(y.row(r).iter().all(|&v| v > 0.0 && v < 1.0 || v.abs() < 1e-300 || v == 1.0));
        }
        let shifted = tape.leaf(x.map(|v| v + shift)).softmax(1).unwrap().value();
        prop_assert!(y.max_abs_diff(&shifted) < 1e-9);
    }

    #[test]
    fn matmul_is_linear(seed in any::<u64>(), c in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&[2, 3], &mut rng), random(&[3, 4], &mut rng));
        let tape = Tape::new();
        let ab = tape.leaf(a.clone()).matmul(tape.leaf(b.clone())).unwrap().value();
        let cab = tape.leaf(a.map(|v| c * v)).matmul(tape.leaf(b)).unwrap().value();
        prop_assert!(ab.map(|v| c * v).max_abs_diff(&cab) < 1e-12);
    }

    #[test]
    fn lp_pool_lies_between_mean_abs_and_max_abs(vals in prop::collection::vec(-5.0f64..5.0, 8)) {
        let tape = Tape::new();
        let y = tape.leaf(Tensor::vector(vals.clone())).lp_pool(4.0, &[8], &[8]).unwrap().value().item();
        let mean_abs = vals.iter().map(|v| v.abs()).sum::<f64>() / 8.0;
        let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(y >= mean_abs - 1e-12 && y <= max_abs + 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones(shape in prop::collection::vec(1usize..4, 1..4)) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(shape.clone(), 0.3));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        prop_assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
