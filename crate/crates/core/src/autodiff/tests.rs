use super::check::{central_difference, relative_error};
use super::*;
use crate::error::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Analytic gradient of `build` (graph → scalar) w.r.t. the single leaf `x`.
fn analytic(x: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let loss = build(&mut g, v);
    g.backward(loss).unwrap();
    g.grad(v).unwrap().clone()
}

fn numeric(x: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) -> Tensor {
    central_difference(
        |t| {
            let mut g = Graph::new();
            let v = g.leaf(t.clone());
            let loss = build(&mut g, v);
            g.value(loss).item()
        },
        x,
        1e-6,
    )
}

fn gradcheck(x: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let a = analytic(x, build);
    let n = numeric(x, build);
    assert_eq!(a.shape(), x.shape());
    relative_error(a.data(), n.data())
}

#[test]
fn matmul_hand_products() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let col = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let p = g.matmul(eye, col).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 4.0]);

    let row = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let p = g.matmul(row, col).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1]);
    assert_eq!(g.value(p).item(), 11.0);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&mut rng, &[3, 3]);
    let a = random(&mut rng, &[3, 3]);
    let err = gradcheck(&a, &|g, v| {
        let bb = g.constant(b.clone());
        let p = g.matmul(v, bb).unwrap();
        g.sum(p).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn elementwise_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::vector(vec![0.0]));
    let e = g.exp(z).unwrap();
    assert_eq!(g.value(e).data(), &[1.0]);
}

#[test]
fn relu_subgradient() {
    let grad = analytic(&Tensor::vector(vec![-1.0, 2.0]), &|g, v| {
        let r = g.relu(v).unwrap();
        g.sum(r).unwrap()
    });
    assert_eq!(grad.data(), &[0.0, 1.0]);
    let at_zero = analytic(&Tensor::vector(vec![0.0]), &|g, v| {
        let r = g.relu(v).unwrap();
        g.sum(r).unwrap()
    });
    assert_eq!(at_zero.data(), &[0.0]);
}

#[test]
fn log_and_sqrt_reject_negative_inputs() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, -0.5]));
    assert!(matches!(g.log(x), Err(Error::Domain(_))));
    assert!(matches!(g.sqrt(x), Err(Error::Domain(_))));
}

#[test]
fn scalar_broadcast_and_shape_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let s = g.constant(Tensor::scalar(3.0));
    let y = g.mul(x, s).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 6.0]);
    let y = g.sub(s, x).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 1.0]);
    let w = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(g.add(x, w).is_err());
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[4, 3]).map(|v| v.abs() + 0.2);
    let other = random(&mut rng, &[4, 3]);
    let err = gradcheck(&x, &|g, v| {
        let o = g.constant(other.clone());
        let a = g.mul(v, o).unwrap();
        let b = g.exp(a).unwrap();
        let c = g.log(v).unwrap();
        let d = g.sqrt(v).unwrap();
        let e = g.add(b, c).unwrap();
        let f = g.sub(e, d).unwrap();
        let h = g.scale(f, 0.7).unwrap();
        let k = g.relu(h).unwrap();
        g.sum(k).unwrap()
    });
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn scalar_operand_gradient_sums() {
    let grad = analytic(&Tensor::scalar(2.0), &|g, s| {
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.mul(x, s).unwrap();
        g.sum(y).unwrap()
    });
    assert_eq!(grad.data(), &[6.0]);
}

#[test]
fn concat_values_and_gradients() {
    let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::matrix(2, 3, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
    let mut g = Graph::new();
    let va = g.leaf(a.clone());
    let vb = g.leaf(b.clone());
    let c = g.concat(&[va, vb]).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 5]);
    assert_eq!(g.value(c).row(0), &[1.0, 2.0, 5.0, 6.0, 7.0]);
    assert_eq!(g.value(c).row(1), &[3.0, 4.0, 8.0, 9.0, 10.0]);
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(va).unwrap(), &Tensor::filled(&[2, 2], 1.0));
    assert_eq!(g.grad(vb).unwrap(), &Tensor::filled(&[2, 3], 1.0));

    let single = g.concat(&[va]).unwrap();
    assert_eq!(g.value(single), &a);

    let short = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.concat(&[va, short]), Err(Error::Dimension(_))));
}

#[test]
fn concat_gradient_weighted() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 2]);
    let other = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[3, 8]);
    let err = gradcheck(&x, &|g, v| {
        let o = g.constant(other.clone());
        let c = g.concat(&[o, v, v]).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(c, wv).unwrap();
        g.sum(p).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");
}

fn bn_fixture(m: usize) -> (Tensor, Tensor, BnState) {
    (
        Tensor::vector(vec![1.0; m]),
        Tensor::vector(vec![0.0; m]),
        BnState::new(m),
    )
}

#[test]
fn batch_norm_identical_rows_output_beta() {
    let (gamma, _, state) = bn_fixture(2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(3, 2, vec![5.0, -1.0, 5.0, -1.0, 5.0, -1.0]).unwrap());
    let ga = g.constant(gamma);
    let be = g.constant(Tensor::vector(vec![0.25, -3.0]));
    let (y, _) = g.batch_norm(x, ga, be, &state, Mode::Train).unwrap();
    for i in 0..3 {
        assert_eq!(g.value(y).row(i), &[0.25, -3.0]);
    }
}

#[test]
fn batch_norm_two_row_hand_value() {
    let (gamma, beta, state) = bn_fixture(1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap());
    let ga = g.constant(gamma);
    let be = g.constant(beta);
    let (y, moments) = g.batch_norm(x, ga, be, &state, Mode::Train).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    let out = g.value(y).data();
    assert!((out[0] + expect).abs() < 1e-15);
    assert!((out[1] - expect).abs() < 1e-15);
    let moments = moments.unwrap();
    assert_eq!(moments.mean, vec![0.0]);
    assert_eq!(moments.var, vec![1.0]);
}

#[test]
fn batch_norm_rejects_single_row_in_train_mode() {
    let (gamma, beta, state) = bn_fixture(2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2]));
    let ga = g.constant(gamma);
    let be = g.constant(beta);
    assert!(matches!(
        g.batch_norm(x, ga, be, &state, Mode::Train),
        Err(Error::BatchTooSmall(1))
    ));
    assert!(g.batch_norm(x, ga, be, &state, Mode::Eval).is_ok());
}

#[test]
fn batch_norm_running_statistics() {
    let mut state = BnState::new(1);
    state.update(&BatchMoments {
        mean: vec![2.0],
        var: vec![3.0],
        count: 4,
    });
    assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
    // 0.9·1 + 0.1·3·4/3
    assert!((state.running_var[0] - 1.3).abs() < 1e-15);
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[8, 4]);
    let gamma = random(&mut rng, &[4]);
    let beta = random(&mut rng, &[4]);
    let w = random(&mut rng, &[8, 4]);
    let state = BnState::new(4);
    for mode in [Mode::Train, Mode::Eval] {
        let build = |g: &mut Graph, v: Var| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let (y, _) = g.batch_norm(v, ga, be, &state, mode).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv).unwrap();
            let q = g.mul(p, p).unwrap();
            g.sum(q).unwrap()
        };
        let err = gradcheck(&x, &build);
        assert!(err < 1e-5, "{mode:?}: rel err {err}");
    }
    // gradients w.r.t. the affine parameters
    let err = gradcheck(&gamma, &|g, v| {
        let xv = g.constant(x.clone());
        let be = g.constant(beta.clone());
        let (y, _) = g.batch_norm(xv, v, be, &state, Mode::Train).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        let q = g.mul(p, p).unwrap();
        g.sum(q).unwrap()
    });
    assert!(err < 1e-5, "gamma rel err {err}");
}

#[test]
fn log_softmax_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1000.0, 0.0]).unwrap());
    let y = g.log_softmax(x).unwrap();
    let out = g.value(y).data();
    let ln2 = std::f64::consts::LN_2;
    assert!((out[0] + ln2).abs() < 1e-15 && (out[1] + ln2).abs() < 1e-15);
    assert!(out[2].abs() < 1e-12);
    assert!((out[3] + 1000.0).abs() < 1e-9);
    assert!(out.iter().all(|v| v.is_finite()));

    let one = g.constant(Tensor::zeros(&[3, 1]));
    assert!(g.log_softmax(one).is_err());
}

#[test]
fn log_softmax_rows_normalize_and_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[5, 4]).map(|v| v * 10.0);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.log_softmax(v).unwrap();
    for i in 0..5 {
        let s: f64 = g.value(y).row(i).iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let w = random(&mut rng, &[5, 4]);
    let err = gradcheck(&x, &|g, v| {
        let y = g.log_softmax(v).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        g.sum(p).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn pairwise_distance_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
    let d = g.pairwise_distances(x).unwrap();
    assert_eq!(g.value(d).data(), &[0.0, 5.0, 5.0, 0.0]);

    let same = g.constant(Tensor::filled(&[4, 3], 2.5));
    let d = g.pairwise_distances(same).unwrap();
    assert!(g.value(d).data().iter().all(|v| *v == 0.0));
}

#[test]
fn pairwise_distance_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[6, 3]);
    let w = random(&mut rng, &[6, 6]);
    let err = gradcheck(&x, &|g, v| {
        let d = g.pairwise_distances(v).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(d, wv).unwrap();
        g.sum(p).unwrap()
    });
    assert!(err < 1e-5, "rel err {err}");

    // coincident rows: the zero-distance adjoint is 0
    let grad = analytic(&Tensor::filled(&[3, 2], 1.0), &|g, v| {
        let d = g.pairwise_distances(v).unwrap();
        g.sum(d).unwrap()
    });
    assert!(grad.data().iter().all(|v| *v == 0.0));
}

#[test]
fn u_center_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[5, 5]);
    let w = random(&mut rng, &[5, 5]);
    let err = gradcheck(&a, &|g, v| {
        let u = g.u_center(v).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(u, wv).unwrap();
        g.sum(p).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn select_and_pick_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[4, 3]);
    let err = gradcheck(&x, &|g, v| {
        let s = g.select_rows(v, &[3, 1, 1]).unwrap();
        let q = g.mul(s, s).unwrap();
        let p = g.pick_columns(v, &[0, 2, 1, 0]).unwrap();
        let a = g.sum(q).unwrap();
        let b = g.mean(p).unwrap();
        g.add(a, b).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn backward_basics() {
    let grad = analytic(&Tensor::filled(&[2, 3], 0.3), &|g, v| g.sum(v).unwrap());
    assert_eq!(grad, Tensor::filled(&[2, 3], 1.0));

    let grad = analytic(&Tensor::vector(vec![1.0, 2.0]), &|g, v| {
        let sq = g.mul(v, v).unwrap();
        g.sum(sq).unwrap()
    });
    assert_eq!(grad.data(), &[2.0, 4.0]);

    let grad = analytic(&Tensor::scalar(1.5), &|g, v| g.add(v, v).unwrap());
    assert_eq!(grad.data(), &[2.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_doubles_leaf_gradients() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
    let sq = g.mul(x, x).unwrap();
    let e = g.exp(sq).unwrap();
    let loss = g.sum(e).unwrap();
    g.backward(loss).unwrap();
    let first = g.grad(x).unwrap().clone();
    g.backward(loss).unwrap();
    let second = g.grad(x).unwrap();
    for (a, b) in first.data().iter().zip(second.data()) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn validation_rejects_non_finite() {
    assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
    assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
    let mut g = Graph::with_validation();
    let x = g.constant(Tensor::vector(vec![1000.0]));
    assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1000.0]));
    assert!(g.exp(x).is_ok());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[7, 3]);
    let run = || {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let d = g.pairwise_distances(v).unwrap();
        let u = g.u_center(d).unwrap();
        let l = g.log_softmax(u).unwrap();
        g.value(l).clone()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
