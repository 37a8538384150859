use cipnet_tensor::{concat, grad_check, Result, Tape, Tensor, TensorError, Var, DEFAULT_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.3..2.0))
}

/// Contract an arbitrary-shape output with fixed random weights so every
/// output entry carries a distinct upstream gradient.
fn weighted_sum<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &out.shape());
    out.mul(out.tape().constant(w))?.sum()
}

fn check_unary(
    name: &str,
    make: fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>,
    shape: &[usize],
    op: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
) {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = make(&mut rng, shape);
        let report = grad_check(|_, v| weighted_sum(op(v[0])?, 99), &[x], DEFAULT_EPS).unwrap();
        assert!(
            report.max_rel_error < PRIMITIVE_TOL,
            "{name} seed {seed}: {report:?}"
        );
    }
}

#[test]
fn conv2d_sum_of_ones() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = x.conv2d(k, 1, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    assert_eq!(y.value().data(), &[9.0]);
}

#[test]
fn conv2d_scalar_kernel_scales() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = tape.constant(Tensor::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap());
    let y = x.conv2d(k, 1, 0).unwrap();
    assert_eq!(y.value().data(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn conv2d_output_extent_follows_stride_and_padding() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 9, 7]));
    let k = tape.constant(Tensor::zeros(&[4, 3, 3, 2]));
    let y = x.conv2d(k, 2, 1).unwrap();
    assert_eq!(y.shape(), vec![2, 4, (9 + 2 - 3) / 2 + 1, (7 + 2 - 2) / 2 + 1]);
}

#[test]
fn conv2d_channel_mismatch_names_axes() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
    match x.conv2d(k, 1, 0) {
        Err(TensorError::Dimension { op, axes, .. }) => {
            assert_eq!(op, "conv2d");
            assert!(axes.contains("axis 1"), "{axes}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
    let big = tape.constant(Tensor::zeros(&[2, 3, 5, 5]));
    assert!(matches!(x.conv2d(big, 1, 0), Err(TensorError::Dimension { .. })));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for (seed, stride, padding) in [(0, 1, 0), (1, 1, 1), (2, 2, 1)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 3, 8, 8]);
        let k = random(&mut rng, &[5, 3, 3, 3]);
        let report = grad_check(
            |_, v| weighted_sum(v[0].conv2d(v[1], stride, padding)?, 7),
            &[x, k],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < PRIMITIVE_TOL, "{report:?}");
    }
}

#[test]
fn channel_softmax_uniform_and_hand_values() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
    let s = z.channel_softmax().unwrap();
    assert!(s.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let z = tape.constant(Tensor::from_f64(&[1, 2, 1, 1], &[1f64.ln(), 3f64.ln()]).unwrap());
    let s = z.channel_softmax().unwrap().value();
    assert!((s.data()[0] - 0.25).abs() < 1e-12);
    assert!((s.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn channel_softmax_rejects_non_finite_input() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::from_f64(&[1, 2, 1, 1], &[f64::NAN, 0.0]).unwrap());
    assert_eq!(
        z.channel_softmax().unwrap_err(),
        TensorError::NonFinite {
            op: "channel_softmax"
        }
    );
}

#[test]
fn channel_softmax_gradient() {
    check_unary("channel_softmax", random, &[2, 5, 3, 3], |v| v.channel_softmax());
}

#[test]
fn spatial_max_values_and_tie_break() {
    let tape = Tape::<f64>::new();
    let single = tape.param(Tensor::from_f64(&[1, 2, 1, 1], &[0.3, 0.7]).unwrap());
    assert_eq!(single.spatial_max().unwrap().value().data(), &[0.3, 0.7]);

    let map = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[0.1, 0.9, 0.3, 0.2]).unwrap());
    assert_eq!(map.spatial_max().unwrap().value().data(), &[0.9]);

    let tie = tape.param(Tensor::from_f64(&[1, 1, 1, 2], &[0.5, 0.5]).unwrap());
    let (p, idx) = tie.spatial_max_with_index().unwrap();
    assert_eq!(idx, vec![0]);
    let grads = p.sum().unwrap().backward().unwrap();
    assert_eq!(grads.get(&tie).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn spatial_max_gradient() {
    check_unary("spatial_max", random, &[2, 3, 4, 5], |v| v.spatial_max());
}

#[test]
fn backward_requires_scalar_root() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[3]));
    assert!(matches!(x.backward(), Err(TensorError::Contract(_))));
}

#[test]
fn grad_check_quadratic() {
    let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let grads = v.mul(v).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(grads.get(&v).unwrap().data(), &[2.0, 4.0, 6.0]);
    let report = grad_check(|_, v| v[0].mul(v[0])?.sum(), &[x], DEFAULT_EPS).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_softmax_over_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 3, 6, 6]);
    let k = random(&mut rng, &[4, 3, 3, 3]);
    let report = grad_check(
        |_, v| weighted_sum(v[0].conv2d(v[1], 1, 1)?.channel_softmax()?, 3),
        &[x, k],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < PRIMITIVE_TOL, "{report:?}");
}

#[test]
fn elementwise_unary_gradients() {
    check_unary("log", positive, &[3, 4], |v| v.log());
    check_unary("exp", random, &[3, 4], |v| v.exp());
    check_unary("tanh", random, &[3, 4], |v| v.tanh());
    check_unary("sqrt", positive, &[3, 4], |v| v.sqrt());
    check_unary("abs", away_from_zero, &[3, 4], |v| v.abs());
    check_unary("relu", away_from_zero, &[3, 4], |v| v.relu());
    check_unary("clamp_min", away_from_zero, &[3, 4], |v| v.clamp_min(0.05));
    check_unary("add_scalar", random, &[5], |v| v.add_scalar(2.5));
    check_unary("mul_scalar", random, &[5], |v| v.mul_scalar(-1.5));
}

#[test]
fn elementwise_binary_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = positive(&mut rng, &[3, 4]);
        for (name, op) in [
            ("add", (|x, y| x.add(y)) as for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>),
            ("sub", |x, y| x.sub(y)),
            ("mul", |x, y| x.mul(y)),
            ("div", |x, y| x.div(y)),
        ] {
            let report =
                grad_check(|_, v| weighted_sum(op(v[0], v[1])?, 5), &[a.clone(), b.clone()], DEFAULT_EPS)
                    .unwrap();
            assert!(report.max_rel_error < PRIMITIVE_TOL, "{name}: {report:?}");
        }
    }
}

#[test]
fn scalar_broadcast_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 3]);
        let s = Tensor::scalar(rng.random_range(0.5..1.5));
        let report = grad_check(
            |_, v| {
                let prod = v[1].mul(v[0])?;
                let quot = prod.div(v[1])?.add(v[1])?;
                weighted_sum(quot.sub(v[0].mul(v[1])?)?, 1)
            },
            &[a, s],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < PRIMITIVE_TOL, "{report:?}");
    }
}

#[test]
fn mismatched_shapes_do_not_broadcast() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(a.add(b), Err(TensorError::Dimension { .. })));
    let one = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(a.mul(one), Err(TensorError::Dimension { .. })));
}

#[test]
fn matmul_and_transpose_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let report = grad_check(|_, v| weighted_sum(v[0].matmul(v[1])?, 2), &[a.clone(), b], DEFAULT_EPS)
            .unwrap();
        assert!(report.max_rel_error < PRIMITIVE_TOL, "matmul {report:?}");
        let report = grad_check(
            |_, v| weighted_sum(v[0].matmul(v[0].transpose()?)?, 2),
            &[a],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < PRIMITIVE_TOL, "gram {report:?}");
    }
}

#[test]
fn matmul_values() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2, 1], &[5.0, 6.0]).unwrap());
    assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);
    assert_eq!(a.transpose().unwrap().value().data(), &[1.0, 3.0, 2.0, 4.0]);
}

#[test]
fn reductions_gradients() {
    check_unary("sum_axis0", random, &[3, 4, 2], |v| v.sum_axis(0));
    check_unary("sum_axis1", random, &[3, 4, 2], |v| v.sum_axis(1));
    check_unary("mean_axis2", random, &[3, 4, 2], |v| v.mean_axis(2));
    check_unary("sum", random, &[3, 4], |v| v.sum());
    check_unary("mean", random, &[3, 4], |v| v.mean());
    check_unary("max_axis", random, &[3, 5, 2], |v| Ok(v.max_axis(1)?.0));
    check_unary("norm_l1", away_from_zero, &[3, 4], |v| v.norm_l1(1));
    check_unary("norm_l2", random, &[3, 4], |v| v.norm_l2(0));
    check_unary("log_softmax", random, &[3, 5], |v| v.log_softmax());
}

#[test]
fn reduction_values() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap());
    assert_eq!(x.sum_axis(0).unwrap().value().data(), &[5.0, 3.0, -3.0]);
    assert_eq!(x.mean_axis(1).unwrap().value().data(), &[2.0 / 3.0, 1.0]);
    assert_eq!(x.norm_l1(1).unwrap().value().data(), &[6.0, 15.0]);
    let (m, idx) = x.max_axis(1).unwrap();
    assert_eq!(m.value().data(), &[3.0, 5.0]);
    assert_eq!(idx, vec![2, 1]);
    let n = x.norm_l2(1).unwrap().value();
    assert!((n.data()[0] - 14f64.sqrt()).abs() < 1e-15);
}

#[test]
fn norm_l2_at_zero_has_zero_adjoint() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2, 3]));
    let grads = x.norm_l2(1).unwrap().sum().unwrap().backward().unwrap();
    assert!(grads.get(&x).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn shape_op_gradients() {
    check_unary("reshape", random, &[2, 6], |v| v.reshape(&[3, 4]));
    check_unary("broadcast", random, &[2, 1, 3], |v| v.broadcast_to(&[2, 4, 3]));
    check_unary("broadcast_scalar", random, &[], |v| v.broadcast_to(&[2, 2]));
    check_unary("select", random, &[3, 5], |v| v.select(1, &[4, 0, 4]));
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[2, 1]);
        let report = grad_check(|_, v| weighted_sum(concat(&[v[0], v[1], v[0]], 1)?, 3), &[a, b], DEFAULT_EPS)
            .unwrap();
        assert!(report.max_rel_error < PRIMITIVE_TOL, "concat {report:?}");

        let x = random(&mut rng, &[2, 3, 2, 2]);
        let bias = random(&mut rng, &[3]);
        let report = grad_check(|_, v| weighted_sum(v[0].add_channel_bias(v[1])?, 3), &[x, bias], DEFAULT_EPS)
            .unwrap();
        assert!(report.max_rel_error < PRIMITIVE_TOL, "bias {report:?}");
    }
}

#[test]
fn concat_and_select_values() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = concat(&[a, b], 1).unwrap();
    assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let r = concat(&[a, a], 0).unwrap();
    assert_eq!(r.shape(), vec![4, 1]);
    let s = c.select(0, &[1]).unwrap();
    assert_eq!(s.value().data(), &[2.0, 5.0, 6.0]);
    assert!(c.select(1, &[3]).is_err());
    assert!(concat(&[a, b], 0).is_err());
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[2, 3, 5, 5]);
    let k = random(&mut rng, &[4, 3, 3, 3]);
    fn loss_a<'t>(v: Var<'t, f64>, k: Var<'t, f64>) -> Result<Var<'t, f64>> {
        v.conv2d(k, 1, 1)?.channel_softmax()?.spatial_max()?.sum()
    }
    fn loss_b<'t>(v: Var<'t, f64>, k: Var<'t, f64>) -> Result<Var<'t, f64>> {
        v.conv2d(k, 2, 0)?.tanh()?.mean()
    }
    let grad_of = |which: u8| -> Vec<f64> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.param(k.clone());
        let loss = match which {
            0 => loss_a(xv, kv).unwrap(),
            1 => loss_b(xv, kv).unwrap(),
            _ => loss_a(xv, kv).unwrap().add(loss_b(xv, kv).unwrap()).unwrap(),
        };
        loss.backward().unwrap().get(&kv).unwrap().data().to_vec()
    };
    let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gs.len() {
        assert!((ga[i] + gb[i] - gs[i]).abs() < 1e-12);
    }
}

#[test]
fn replay_is_deterministic_and_visits_each_op_once() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let x = tape.param(random(&mut rng, &[1, 2, 4, 4]));
        let k = tape.param(random(&mut rng, &[3, 2, 3, 3]));
        let y = x.conv2d(k, 1, 1).unwrap().relu().unwrap();
        let z = y.channel_softmax().unwrap().spatial_max().unwrap();
        let loss = z.mul(z).unwrap().sum().unwrap();
        let ops = tape.len() - 2;
        let grads = loss.backward().unwrap();
        assert_eq!(grads.replayed_ops(), ops);
        (loss.item().unwrap().to_bits(), grads.get(&k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn clearing_the_tape_releases_nodes() {
    let mut tape = Tape::<f64>::new();
    {
        let x = tape.param(Tensor::zeros(&[4]));
        let _ = x.exp().unwrap().sum().unwrap();
    }
    assert_eq!(tape.len(), 3);
    tape.clear();
    assert!(tape.is_empty());
}

#[test]
fn non_finite_results_name_the_op() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
    assert_eq!(x.log().unwrap_err(), TensorError::NonFinite { op: "log" });
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<f64>::new();
    let w = tape.param(Tensor::full(&[2], 2.0));
    let c = tape.constant(Tensor::full(&[2], 3.0));
    let grads = w.mul(c).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(grads.len(), 1);
    assert!(grads.get(&c).is_none());
    assert_eq!(grads.get(&w).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn single_precision_matches_double_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[1, 3, 6, 6]);
    let k = random(&mut rng, &[2, 3, 3, 3]);
    let t64 = Tape::new();
    let y64 = t64.constant(x.clone()).conv2d(t64.constant(k.clone()), 1, 1).unwrap().value();
    let t32 = Tape::new();
    let y32 = t32
        .constant(x.cast::<f32>())
        .conv2d(t32.constant(k.cast::<f32>()), 1, 1)
        .unwrap()
        .value();
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}
