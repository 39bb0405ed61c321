use proptest::prelude::*;
use protoep::numerics::{grad_check, BinaryKind, NumArray, NumericsError, ReduceKind, Tape, UnaryKind, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> NumArray {
    let n = shape.iter().product();
    NumArray::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> NumArray {
    let n = shape.iter().product();
    NumArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.05..0.2)).collect()).unwrap()
}

/// Contracts an arbitrary output with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn weighted_sum(t: &mut Tape, out: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, t.value(out).shape(), 1.0);
    let w = t.constant(w);
    let p = t.mul(out, w)?;
    t.sum(p)
}

fn check(params: Vec<NumArray>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>) -> f64 {
    let report = grad_check(
        |t, v| {
            let out = f(t, v)?;
            weighted_sum(t, out, 99)
        },
        &params,
        1e-5,
    )
    .unwrap();
    report.max_relative_error
}

#[test]
fn matmul_identity_and_orthogonal() {
    let mut t = Tape::new();
    let i2 = t.constant(NumArray::identity(2));
    let m = t.constant(NumArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p).values(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(NumArray::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let b = t.constant(NumArray::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
    let p = t.matmul(a, b).unwrap();
    assert_eq!(t.value(p).shape(), &[1, 1]);
    assert_eq!(t.value(p).values(), &[0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(NumArray::zeros(&[2, 3]));
    let b = t.constant(NumArray::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        NumericsError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] and [2, 3]"));
}

#[test]
fn matmul_gradient_of_sum_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    let mut t = Tape::new();
    let (va, vb) = (t.param(a.clone()), t.constant(b.clone()));
    let p = t.matmul(va, vb).unwrap();
    let s = t.sum(p).unwrap();
    let g = t.backward(s).unwrap();
    let ga = g.get(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected = b.at(k, 0) + b.at(k, 1);
            assert!((ga.at(i, k) - expected).abs() < 1e-14);
        }
    }
    let err = grad_check::<_, NumericsError>(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            t.sum(p)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err.max_relative_error <= 1e-6, "{err:?}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(NumArray::vector(vec![0.0, 0.0]));
    let s = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(s).values(), &[0.5, 0.5]);

    let x = t.constant(NumArray::vector(vec![0.0, -4.0]));
    let s = t.softmax(x, 0).unwrap();
    // e^0 / (e^0 + e^-4)
    let p0 = 1.0 / (1.0 + (-4.0f64).exp());
    assert!((t.value(s).values()[0] - p0).abs() < 1e-15);
    assert!((t.value(s).values()[0] - 0.98201).abs() < 1e-5);
    assert!((t.value(s).values()[1] - 0.01799).abs() < 1e-5);

    let x = t.constant(NumArray::vector(vec![1000.0, 0.0]));
    let s = t.softmax(x, 0).unwrap();
    let v = t.value(s).values();
    assert!(v.iter().all(|x| x.is_finite()));
    assert_eq!(v[0], 1.0);
    assert!(v[1] < 1e-300);
}

#[test]
fn elementwise_and_reduce_examples() {
    let mut t = Tape::new();
    let z = t.constant(NumArray::vector(vec![0.0]));
    let th = t.tanh(z).unwrap();
    assert_eq!(t.value(th).values(), &[0.0]);

    let a = t.constant(NumArray::vector(vec![1.0, -1.0]));
    let b = t.constant(NumArray::vector(vec![1.0, 1.0]));
    let p = t.mul(a, b).unwrap();
    let th = t.tanh(p).unwrap();
    let s = t.sum(th).unwrap();
    assert_eq!(t.value(s).item(), 0.0);

    let m = t.constant(NumArray::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap());
    let mean = t.reduce(m, Some(0), ReduceKind::Mean).unwrap();
    assert_eq!(t.value(mean).values(), &[3.0, 5.0]);
    assert_eq!(t.value(mean).shape(), &[2]);
}

#[test]
fn binary_shape_mismatch_and_log_domain() {
    let mut t = Tape::new();
    let a = t.constant(NumArray::zeros(&[2, 3]));
    let b = t.constant(NumArray::zeros(&[2]));
    assert!(matches!(
        t.elementwise(a, b, BinaryKind::Add),
        Err(NumericsError::ShapeMismatch { .. })
    ));
    let x = t.constant(NumArray::vector(vec![1.0, 0.0]));
    assert!(matches!(t.log(x), Err(NumericsError::Domain { op: "log", .. })));
    let x = t.constant(NumArray::vector(vec![-2.0]));
    assert!(matches!(t.unary(x, UnaryKind::Log), Err(NumericsError::Domain { .. })));
}

#[test]
fn broadcasting_row_vector_and_scalar() {
    let mut t = Tape::new();
    let m = t.constant(NumArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let r = t.constant(NumArray::vector(vec![10.0, 20.0]));
    let s = t.add(m, r).unwrap();
    assert_eq!(t.value(s).values(), &[11.0, 22.0, 13.0, 24.0]);
    let c = t.constant(NumArray::scalar(2.0));
    let d = t.mul(m, c).unwrap();
    assert_eq!(t.value(d).values(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn l2_normalize_examples() {
    let mut t = Tape::new();
    let x = t.constant(NumArray::vector(vec![3.0, 4.0]));
    let n = t.l2_normalize(x).unwrap();
    let v = t.value(n).values();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

    let tiny = t.constant(NumArray::vector(vec![0.0, 1e-15]));
    assert!(matches!(t.l2_normalize(tiny), Err(NumericsError::Degenerate { .. })));
}

#[test]
fn sq_euclidean_examples() {
    let mut t = Tape::new();
    let a = t.constant(NumArray::vector(vec![1.5, -2.0]));
    let d = t.sq_euclidean(a, a).unwrap();
    assert_eq!(t.value(d).item(), 0.0);
    let a = t.constant(NumArray::vector(vec![0.0, 0.0]));
    let b = t.constant(NumArray::vector(vec![2.0, 0.0]));
    let d = t.sq_euclidean(a, b).unwrap();
    assert_eq!(t.value(d).item(), 4.0);
    let c = t.constant(NumArray::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(t.sq_euclidean(a, c), Err(NumericsError::ShapeMismatch { .. })));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[5], 1.0);
    let b = random(&mut rng, &[5], 1.0);
    let mut t = Tape::new();
    let (va, vb) = (t.param(a.clone()), t.constant(b.clone()));
    let d = t.sq_euclidean(va, vb).unwrap();
    let g = t.backward(d).unwrap();
    for k in 0..5 {
        let closed = 2.0 * (a.values()[k] - b.values()[k]);
        assert!((g.get(va).unwrap().values()[k] - closed).abs() < 1e-14);
    }
    let report = grad_check::<_, NumericsError>(|t, v| t.sq_euclidean(v[0], v[1]), &[a, b], 1e-5).unwrap();
    assert!(report.max_relative_error <= 1e-6);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(NumArray::scalar(3.0));
    let y = t.square(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);

    let mut t = Tape::new();
    let x = t.param(NumArray::vector(vec![0.3, -1.0, 2.0]));
    let s = t.softmax(x, 0).unwrap();
    let total = t.sum(s).unwrap();
    let g = t.backward(total).unwrap();
    assert!(g.get(x).unwrap().values().iter().all(|v| v.abs() < 1e-15));

    let err = t.backward(s).unwrap_err();
    assert_eq!(err, NumericsError::NonScalarLoss { shape: vec![3] });
}

#[test]
fn every_operation_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let tol = 1e-6;
    let scale = 0.1;

    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul, BinaryKind::Div] {
        let a = random(&mut rng, &[3, 4], scale);
        let b = positive(&mut rng, &[4]);
        let err = check(vec![a, b], |t, v| t.elementwise(v[0], v[1], kind));
        assert!(err <= tol, "{kind:?} broadcast: {err}");
        let a = random(&mut rng, &[2, 1, 3], scale);
        let b = positive(&mut rng, &[1, 4, 3]);
        let err = check(vec![a, b], |t, v| t.elementwise(v[0], v[1], kind));
        assert!(err <= tol, "{kind:?} two-sided broadcast: {err}");
    }
    for kind in [
        UnaryKind::Tanh,
        UnaryKind::Exp,
        UnaryKind::Log,
        UnaryKind::Neg,
        UnaryKind::Square,
        UnaryKind::Relu,
        UnaryKind::Sigmoid,
        UnaryKind::Scale(-1.7),
        UnaryKind::Shift(0.4),
    ] {
        let a = if kind == UnaryKind::Log {
            positive(&mut rng, &[3, 3])
        } else {
            random(&mut rng, &[3, 3], scale)
        };
        let err = check(vec![a], |t, v| t.unary(v[0], kind));
        assert!(err <= tol, "{kind:?}: {err}");
    }
    for kind in [ReduceKind::Sum, ReduceKind::Mean] {
        for axis in [None, Some(0), Some(1), Some(2)] {
            let a = random(&mut rng, &[2, 3, 4], scale);
            let err = check(vec![a], |t, v| t.reduce(v[0], axis, kind));
            assert!(err <= tol, "{kind:?} {axis:?}: {err}");
        }
    }
    for axis in 0..3 {
        let a = random(&mut rng, &[2, 3, 4], scale);
        let err = check(vec![a.clone()], |t, v| t.softmax(v[0], axis));
        assert!(err <= tol, "softmax axis {axis}: {err}");
        let err = check(vec![a], |t, v| t.log_softmax(v[0], axis));
        assert!(err <= tol, "log_softmax axis {axis}: {err}");
    }
    let a = random(&mut rng, &[3, 5], scale);
    let b = random(&mut rng, &[5, 2], scale);
    let err = check(vec![a, b], |t, v| t.matmul(v[0], v[1]));
    assert!(err <= tol, "matmul: {err}");
    let a = random(&mut rng, &[3, 5], scale);
    let err = check(vec![a.clone()], |t, v| t.transpose(v[0]));
    assert!(err <= tol, "transpose: {err}");
    let err = check(vec![a.clone()], |t, v| t.reshape(v[0], &[5, 3]));
    assert!(err <= tol, "reshape: {err}");
    let err = check(vec![a.clone()], |t, v| t.l2_normalize(v[0]));
    assert!(err <= tol, "l2_normalize: {err}");
    let err = check(vec![a.clone()], |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]));
    assert!(err <= tol, "gather_rows: {err}");
    let b = random(&mut rng, &[3, 2], scale);
    let err = check(vec![a.clone(), b], |t, v| t.concat(&[v[0], v[1]], 1));
    assert!(err <= tol, "concat cols: {err}");
    let b = random(&mut rng, &[1, 5], scale);
    let err = check(vec![a, b], |t, v| t.concat(&[v[1], v[0]], 0));
    assert!(err <= tol, "concat rows: {err}");

    // two sequences of length 4 with true lengths 4 and 2, 3 channels
    let x = random(&mut rng, &[8, 3], scale);
    let err = check(vec![x.clone()], |t, v| t.unfold(v[0], 4, 3, &[4, 2]));
    assert!(err <= tol, "unfold: {err}");
    let err = check(vec![x], |t, v| t.masked_max_pool(v[0], 4, &[4, 2]));
    assert!(err <= tol, "masked_max_pool: {err}");
}

#[test]
fn unfold_zero_pads_outside_true_length() {
    let mut t = Tape::new();
    let x = t.constant(NumArray::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let u = t.unfold(x, 3, 3, &[2]).unwrap();
    assert_eq!(t.value(u).values(), &[0.0, 1.0, 2.0, 1.0, 2.0, 0.0, 2.0, 0.0, 0.0]);
    let p = t.masked_max_pool(x, 3, &[2]).unwrap();
    assert_eq!(t.value(p).values(), &[2.0]);
    assert!(t.masked_max_pool(x, 3, &[0]).is_err());
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random(&mut rng, &[4, 3], 0.5);
    let (alpha, beta) = (0.7, -2.3);
    let f = |t: &mut Tape, x: Var| -> Var {
        let s = t.softmax(x, 1).unwrap();
        let l = t.log_softmax(x, 0).unwrap();
        let m = t.mul(s, l).unwrap();
        t.sum(m).unwrap()
    };
    let g = |t: &mut Tape, x: Var| -> Var {
        let th = t.tanh(x).unwrap();
        let sq = t.square(th).unwrap();
        t.mean(sq).unwrap()
    };
    let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Var| {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let out = build(&mut t, x);
        t.backward(out).unwrap().get(x).unwrap().clone()
    };
    let gf = grad_of(&|t, x| f(t, x));
    let gg = grad_of(&|t, x| g(t, x));
    let combined = grad_of(&|t, x| {
        let a = f(t, x);
        let b = g(t, x);
        let a = t.scale(a, alpha).unwrap();
        let b = t.scale(b, beta).unwrap();
        t.add(a, b).unwrap()
    });
    for k in 0..x0.numel() {
        let expected = alpha * gf.values()[k] + beta * gg.values()[k];
        assert!((combined.values()[k] - expected).abs() <= 1e-9);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, &[6, 5], 1.0);
        let b = random(&mut rng, &[5, 4], 1.0);
        let mut t = Tape::new();
        let (va, vb) = (t.param(a), t.param(b));
        let p = t.matmul(va, vb).unwrap();
        let s = t.log_softmax(p, 1).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        (
            t.value(l).item().to_bits(),
            g.get(va)
                .unwrap()
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            g.get(vb)
                .unwrap()
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        let n = values.len();
        let mut t = Tape::new();
        let x = t.constant(NumArray::vector(values));
        let s = t.softmax(x, 0).unwrap();
        let v = t.value(s).values();
        prop_assert!(v.iter().all(|p| *p >= 0.0 && p.is_finite()));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(v.len(), n);
    }

    #[test]
    fn l2_normalize_gives_unit_norm(values in prop::collection::vec(-100f64..100.0, 1..30)) {
        prop_assume!(values.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-6);
        let mut t = Tape::new();
        let x = t.constant(NumArray::vector(values));
        let n = t.l2_normalize(x).unwrap();
        prop_assert!((t.value(n).sq_norm().sqrt() - 1.0).abs() <= 1e-9);
    }
}
