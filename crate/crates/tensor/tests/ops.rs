use demp_tensor::{grad_check, Tape, Tensor, TensorError};

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity_cases() {
    let t = Tape::new();
    let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let i = t.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    assert_eq!(a.matmul(&i).unwrap().values(), vec![1.0, 2.0, 3.0, 4.0]);

    let col = t.constant(vec![5.0, 7.0], &[2, 1]).unwrap();
    let out = i.matmul(&col).unwrap();
    assert_eq!(out.shape(), vec![2, 1]);
    assert_eq!(out.values(), vec![5.0, 7.0]);
}

#[test]
fn matmul_grad_of_sum_is_broadcast_column() {
    let t = Tape::new();
    let a = t.leaf(vec![0.3, -1.0, 2.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
    let b = t.constant(vec![1.0, 1.0], &[2, 1]).unwrap();
    a.matmul(&b).unwrap().sum().backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let t = Tape::new();
    let a = t.zeros(&[2, 3]);
    let b = t.zeros(&[2, 3]);
    match a.matmul(&b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(a.matmul_t(&b).is_ok());
}

#[test]
fn softmax_examples() {
    let t = Tape::new();
    let x = t.constant(vec![0.0, 0.0], &[2]).unwrap();
    close(&x.softmax(0).unwrap().values(), &[0.5, 0.5], 1e-15);

    let big = t.constant(vec![1000.0, 1000.0], &[2]).unwrap();
    close(&big.softmax(0).unwrap().values(), &[0.5, 0.5], 1e-15);

    let logs = t
        .constant(vec![1f64.ln(), 2f64.ln(), 3f64.ln()], &[3])
        .unwrap();
    close(&logs.softmax(0).unwrap().values(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15);
}

#[test]
fn softmax_rejects_nan_and_bad_axis() {
    let t = Tape::new();
    let x = t.constant(vec![0.0, f64::NAN], &[2]).unwrap();
    assert!(matches!(x.softmax(0), Err(TensorError::NonFinite(_))));
    let y = t.zeros(&[2, 2]);
    assert!(matches!(y.softmax(2), Err(TensorError::Axis { .. })));
}

#[test]
fn softmax_along_leading_axis() {
    let t = Tape::new();
    let x = t.constant(vec![0.0, 1.0, 0.0, 1.0], &[2, 2]).unwrap();
    let s = x.softmax(0).unwrap().values();
    close(&s, &[0.5, 0.5, 0.5, 0.5], 1e-15);
}

#[test]
fn layer_norm_examples() {
    let t = Tape::new();
    let g = t.constant(vec![1.0; 3], &[3]).unwrap();
    let b = t.constant(vec![0.0; 3], &[3]).unwrap();
    let c = t.constant(vec![2.5; 3], &[1, 3]).unwrap();
    assert_eq!(c.layer_norm(&g, &b, 1e-5).unwrap().values(), vec![0.0; 3]);

    let g2 = t.constant(vec![1.0; 2], &[2]).unwrap();
    let b2 = t.constant(vec![0.0; 2], &[2]).unwrap();
    let x = t.constant(vec![-1.0, 1.0], &[1, 2]).unwrap();
    close(&x.layer_norm(&g2, &b2, 1e-300).unwrap().values(), &[-1.0, 1.0], 1e-12);

    assert!(matches!(
        x.layer_norm(&g, &b, 1e-5),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn embedding_examples() {
    let t = Tape::new();
    let table = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
    assert_eq!(table.embedding(&[0]).unwrap().values(), vec![1.0, 2.0]);

    let twice = table.embedding(&[2, 2]).unwrap();
    assert_eq!(twice.values(), vec![5.0, 6.0, 5.0, 6.0]);
    twice.sum().backward().unwrap();
    assert_eq!(table.grad().unwrap(), vec![0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);

    let t2 = Tape::new();
    let ab = t2.constant(vec![10.0, 20.0], &[2, 1]).unwrap();
    assert_eq!(ab.embedding(&[1, 0]).unwrap().values(), vec![20.0, 10.0]);

    match ab.embedding(&[2]) {
        Err(TensorError::Index { index, .. }) => assert_eq!(index, 2),
        other => panic!("expected index error, got {other:?}"),
    }
}

#[test]
fn cross_entropy_examples() {
    let t = Tape::new();
    let uniform = t.constant(vec![0.3; 4], &[1, 4]).unwrap();
    let l = uniform.cross_entropy(&[2], None).unwrap().item();
    assert!((l - 4f64.ln()).abs() < 1e-12);

    let peaked = t.constant(vec![0.0, 1e3, 0.0], &[1, 3]).unwrap();
    assert!(peaked.cross_entropy(&[1], None).unwrap().item().abs() < 1e-12);

    let logs = t
        .constant(vec![1f64.ln(), 2f64.ln(), 3f64.ln()], &[1, 3])
        .unwrap();
    let l = logs.cross_entropy(&[2], None).unwrap().item();
    assert!((l - 0.5f64.ln().abs()).abs() < 1e-12);
}

#[test]
fn cross_entropy_ignore_index() {
    let t = Tape::new();
    let x = t
        .leaf(vec![0.1, 0.2, 0.3, 2.0, -1.0, 0.5], &[2, 3])
        .unwrap();
    let only_first = x.cross_entropy(&[1, 0], Some(0)).unwrap().item();
    let row = t.constant(vec![0.1, 0.2, 0.3], &[1, 3]).unwrap();
    let direct = row.cross_entropy(&[1], None).unwrap().item();
    assert!((only_first - direct).abs() < 1e-15);
    assert_eq!(x.cross_entropy(&[0, 0], Some(0)).unwrap_err(), TensorError::EmptyLoss);
}

#[test]
fn backward_examples() {
    let t = Tape::new();
    let x = t.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let loss = x.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    assert_eq!(loss.grad().unwrap(), vec![1.0]);

    // Second sweep accumulates.
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, 8.0, 12.0]);

    let t2 = Tape::new();
    let y = t2.leaf(vec![1.0, 2.0], &[2]).unwrap();
    let c = t2.scalar(3.0);
    c.backward().unwrap();
    assert_eq!(y.grad_or_zeros(), vec![0.0, 0.0]);

    assert!(matches!(y.backward(), Err(TensorError::NotScalar(_))));
}

#[test]
fn tensors_from_different_tapes_do_not_mix() {
    let a = Tape::new().zeros(&[2]);
    let b = Tape::new().zeros(&[2]);
    assert_eq!(a.add(&b).unwrap_err(), TensorError::TapeMismatch);
}

#[test]
fn grad_check_examples() {
    // Dyadic inputs and a power-of-two step keep every float operation exact.
    let dyadic = [0.25, -0.75, 1.5, 2.0];
    let r = grad_check(|x: &Tensor| Ok(x.sum()), &dyadic, &[4], 2f64.powi(-16), 0.0).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    assert_eq!(r.analytic, r.numeric);

    let x = [0.3, -0.7, 1.1, 2.0];
    let r = grad_check(|x: &Tensor| Ok(x.sum()), &x, &[4], 1e-5, 1e-9).unwrap();
    assert!(r.passed, "{r:?}");

    let logits = [0.4, -1.2, 0.8, 0.05, 2.0, -0.3];
    let r = grad_check(|x: &Tensor| x.cross_entropy(&[2, 0], None), &logits, &[2, 3], 1e-5, 1e-5).unwrap();
    assert!(r.passed, "{r:?}");

    let r = grad_check(|x: &Tensor| Ok(x.detach().mul(&x.detach())?.sum()), &x, &[4], 1e-5, 1e-5).unwrap();
    assert_eq!(r.analytic, vec![0.0; 4]);
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let r = grad_check(|x: &Tensor| Ok(x.ln().sum()), &[-1.0], &[1], 1e-5, 1e-5);
    assert!(matches!(r, Err(TensorError::NonFinite(_))));
}

#[test]
fn invalid_shapes_are_rejected() {
    let t = Tape::new();
    assert!(matches!(t.leaf(vec![1.0; 5], &[2, 3]), Err(TensorError::InvalidShape { .. })));
    assert!(matches!(t.leaf(vec![], &[0]), Err(TensorError::InvalidShape { .. })));
}
