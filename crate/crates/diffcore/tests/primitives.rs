use diffcore::{DiffError, Primitive, Tape, Tensor, Unary};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut tape = Tape::<f64>::strict();
    let x = tape.constant(Tensor::zeros([1, 3]));
    let y = tape.softmax(x, 1).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul_returns_operand() {
    let mut tape = Tape::<f64>::strict();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]));
    let out = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(out), tape.value(a));
}

#[test]
fn sigmoid_value_and_slope_at_zero() {
    let mut tape = Tape::<f64>::strict();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.5);
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.wrt(x).item(), 0.25);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_fn([2, 3, 4], |i| i as f64 * 0.1));
    let loss = tape.sum_all(x).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.wrt(x).data().iter().all(|&g| g == 1.0));
}

#[test]
fn squared_norm_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 5.0, -4.0]));
    let y = tape.softmax(x, 1).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.wrt(x).data().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let unused = tape.param(t(&[2], &[4.0, 5.0]));
    let loss = tape.sum_all(x).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(DiffError::NotScalar { .. })));
    let loss = tape.sum_all(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.backward(loss).err(), Some(DiffError::TapeConsumed));
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    match tape.matmul(a, b) {
        Err(DiffError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
    }
    let c = tape.constant(Tensor::zeros([4]));
    assert!(matches!(tape.add(a, c), Err(DiffError::ShapeMismatch { op: "add", .. })));
    assert!(matches!(tape.sum(a, 2, false), Err(DiffError::InvalidAxis { .. })));
}

#[test]
fn strict_mode_rejects_nan() {
    let mut strict = Tape::<f64>::strict();
    let x = strict.constant(t(&[2], &[1.0, f64::NAN]));
    assert_eq!(strict.tanh(x).err(), Some(DiffError::NonFinite { op: "tanh" }));

    let mut lax = Tape::<f64>::new();
    let x = lax.constant(t(&[2], &[1.0, f64::NAN]));
    assert!(lax.tanh(x).is_ok());
}

#[test]
fn apply_dispatches_catalog() {
    let mut tape = Tape::<f64>::strict();
    let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.apply(&Primitive::Transpose, &[x]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 3.0, 2.0, 4.0]);
    let z = tape.apply(&Primitive::Unary(Unary::Neg), &[y]).unwrap();
    assert_eq!(tape.value(z).data(), &[-1.0, -3.0, -2.0, -4.0]);
    let s = tape.apply(&Primitive::Sum { axis: 0, keepdim: false }, &[x]).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    let a = tape.scalar(0.5);
    let b = tape.scalar(2.0);
    let m = tape.apply(&Primitive::MaxScalars, &[a, b]).unwrap();
    assert_eq!(tape.value(m).item(), 2.0);
    assert!(tape.apply(&Primitive::MatMul, &[x]).is_err());
}

#[test]
fn concat_and_narrow_are_inverse() {
    let mut tape = Tape::<f64>::strict();
    let a = tape.constant(Tensor::from_fn([2, 2, 3], |i| i as f64));
    let b = tape.constant(Tensor::from_fn([2, 1, 3], |i| 100.0 + i as f64));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 3]);
    let back = tape.narrow(c, 1, 0, 2).unwrap();
    assert_eq!(tape.value(back), tape.value(a));
    let tail = tape.narrow(c, 1, 2, 1).unwrap();
    assert_eq!(tape.value(tail), tape.value(b));
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut tape = Tape::<f64>::strict();
    let x = tape.constant(Tensor::from_fn([3, 8], |i| ((i * 7919) % 13) as f64 - 4.0));
    let y = tape.layer_norm(x, 1e-5).unwrap();
    for row in tape.value(y).data().chunks(8) {
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn single_precision_tape_runs() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new([2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.matmul(x, x).unwrap();
    assert_eq!(tape.value(y).data(), &[7.0, 10.0, 15.0, 22.0]);
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).shape(), &[2, 2]);
}
