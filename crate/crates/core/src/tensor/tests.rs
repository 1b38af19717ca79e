use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::<f64>::param(vec![3], vec![1.0, -2.0, 5.5]).unwrap();
    let loss = sum(&x);
    let grads = backward(&loss).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_half_sum_of_squares_is_x() {
    let x = Tensor::<f64>::param(vec![2], vec![2.0, -3.0]).unwrap();
    let sq = mul(&x, &x).unwrap();
    let loss = scale(&sum(&sq), 0.5);
    let grads = backward(&loss).unwrap();
    let g = grads.get(&x).unwrap();
    assert_eq!(g.data(), &[2.0, -3.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]).unwrap();
    let y = add(&x, &x).unwrap();
    match backward(&y) {
        Err(Error::NonScalarLoss(_)) => {}
        other => panic!("expected NonScalarLoss, got {other:?}"),
    }
}

#[test]
fn backward_rejects_detached_graph() {
    let x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
    let loss = sum(&x); // x does not require grad: nothing recorded
    match backward(&loss) {
        Err(Error::DetachedGraph(_)) => {}
        other => panic!("expected DetachedGraph, got {other:?}"),
    }
}

#[test]
fn gradients_accumulate_across_fanout() {
    // loss = sum(x + x) => dloss/dx = 2
    let x = Tensor::<f64>::param(vec![2], vec![0.5, -1.0]).unwrap();
    let loss = sum(&add(&x, &x).unwrap());
    let grads = backward(&loss).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn backward_is_linear_in_the_loss() {
    // backward(a*f + b*g) == a*backward(f) + b*backward(g)
    let x = Tensor::<f64>::param(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
    let f = sum(&mul(&x, &x).unwrap());
    let g = sum(&x);
    let (a, b) = (2.5, -1.25);

    let combined = add(&scale(&f, a), &scale(&g, b)).unwrap();
    let gc = backward(&combined).unwrap();
    let gf = backward(&f).unwrap();
    let gg = backward(&g).unwrap();
    for i in 0..3 {
        let lhs = gc.get(&x).unwrap().data()[i];
        let rhs = a * gf.get(&x).unwrap().data()[i] + b * gg.get(&x).unwrap().data()[i];
        assert_close(lhs, rhs, 1e-12);
    }
}

#[test]
fn finite_diff_of_sum_is_ones() {
    let x = Tensor::<f64>::from_vec(vec![4], vec![0.1, 2.0, -3.0, 7.5]).unwrap();
    let grad = finite_diff_gradient(&|x| Ok(sum(x)), &x, 1e-3).unwrap();
    for g in grad.data() {
        assert_close(*g, 1.0, 1e-9);
    }
}

#[test]
fn finite_diff_of_square_at_three_is_six() {
    let x = Tensor::<f64>::from_vec(vec![1], vec![3.0]).unwrap();
    let grad = finite_diff_gradient(&|x| mul(x, x).map(|s| sum(&s)), &x, 1e-3).unwrap();
    assert_close(grad.data()[0], 6.0, 1e-5);
}

#[test]
fn finite_diff_reports_non_finite_probes() {
    let x = Tensor::<f64>::from_vec(vec![1], vec![0.0]).unwrap();
    let f = |t: &Tensor<f64>| {
        let v = t.data()[0];
        Ok(Tensor::scalar(1.0 / v))
    };
    // central probes at +-h are finite; use a function that produces inf
    let g = |t: &Tensor<f64>| {
        let v = t.data()[0];
        Ok(Tensor::scalar(if v > 0.0 { f64::INFINITY } else { v }))
    };
    assert!(finite_diff_gradient(&f, &x, 1e-3).is_ok());
    match finite_diff_gradient(&g, &x, 1e-3) {
        Err(Error::Numeric(_)) => {}
        other => panic!("expected Numeric error, got {other:?}"),
    }
}

#[test]
fn normalize_three_four_five() {
    let m = Tensor::<f64>::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let out = l2_normalize_rows(&m).unwrap();
    assert_close(out.data()[0], 0.6, 1e-12);
    assert_close(out.data()[1], 0.8, 1e-12);
}

#[test]
fn normalize_unit_row_is_identity() {
    let m = Tensor::<f64>::from_vec(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
    let out = l2_normalize_rows(&m).unwrap();
    assert_eq!(out.data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn normalize_zero_row_passes_through() {
    let m = Tensor::<f64>::from_vec(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
    let out = l2_normalize_rows(&m).unwrap();
    assert_eq!(&out.data()[..2], &[0.0, 0.0]);
    assert_close(out.data()[2], 0.6, 1e-12);
}

#[test]
fn normalize_gradient_matches_finite_differences() {
    let data = vec![0.4, -1.2, 0.9, 2.0, 0.3, -0.5];
    let x = Tensor::<f64>::param(vec![2, 3], data.clone()).unwrap();
    // project onto fixed coefficients so the loss mixes all coordinates
    let coeffs =
        Tensor::<f64>::from_vec(vec![2, 3], vec![0.7, -0.2, 0.5, 0.1, 0.9, -0.4]).unwrap();
    let loss = sum(&mul(&l2_normalize_rows(&x).unwrap(), &coeffs).unwrap());
    let grads = backward(&loss).unwrap();
    let analytic = grads.get(&x).unwrap();

    let xval = Tensor::<f64>::from_vec(vec![2, 3], data).unwrap();
    let fd = finite_diff_gradient(
        &|t| {
            let n = l2_normalize_rows(t)?;
            Ok(sum(&mul(&n, &coeffs)?))
        },
        &xval,
        1e-4,
    )
    .unwrap();
    for (a, b) in analytic.data().iter().zip(fd.data()) {
        assert_close(*a, *b, 1e-6);
    }
}

#[test]
fn scalar_item_and_shape_checks() {
    let t = Tensor::<f32>::scalar(4.25);
    assert_eq!(t.item().unwrap(), 4.25);
    assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_rows_have_unit_norm(rows in prop::collection::vec(
        prop::collection::vec(-10.0f64..10.0, 4), 1..6)
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let m = Tensor::<f64>::from_vec(vec![n, 4], flat).unwrap();
        let out = l2_normalize_rows(&m).unwrap();
        for i in 0..n {
            let row = &out.data()[i * 4..(i + 1) * 4];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let in_norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if in_norm >= 1e-12 {
                prop_assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones_for_any_shape(data in prop::collection::vec(-100.0f64..100.0, 1..32)) {
        let n = data.len();
        let x = Tensor::<f64>::param(vec![n], data).unwrap();
        let grads = backward(&sum(&x)).unwrap();
        prop_assert!(grads.get(&x).unwrap().data().iter().all(|g| *g == 1.0));
    }
}
