use super::gradcheck::{max_relative_error, standard_cases};
use super::*;
use crate::error::Error;
use proptest::prelude::*;

fn arr(shape: &[usize], data: &[f64]) -> Array {
    Array::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn every_primitive_matches_finite_differences() {
    for case in standard_cases(7) {
        let err = max_relative_error(&case).unwrap();
        assert!(err < 1e-4, "{}: rel err {err:e}", case.name);
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Array::zeros(&[3])).unwrap();
    let y = t.softmax(x).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn swish_at_zero() {
    let mut t = Tape::new();
    let x = t.constant(Array::scalar(0.0)).unwrap();
    let y = t.swish(x).unwrap();
    assert_eq!(t.value(y).data()[0], 0.0);
}

#[test]
fn group_norm_hand_values() {
    let mut t = Tape::new();
    let x = t.constant(arr(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let g = t.constant(Array::full(&[1], 1.0)).unwrap();
    let b = t.constant(Array::zeros(&[1])).unwrap();
    let y = t.group_norm(x, g, b, 1, 0.0).unwrap();
    // mean 2.5, population variance 1.25
    let s = 1.25f64.sqrt();
    let expect = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
    for (a, e) in t.value(y).data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-12);
    }
    assert!((expect[0] + 1.3416).abs() < 1e-4);
}

#[test]
fn group_norm_rejects_bad_group_count() {
    let mut t = Tape::new();
    let x = t.constant(Array::zeros(&[1, 2, 6])).unwrap();
    let g = t.constant(Array::zeros(&[6])).unwrap();
    let b = t.constant(Array::zeros(&[6])).unwrap();
    assert!(matches!(t.group_norm(x, g, b, 4, 1e-5), Err(Error::Config(_))));
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let mut t = Tape::new();
    let a = t.constant(Array::zeros(&[2, 3])).unwrap();
    let b = t.constant(Array::zeros(&[3, 2])).unwrap();
    assert!(matches!(t.add(a, b), Err(Error::Dimension(_))));
    let w = t.constant(Array::zeros(&[2, 2])).unwrap();
    assert!(matches!(t.matmul(a, w), Err(Error::Dimension(_))));
}

#[test]
fn sum_and_square_gradients() {
    let mut t = Tape::new();
    let w = t.param(arr(&[2], &[1.0, 2.0])).unwrap();
    let s = t.sum(w).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(w).unwrap().data(), &[1.0, 1.0]);

    let mut t = Tape::new();
    let w = t.param(arr(&[2], &[1.0, 2.0])).unwrap();
    let sq = t.mul(w, w).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn gradient_of_constant_is_contract_error() {
    let mut t = Tape::new();
    let c = t.constant(Array::scalar(1.0)).unwrap();
    let w = t.param(Array::scalar(2.0)).unwrap();
    let p = t.mul(c, w).unwrap();
    let g = t.backward(p).unwrap();
    assert!(matches!(g.wrt(c), Err(Error::Contract(_))));
    assert!(matches!(g.wrt(p), Err(Error::Contract(_))));
    assert_eq!(g.wrt(w).unwrap().data(), &[1.0]);
}

#[test]
fn backward_needs_scalar() {
    let mut t = Tape::new();
    let w = t.param(Array::zeros(&[3])).unwrap();
    assert!(matches!(t.backward(w), Err(Error::Contract(_))));
}

#[test]
fn nonfinite_results_are_rejected() {
    let mut t = Tape::new();
    let w = t.param(Array::scalar(1e300)).unwrap();
    assert!(matches!(t.mul(w, w), Err(Error::Divergence(_))));
}

#[test]
fn conv_then_transpose_restores_length() {
    for len in [2usize, 4, 8, 16, 32] {
        let mut t = Tape::new();
        let x = t.constant(Array::zeros(&[1, len, 2])).unwrap();
        let w = t.constant(Array::zeros(&[2, 2, 3])).unwrap();
        let b = t.constant(Array::zeros(&[2])).unwrap();
        let d = t.conv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(t.value(d).shape()[1], len / 2);
        let u = t.conv_transpose1d(d, w, b, 2, 1, 1).unwrap();
        assert_eq!(t.value(u).shape()[1], len);
    }
}

#[test]
fn conv1d_hand_example() {
    // single channel, kernel [1, 2, 3], stride 1, pad 1
    let mut t = Tape::new();
    let x = t.constant(arr(&[1, 3, 1], &[1.0, 2.0, 3.0])).unwrap();
    let w = t.constant(arr(&[1, 1, 3], &[1.0, 2.0, 3.0])).unwrap();
    let b = t.constant(arr(&[1], &[0.5])).unwrap();
    let y = t.conv1d(x, w, b, 1, 1).unwrap();
    // y0 = 0*1 + 1*2 + 2*3, y1 = 1+4+9, y2 = 2+6+0
    assert_eq!(t.value(y).data(), &[8.5, 14.5, 8.5]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, convT(y)> with zero bias and matching geometry
    let xs = arr(&[1, 8, 2], &(0..16).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
    let ys = arr(&[1, 4, 3], &(0..12).map(|i| (i as f64 * 0.91).cos()).collect::<Vec<_>>());
    let wv = arr(&[3, 2, 3], &(0..18).map(|i| (i as f64 * 0.53).sin()).collect::<Vec<_>>());
    // transposed weight layout [Cin=3, Cout=2, K]
    let mut t = Tape::new();
    let x = t.constant(xs.clone()).unwrap();
    let y = t.constant(ys.clone()).unwrap();
    let w = t.constant(wv.clone()).unwrap();
    let b3 = t.constant(Array::zeros(&[3])).unwrap();
    let b2 = t.constant(Array::zeros(&[2])).unwrap();
    let cx = t.conv1d(x, w, b3, 2, 1).unwrap();
    let ty = t.conv_transpose1d(y, w, b2, 2, 1, 1).unwrap();
    let lhs: f64 = t.value(cx).data().iter().zip(ys.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = t.value(ty).data().iter().zip(xs.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let n = v.len();
        let mut t = Tape::new();
        let x = t.constant(Array::new(vec![1, n], v).unwrap()).unwrap();
        let y = t.softmax(x).unwrap();
        let s: f64 = t.value(y).data().iter().sum();
        prop_assert!(t.value(y).data().iter().all(|&p| p >= 0.0));
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_norm_standardizes(v in prop::collection::vec(-5.0f64..5.0, 8), groups in prop::sample::select(vec![1usize, 2])) {
        prop_assume!(v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-3);
        let mut t = Tape::new();
        let x = t.constant(Array::new(vec![1, 2, 4], v).unwrap()).unwrap();
        let g = t.constant(Array::full(&[4], 1.0)).unwrap();
        let b = t.constant(Array::zeros(&[4])).unwrap();
        let y = t.group_norm(x, g, b, groups, 0.0).unwrap();
        let d = t.value(y).data();
        let cg = 4 / groups;
        for grp in 0..groups {
            let vals: Vec<f64> = (0..2).flat_map(|l| (grp * cg..(grp + 1) * cg).map(move |c| (l, c))).map(|(l, c)| d[l * 4 + c]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assume!(var > 0.0);
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }
}
