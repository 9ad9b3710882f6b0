use camorect_autograd::fd::{central_difference, relative_error};
use camorect_autograd::Tensor;
use proptest::prelude::*;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn shape_and_values() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n = shape.iter().product();
        (Just(shape), values(n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn narrow_then_concat_is_identity((shape, v) in shape_and_values(), cut in 0usize..5) {
        let t = Tensor::from_vec(v, &shape).unwrap();
        let axis = shape.len() - 1;
        let cut = cut.min(shape[axis]);
        let parts: Vec<Tensor> = [(0, cut), (cut, shape[axis] - cut)]
            .iter()
            .filter(|(_, len)| *len > 0)
            .map(|&(start, len)| t.narrow(axis, start, len).unwrap())
            .collect();
        let back = Tensor::concat(&parts, axis).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn softmax_rows_are_distributions((shape, v) in shape_and_values()) {
        let s = Tensor::from_vec(v, &shape).unwrap().softmax_last().unwrap();
        let last = *shape.last().unwrap();
        for row in s.data().chunks(last) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_twice_is_identity(v in values(24)) {
        let t = Tensor::from_vec(v, &[2, 3, 4]).unwrap();
        let back = t.transpose(0, 2).unwrap().transpose(0, 2).unwrap();
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn sum_axis_preserves_the_total((shape, v) in shape_and_values(), axis in 0usize..3) {
        let t = Tensor::from_vec(v, &shape).unwrap();
        let axis = axis % shape.len();
        let total: f64 = t.data().iter().sum();
        let reduced: f64 = t.sum_axis(axis).unwrap().data().iter().sum();
        prop_assert!((total - reduced).abs() < 1e-9);
    }

    #[test]
    fn conv_gradient_matches_finite_differences(x0 in values(2 * 5 * 5), w0 in values(3 * 2 * 3 * 3), stride in 1usize..3) {
        let x = Tensor::from_vec(x0, &[1, 2, 5, 5]).unwrap();
        let f = |w: &Tensor| x.conv2d(w, stride, 1).unwrap().sqr().sum_all();
        let w = Tensor::variable(w0.clone(), &[3, 2, 3, 3]).unwrap();
        let analytic = f(&w).backward().unwrap().get(&w).unwrap().to_vec();
        let numeric = central_difference(
            |v| f(&Tensor::from_slice(v, &[3, 2, 3, 3]).unwrap()).item().unwrap(),
            &w0,
            1e-5,
        );
        prop_assert!(relative_error(&analytic, &numeric) < 1e-6);
    }
}
