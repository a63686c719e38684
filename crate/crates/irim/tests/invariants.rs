//! Property-based invariants over randomized shapes and parameters.

use irim::layers::AdditiveCoupling;
use irim::numerics::{conv2d, conv2d_transpose};
use irim::rng::SeededRng;
use ndarray::{Array3, Array4};
use proptest::prelude::*;

fn random4(rng: &mut SeededRng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(dim, || rng.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// <conv(x, k), y> == <x, conv_transpose(y, k)> for any feasible geometry.
    #[test]
    fn conv_transpose_is_the_exact_adjoint(
        seed in 0u64..1_000_000,
        ci in 1usize..4,
        co in 1usize..4,
        k in 1usize..4,
        stride in 1usize..3,
        extra in 0usize..4,
    ) {
        let pad = k - 1;
        let h = k + stride * (1 + extra);
        let w = k + stride * (2 + extra);
        let mut rng = SeededRng::new(seed);
        let x = random4(&mut rng, (1, ci, h, w));
        let kernel = random4(&mut rng, (co, ci, k, k));
        let ax = conv2d(&x.view(), &kernel.view(), stride, pad).unwrap();
        let y = random4(&mut rng, ax.dim());
        let aty = conv2d_transpose(&y.view(), &kernel.view(), stride, pad).unwrap();
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    /// inverse(forward(x)) recovers x for any random coupling parameters.
    #[test]
    fn additive_coupling_round_trips(
        seed in 0u64..1_000_000,
        split_ix in 0usize..3,
        down_ix in 0usize..2,
    ) {
        let channels = 8;
        let split = [2, 4, 6][split_ix];
        let down = [1, 2][down_ix];
        let mut rng = SeededRng::new(seed);
        let layer = AdditiveCoupling::init(channels, split, 3, down, 4, &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((channels, 8, 8), || rng.normal());
        let y = layer.forward(&x.view()).unwrap();
        let back = layer.inverse(&y.view()).unwrap();
        let err = back
            .iter()
            .zip(x.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(err <= 1e-10, "round trip error {err}");
    }
}
