//! Finite-difference check of the analytic gradient.

mod common;

use common::{worst_gradient_error, FD_REL_TOL};
use fedsa_core::nn::{Activation, NetworkSpec};

#[test]
fn default_architecture_gradient_matches_finite_differences() {
    let (worst, checked) = worst_gradient_error(&NetworkSpec::new(10, 2), 3, 20);
    assert_eq!(checked, 60);
    assert!(worst <= FD_REL_TOL, "worst relative error {worst:e}");
}

#[test]
fn gradient_check_over_several_shapes() {
    let shapes = [
        NetworkSpec::new(4, 3).with_hidden(vec![6]),
        NetworkSpec::new(3, 2).with_hidden(vec![]),
        NetworkSpec::new(5, 4).with_hidden(vec![7, 5, 3]),
        NetworkSpec {
            activation: Activation::Tanh,
            ..NetworkSpec::new(4, 2).with_hidden(vec![8, 8])
        },
    ];
    for (i, spec) in shapes.iter().enumerate() {
        for seed in 0..5 {
            let (worst, _) = worst_gradient_error(spec, 100 * i as u64 + seed, 20);
            assert!(worst <= FD_REL_TOL, "shape {i} seed {seed}: {worst:e}");
        }
    }
}
