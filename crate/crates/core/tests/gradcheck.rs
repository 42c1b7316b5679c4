//! Tape gradients against central differences, in f64, 20 random instances per case.

mod common;

use common::grad::{away_from_kinks, cases, TOL};
use proptest::prelude::*;
use proptest::test_runner::{RngSeed, TestRunner};

fn check(name: &str) {
    let case = cases().into_iter().find(|c| c.name == name).expect("known case");
    let n = std::env::var("GRADCHECK_CASES").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
    let config = ProptestConfig {
        rng_seed: RngSeed::Fixed(7),
        failure_persistence: None,
        ..ProptestConfig::with_cases(n)
    };
    let inputs = (prop::collection::vec(-2.0f64..2.0, case.inputs).prop_map(away_from_kinks), 0u64..1000);
    TestRunner::new(config)
        .run(&inputs, |(x, seed)| {
            let err = (case.check)(&x, seed);
            prop_assert!(err < TOL, "relative error {err}");
            Ok(())
        })
        .unwrap();
}

macro_rules! grad_tests {
    ($($name:ident),* $(,)?) => {
        $(#[test] fn $name() { check(stringify!($name)); })*
    };
}

grad_tests!(
    matmul,
    matmul_t,
    add_sub_mul,
    broadcast_add,
    scale_neg,
    leaky_relu,
    tanh_sigmoid_log_sigmoid,
    clamp,
    mean_sum,
    l2_normalize,
    gather,
    gan_adaptor_classifier_losses,
    network_losses_in_latent,
    adaptor_objective_in_w,
    classifier_objective_in_images,
);
