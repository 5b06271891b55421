mod common;

#[test]
fn every_layer_matches_finite_differences() {
    for (name, worst) in common::gradient_check(25, 1) {
        assert!(worst < 1e-4, "{name}: relative error {worst:e}");
    }
}

#[test]
fn finite_differences_catch_a_wrong_gradient() {
    // negative control: a deliberately scaled gradient must fail the check
    use hesplit_core::nn::layers::linear_forward;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let x = common::random_tensor(&[3, 4], &mut rng);
    let w = common::random_tensor(&[2, 4], &mut rng);
    let b = common::random_tensor(&[2], &mut rng);
    let numeric = common::numeric_grad(&b, |p| linear_forward(&x, &w, p).unwrap().data().iter().sum());
    let wrong: Vec<f64> = numeric.iter().map(|v| v * 1.01).collect();
    assert!(common::rel_err(&wrong, &numeric) > 1e-4);
}
