mod common;

use common::gradcheck;

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut rng = gradcheck::rng(11);
    for i in 0..40 {
        let inst = gradcheck::draw(&mut rng, 1e-3);
        let err = inst.relative_error();
        assert!(err < 1e-6, "instance {i}: relative error {err:e}");
    }
}

#[test]
fn layer_logit_gradients_sum_to_zero() {
    // softmax is invariant to shifting every logit, so the logit gradient is
    // orthogonal to the all-ones direction.
    let mut rng = gradcheck::rng(5);
    for _ in 0..20 {
        let inst = gradcheck::draw(&mut rng, 1e-3);
        let g = inst.analytic();
        let sum: f64 = g.logits.iter().sum();
        let scale: f64 = g.logits.iter().map(|x| x.abs()).sum::<f64>().max(1e-12);
        assert!(sum.abs() / scale < 1e-9, "{:?}", g.logits);
    }
}
