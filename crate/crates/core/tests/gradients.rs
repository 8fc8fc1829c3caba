mod common;

use common::grad::{latent_cases, loss_cases, primitive_cases, run_cases, GradCase};

fn assert_cases(cases: Vec<GradCase>) {
    let failed: Vec<String> = run_cases(&cases)
        .into_iter()
        .filter(|(_, worst, tol)| !(worst <= tol))
        .map(|(name, worst, tol)| format!("{name}: {worst:.3e} > {tol:.0e}"))
        .collect();
    assert!(failed.is_empty(), "gradient mismatches: {failed:?}");
}

#[test]
fn primitives_match_finite_differences() {
    assert_cases(primitive_cases());
}

#[test]
fn latent_ops_match_finite_differences() {
    assert_cases(latent_cases());
}

#[test]
fn losses_match_finite_differences() {
    assert_cases(loss_cases());
}

#[test]
fn oracle_catches_a_wrong_gradient() {
    use common::grad::check_inputs;
    use lmvae_core::Tensor;
    // d/dx of x·stop(x) is x, not 2x: a constant copy breaks the chain.
    let x = Tensor::vector(vec![1.5, -0.5]);
    let err = check_inputs(
        &|g, v| {
            let c = g.constant(g.value(v[0]).clone());
            let p = g.mul(v[0], c)?;
            Ok(g.sum(p))
        },
        &[x],
    )
    .unwrap();
    assert!(err > 0.1, "oracle missed a broken gradient ({err})");
}
