mod common;

#[test]
fn every_primitive_and_loss_matches_finite_differences() {
    let results = common::gradcheck_suite();
    let mut failures = Vec::new();
    for r in &results {
        if !(r.max_rel_err < common::GRADCHECK_TOL) {
            failures.push(format!("{}: {:.3e}", r.name, r.max_rel_err));
        }
    }
    assert!(results.iter().all(|r| r.instances >= 50));
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn transform_matches_least_squares_oracle() {
    let o = common::transform_oracle(100);
    assert!(o.max_residual_gap < 1e-9, "residual gap {:e}", o.max_residual_gap);
    assert!(o.max_square_gap < 1e-9, "square-case gap {:e}", o.max_square_gap);
}
