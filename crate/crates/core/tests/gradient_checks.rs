//! Finite-difference verification of every differentiable operation at
//! 64-bit precision.

use ncd_core::gradcheck::check_all_ops;

#[test]
fn analytic_gradients_match_central_differences() {
    let checks = check_all_ops(20, 20_260_809);
    for check in &checks {
        println!(
            "{:<22} {} instances, max relative error {:.3e}",
            check.op, check.instances, check.max_rel_err
        );
        assert!(
            check.max_rel_err < 1e-4,
            "{}: max relative error {} exceeds 1e-4",
            check.op,
            check.max_rel_err
        );
    }
    assert_eq!(checks.len(), 8);
}
