mod common;

use common::{gradient_suite, FD_TOLERANCE};

#[test]
fn analytic_gradients_match_central_differences() {
    for (op, err) in gradient_suite(2024) {
        assert!(err < FD_TOLERANCE, "{op}: max relative error {err:e}");
    }
}
