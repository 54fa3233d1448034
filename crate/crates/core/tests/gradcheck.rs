mod common;

use common::{grad_check, toy_nets};

#[test]
fn analytic_gradients_match_central_differences() {
    for (name, spec, loss) in toy_nets() {
        for seed in 0..5 {
            let r = grad_check(&spec, loss, seed, 1e-4);
            assert!(r.worst_rel < 1e-3, "{name} seed {seed}: worst relative error {}", r.worst_rel);
            assert!(r.checked > 0);
        }
    }
}
