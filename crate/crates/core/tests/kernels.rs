mod common;

use common::suites::kernel_suite;

#[test]
fn kernel_checks_meet_tolerances() {
    let r = kernel_suite();
    assert!(r.normalization_err <= 1e-8, "normalization {}", r.normalization_err);
    assert!(r.kl_err <= 1e-6, "kl {}", r.kl_err);
    assert!(r.digamma_err <= 1e-9, "digamma {}", r.digamma_err);
    assert!(r.log_gamma_err <= 1e-10, "log-gamma {}", r.log_gamma_err);
    assert!(r.rloo_sum <= 1e-12, "rloo sum {}", r.rloo_sum);
    assert!(r.discount_gamma_one_exact && r.discount_single_step_exact);
    assert!(r.discount_geometric_err <= 1e-15, "{}", r.discount_geometric_err);
    println!("{r:?}");
}
