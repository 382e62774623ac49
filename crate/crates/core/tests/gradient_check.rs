#[path = "support/oracles.rs"]
mod oracles;

#[test]
fn every_parameter_matches_central_differences() {
    let r = oracles::gradient_check(0..20).unwrap();
    assert_eq!(r.kinds.len(), 4, "all parameter classes covered: {:?}", r.kinds);
    assert!(r.skipped * 100 <= r.checked, "too many kink crossings: {} of {}", r.skipped, r.checked);
}
