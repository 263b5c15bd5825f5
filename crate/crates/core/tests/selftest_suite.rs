use refshare_core::selftest;

#[test]
fn every_property_passes() {
    let report = selftest::run();
    print!("{}", report.render());
    assert!(report.outcomes.len() >= 10);
    for o in &report.outcomes {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
}
