use cdfnet::gradcheck::{gradcheck, CheckUnit};

#[test]
fn every_unit_passes_at_its_default_tolerance() {
    let mut failures = Vec::new();
    for unit in CheckUnit::all() {
        let report = gradcheck(unit, unit.default_tolerance(), 1).unwrap();
        assert!(report.checked() > 0, "{unit}: nothing checked");
        if !report.passed() {
            failures.push(report.to_text());
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
