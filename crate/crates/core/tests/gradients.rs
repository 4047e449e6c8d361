use encap_core::gradsuite;

#[test]
fn every_component_matches_finite_differences() {
    let mut failed = vec![];
    for name in gradsuite::CHECKS {
        let e = gradsuite::run(name).unwrap();
        println!("{:<10} rel_err {:.3e} over {} probes", e.name, e.rel_err, e.probes);
        if !e.passed() {
            failed.push(e.name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
