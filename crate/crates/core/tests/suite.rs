use std::path::PathBuf;

use difftune::corpus::render;
use difftune::harness::suite::{edit_suite, load_suite};

fn shipped() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/edit-suite")
}

#[test]
fn shipped_suite_matches_the_generated_jobs() {
    let shipped = load_suite(&shipped()).unwrap();
    let generated = edit_suite();
    assert_eq!(shipped.len(), generated.len());
    for (s, g) in shipped.iter().zip(&generated) {
        assert_eq!((&s.id, s.category, &s.prompt), (&g.id, g.category, &g.prompt));
        assert_eq!(s.load_base().unwrap(), render(&g.base_scene).unwrap(), "{}", s.id);
        assert_eq!(s.load_region().unwrap(), g.region, "{}", s.id);
        assert!(s.threshold >= 0.01 && s.threshold.is_finite(), "{}", s.id);
    }
}
