use ctkd_core::train::gradcheck::{run_suite, Component, TOLERANCE};
use ctkd_core::train::LossTerm;

#[test]
fn every_component_passes_finite_differences() {
    let results = run_suite(&Component::all(), 20, 40).unwrap();
    let names: Vec<&str> = results.iter().map(|r| r.component).collect();
    let mut expected: Vec<&str> = LossTerm::ALL.iter().map(|t| t.name()).collect();
    expected.push("total");
    assert_eq!(names, expected);
    for r in &results {
        assert!(r.max_rel_err <= TOLERANCE, "{}: {:e}", r.component, r.max_rel_err);
        assert_eq!(r.seeds, 20);
    }
    assert!(results.last().unwrap().coordinates >= 200 * 20);
}

#[test]
fn component_filters() {
    let dtw = Component::select("softdtw").unwrap();
    assert_eq!(dtw, vec![Component::Term(LossTerm::NdtwEmbed), Component::Term(LossTerm::NdtwHidden)]);
    assert_eq!(Component::select("ce").unwrap(), vec![Component::Term(LossTerm::Ce)]);
    assert_eq!(Component::select("all").unwrap().len(), 7);
    assert!(Component::select("bogus").is_none());
}
