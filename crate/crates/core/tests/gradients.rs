mod support;

use support::reference::gradient_case;

#[test]
fn autodiff_matches_reference_finite_differences() {
    let mut failures = Vec::new();
    for i in 0..100 {
        let case = gradient_case(i);
        if !case.passed() {
            failures.push(format!("case {i}: {case:?}"));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
