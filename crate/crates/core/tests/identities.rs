mod common;

use common::suites::{diffusion_oracle, exact_identities, identity_at_init, Check};

fn assert_all(checks: Vec<Check>) {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.ok)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn exact_identity_suite() {
    assert_all(exact_identities());
}

#[test]
fn diffusion_oracle_suite() {
    assert_all(diffusion_oracle());
}

#[test]
fn zero_initialized_blocks_are_identities() {
    assert_all(identity_at_init());
}
