mod common;

use common::checks;

#[test]
fn nms_matches_brute_force() {
    checks::nms_matches_brute_force().assert();
}

#[test]
fn map_matches_reference() {
    checks::map_matches_reference().assert();
}
