use ct_harness::checks::*;

#[test]
fn rasterize_max_matches_brute_force() {
    let r = rasterize_max_oracle(100, 11).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn emd_matches_factorial_enumeration() {
    let r = emd_oracle(100, 12).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn rasterized_grids_ignore_point_order() {
    assert!(rasterize_permutation_invariance(50, 13).unwrap());
}

#[test]
fn models_respect_point_order() {
    let gap = model_permutation_deviation(14).unwrap();
    assert!(gap < 1e-10, "{gap:e}");
}

#[test]
fn footprint_weights_partition_unity() {
    let dev = partition_of_unity_deviation(200, 15).unwrap();
    assert!(dev < 1e-12, "{dev:e}");
}

#[test]
fn node_keyed_point_round_trips() {
    assert!(scatter_gather_round_trip(100, 16).unwrap());
}

#[test]
fn zeroed_block_passes_features_through() {
    assert!(zeroed_mhct_is_identity(17).unwrap());
}
