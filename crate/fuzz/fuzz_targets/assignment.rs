#![no_main]

use hctx_core::pooling::ClusterAssignment;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(a) = ClusterAssignment::from_text(text) {
        assert!(a.labels.iter().all(|&l| l < a.n_clusters));
        assert_eq!(ClusterAssignment::from_text(&a.to_text()).unwrap(), a);
    }
});
