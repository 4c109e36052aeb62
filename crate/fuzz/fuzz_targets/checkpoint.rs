#![no_main]

use hctx_core::pipeline::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = Checkpoint::from_bytes(data) else {
        return;
    };
    // Anything we accept must survive a re-encode unchanged.
    let bytes = ckpt.to_bytes();
    let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint parses");
    assert_eq!(again.to_bytes(), bytes);
});
