#![no_main]

use hctx_core::pipeline::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::from_toml_str(text) else {
        return;
    };
    let _ = cfg.validate();
    if let Ok(printed) = cfg.to_documented_toml() {
        let back = RunConfig::from_toml_str(&printed).expect("printed config parses");
        assert_eq!(back.to_documented_toml().unwrap(), printed);
    }
});
