#![no_main]

use hctx_core::pipeline::{parse_metrics, MetricsRow};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(rows) = parse_metrics(text) else {
        return;
    };
    for row in rows {
        assert_eq!(MetricsRow::parse_line(&row.to_line()).unwrap(), row);
    }
});
