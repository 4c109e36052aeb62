#![no_main]

use hctx_core::image::Image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::from_ppm(data) {
        let encoded = img.to_ppm();
        let decoded = Image::from_ppm(&encoded).expect("own encoding decodes");
        assert_eq!(decoded.to_ppm(), encoded);
    }
});
