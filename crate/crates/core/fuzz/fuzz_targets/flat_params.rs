#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = dfca::FlatParams::from_bytes(data) {
        assert_eq!(p.to_bytes(), data);
    }
});
