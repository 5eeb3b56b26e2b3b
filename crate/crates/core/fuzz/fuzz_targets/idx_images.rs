#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = dfca::datagen::parse_idx_images(data) {
        assert_eq!(images.pixels.len(), images.count * images.rows * images.cols);
        assert!(images.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
});
