#![no_main]

use libfuzzer_sys::fuzz_target;

// First byte picks where the image file ends and the label file begins.
fuzz_target!(|data: &[u8]| {
    let Some((&cut, rest)) = data.split_first() else { return };
    let cut = (cut as usize * rest.len()) / 255;
    let (images, labels) = rest.split_at(cut);
    if let Ok(d) = dfca::datagen::parse_idx_pair(images, labels) {
        assert_eq!(d.labels().len(), d.len());
    }
});
