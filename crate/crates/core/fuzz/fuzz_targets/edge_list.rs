#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = dfca::Topology::parse_edge_list(text) {
        let again = dfca::Topology::parse_edge_list(&t.to_edge_list()).unwrap();
        assert_eq!(t, again);
    }
});
