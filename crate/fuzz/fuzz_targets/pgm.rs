#![no_main]
use libfuzzer_sys::fuzz_target;
use mvs_dcw::io::pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = pgm::parse(data) {
        let bytes = pgm::to_bytes(&map).expect("parsed labels fit 16 bits");
        assert_eq!(pgm::parse(&bytes).expect("written PGM re-parses"), map);
    }
});
