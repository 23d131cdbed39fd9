#![no_main]
use libfuzzer_sys::fuzz_target;
use mvs_dcw::io::pfm;

fuzz_target!(|data: &[u8]| {
    if let Ok(depth) = pfm::parse(data) {
        let again = pfm::parse(&pfm::to_bytes(&depth)).expect("written PFM re-parses");
        assert_eq!(again, depth);
    }
});
