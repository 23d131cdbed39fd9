#![no_main]
use libfuzzer_sys::fuzz_target;
use mvs_dcw::io::rmvt;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = rmvt::parse(data) {
        assert_eq!(
            rmvt::to_bytes(&t).expect("parsed tensors are writable"),
            data
        );
    }
});
