#![no_main]
use libfuzzer_sys::fuzz_target;
use mvs_dcw::io::ply;

fuzz_target!(|data: &[u8]| {
    let _ = ply::parse(data);
});
