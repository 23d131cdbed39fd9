#![no_main]
use libfuzzer_sys::fuzz_target;
use mvs_dcw::io::cam;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = cam::parse(data) {
        // Shortest round-trip formatting makes text -> value -> text exact.
        let again = cam::parse(cam::to_text(&c).as_bytes()).expect("written cam.txt re-parses");
        assert_eq!(again, c);
    }
});
