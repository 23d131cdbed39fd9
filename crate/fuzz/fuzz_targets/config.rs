#![no_main]
use libfuzzer_sys::fuzz_target;
use mvs_dcw::io::config;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = config::parse(data) {
        let again =
            config::parse(config::to_text(&cfg).as_bytes()).expect("written config re-parses");
        assert_eq!(again, cfg);
    }
});
