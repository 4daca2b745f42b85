#![no_main]
use libfuzzer_sys::fuzz_target;
use u3m::io::config_file::{parse_config, to_config_string};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config(text) {
        let again = parse_config(&to_config_string(&cfg)).expect("written config parses");
        assert_eq!(again, cfg);
    }
});
