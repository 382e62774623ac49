#![no_main]

use libfuzzer_sys::fuzz_target;
use ubna_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).expect("echoed config parses");
        assert_eq!(again, cfg);
    }
});
