#![no_main]
use camac_cli::config::{parse_config, ConfigError, Profile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    match parse_config(text, Profile::Desk) {
        Ok(cfg) => {
            let again = parse_config(&cfg.canonical_json(), Profile::Paper).expect("canonical form re-parses");
            assert_eq!(cfg, again);
        }
        Err(ConfigError::Invalid(vs)) => assert!(!vs.is_empty()),
        Err(e) => assert!(!e.lines().is_empty()),
    }
});
