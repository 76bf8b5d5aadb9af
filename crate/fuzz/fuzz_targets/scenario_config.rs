#![no_main]
use camac_core::environment::ScenarioConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ScenarioConfig::from_json(text) else { return };
    // anything accepted must survive a round trip and still validate
    let again = ScenarioConfig::from_json(&serde_json::to_string(&cfg).unwrap()).expect("accepted config re-parses");
    assert_eq!(cfg, again);
});
