#![no_main]
use camac_core::agent::Model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(model) = Model::from_json(text) else { return };
    let again = Model::from_json(&model.to_json().unwrap()).expect("saved checkpoint reloads");
    assert_eq!(model, again);
});
