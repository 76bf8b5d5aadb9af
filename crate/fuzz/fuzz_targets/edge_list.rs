#![no_main]
use camac_core::graph::parse_edge_list;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(edges) = parse_edge_list(text) else { return };
    let dumped: String = edges.iter().map(|e| format!("{},{},{}\n", e.relation.name(), e.src, e.dst)).collect();
    assert_eq!(parse_edge_list(&dumped).unwrap(), edges);
});
