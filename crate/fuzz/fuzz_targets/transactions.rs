#![no_main]
use camac_core::environment::transactions::{parse_transactions, write_transactions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ingested) = parse_transactions(data) else { return };
    assert!(ingested.records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    let mut buf = Vec::new();
    write_transactions(&mut buf, &ingested.records).unwrap();
    let again = parse_transactions(buf.as_slice()).expect("written log re-parses");
    assert!(again.rejects.is_empty());
    assert_eq!(again.records, ingested.records);
});
