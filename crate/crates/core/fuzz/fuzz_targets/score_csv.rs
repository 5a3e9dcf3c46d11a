#![no_main]

use dsfp::sensitivity::ScoreTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = ScoreTable::from_csv(text) {
        let csv = table.to_csv();
        assert_eq!(ScoreTable::from_csv(&csv).unwrap(), table);
    }
});
