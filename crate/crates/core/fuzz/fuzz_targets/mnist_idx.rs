#![no_main]

use dsfp::data::parse_mnist_idx;
use libfuzzer_sys::fuzz_target;

// First two bytes: little-endian length of the image file; the rest is the
// label file.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let split = (u16::from_le_bytes([data[0], data[1]]) as usize).min(data.len() - 2);
    let (images, labels) = data[2..].split_at(split);
    if let Ok(ds) = parse_mnist_idx(images, labels) {
        assert_eq!(ds.len(), labels.len() - 8);
    }
});
