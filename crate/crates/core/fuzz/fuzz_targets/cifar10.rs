#![no_main]

use dsfp::data::{encode_cifar10_binary, parse_cifar10_binary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_cifar10_binary(data) {
        let back = encode_cifar10_binary(&ds).expect("parsed dataset re-encodes");
        assert_eq!(back, data);
    }
});
