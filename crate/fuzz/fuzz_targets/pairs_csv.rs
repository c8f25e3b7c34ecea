#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = bounty_core::fairness::parse_pairs_csv(data);
});
