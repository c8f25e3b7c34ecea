#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = bounty_core::corpus::Status::parse(text);
        let _ = bounty_core::corpus::parse_date(text);
    }
});
