#![no_main]

use libfuzzer_sys::fuzz_target;
use riccati_game::io::{alpha_csv, parse_alpha_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(policy) = parse_alpha_csv(text) else {
        return;
    };
    // round trip through the writer
    let again = parse_alpha_csv(&alpha_csv(&policy)).expect("writer output parses");
    assert_eq!(policy.nodes(), again.nodes());
    assert_eq!(policy.values(), again.values());
});
