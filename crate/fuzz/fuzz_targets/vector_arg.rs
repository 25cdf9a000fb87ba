#![no_main]

use libfuzzer_sys::fuzz_target;
use riccati_game::io::parse_vector_arg;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(v) = parse_vector_arg(text) {
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }
});
