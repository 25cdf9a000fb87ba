#![no_main]

use libfuzzer_sys::fuzz_target;
use riccati_game::build_problem;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = build_problem(text) {
            // anything accepted must also be internally consistent
            assert_eq!(spec.omega.dim, spec.dim_state);
            assert!(spec.grid.dt > 0.0);
        }
    }
});
