#![no_main]

use deq_core::harness::SweepGrid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = SweepGrid::from_json(text) {
        if let Ok(runs) = grid.expand() {
            for r in &runs {
                r.config.validate().expect("expanded configs are valid");
            }
        }
    }
});
