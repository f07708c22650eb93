#![no_main]

use libfuzzer_sys::fuzz_target;
use specialist_ensemble::metrics::aggregate_runs_csv;

fuzz_target!(|text: &str| {
    if let Ok(groups) = aggregate_runs_csv(text) {
        for (_, stats) in groups {
            assert!(stats.std >= 0.0 || stats.std.is_nan());
        }
    }
});
