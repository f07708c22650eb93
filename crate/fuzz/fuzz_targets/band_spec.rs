#![no_main]

use libfuzzer_sys::fuzz_target;
use specialist_ensemble::bands::BandSpec;

fuzz_target!(|text: &str| {
    if let Ok(spec) = text.parse::<BandSpec>() {
        let again: BandSpec = spec.to_string().parse().expect("display round-trips");
        assert_eq!(again, spec);
    }
});
