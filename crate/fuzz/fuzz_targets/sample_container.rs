#![no_main]

use libfuzzer_sys::fuzz_target;
use specialist_ensemble::container::Container;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(c) = Container::from_bytes(bytes) {
        // Compared as bytes: payloads may hold NaN.
        let encoded = c.to_bytes();
        let again = Container::from_bytes(&encoded).expect("re-encoded container decodes");
        assert_eq!(again.to_bytes(), encoded);
    }
});
