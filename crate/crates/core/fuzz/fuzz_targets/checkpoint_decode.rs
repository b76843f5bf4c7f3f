#![no_main]

use cpd_core::approx::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // the encoding is canonical
        assert_eq!(ck.encode(), data);
    }
});
