#![no_main]

use cpd_core::baselines::Method;
use cpd_core::cpd::OrderMode;
use cpd_core::domain::PartitionMethod;
use cpd_core::mixing::MixMode;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(m) = s.parse::<Method>() {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
    }
    let _ = s.parse::<OrderMode>();
    let _ = s.parse::<MixMode>();
    let _ = s.parse::<PartitionMethod>();
});
