#![no_main]

use cpd_core::exp::metrics::{read_metrics, read_rows, write_rows, AggregateRow, MixtureRow};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_metrics(data) {
        let mut out = Vec::new();
        write_rows(&mut out, &rows).unwrap();
        assert_eq!(read_metrics(out.as_slice()).unwrap().len(), rows.len());
    }
    let _ = read_rows::<_, MixtureRow>(data);
    let _ = read_rows::<_, AggregateRow>(data);
});
