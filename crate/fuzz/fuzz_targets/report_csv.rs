#![no_main]

use cloudrone::report::{check_consistency, read_creations, read_requests, read_series, Summary};
use libfuzzer_sys::fuzz_target;

// First byte picks the reader; the rest is the file body.
fuzz_target!(|data: &[u8]| {
    let Some((&which, body)) = data.split_first() else { return };
    match which % 3 {
        0 => {
            if let Ok(rows) = read_requests(body) {
                check_consistency(&Summary::default(), &rows, &[]);
            }
        }
        1 => {
            if let Ok(rows) = read_creations(body) {
                check_consistency(&Summary::default(), &[], &rows);
            }
        }
        _ => {
            let _ = read_series(body);
        }
    }
});
