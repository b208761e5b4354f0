#![no_main]

use libfuzzer_sys::fuzz_target;
use liprcp::datasets::{read_csv, write_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_csv(data) {
        // Anything accepted must survive a write/read round trip unchanged.
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), ds);
    }
});
