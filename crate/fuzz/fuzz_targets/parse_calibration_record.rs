#![no_main]

use libfuzzer_sys::fuzz_target;
use liprcp::conformal::{prediction_set, CalibrationRecord};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = CalibrationRecord::from_json(text) {
        rec.validate().unwrap();
        assert_eq!(CalibrationRecord::from_json(&rec.to_json().unwrap()).unwrap(), rec);
        let _ = prediction_set(&rec, &[0.0, 1.0, -1.0]);
    }
});
