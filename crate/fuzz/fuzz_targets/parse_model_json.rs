#![no_main]

use libfuzzer_sys::fuzz_target;
use liprcp::lipnet::LipschitzClassifier;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = LipschitzClassifier::from_json(text) {
        let again = LipschitzClassifier::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(again, model);
        let x = vec![0.5; model.input_dim()];
        let _ = model.forward(&x);
    }
});
