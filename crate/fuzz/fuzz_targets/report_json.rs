#![no_main]

use libfuzzer_sys::fuzz_target;
use miaaudit_core::evalstat::EvalReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = EvalReport::from_json(text) {
        let json = report.to_json().expect("parsed report must serialize");
        assert_eq!(EvalReport::from_json(&json).expect("round trip"), report);
    }
});
