#![no_main]

use libfuzzer_sys::fuzz_target;
use miaaudit_core::cohort::read_cohort;

// Input is the frames CSV and the split sidecar separated by one NUL byte.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let (csv, sidecar) = text.split_once('\0').unwrap_or((text, ""));
    let _ = read_cohort(csv, sidecar);
});
