#![no_main]

use libfuzzer_sys::fuzz_target;
use miaaudit_core::target::TargetModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = TargetModel::from_checkpoint(text) {
        let again = model.to_checkpoint();
        let reloaded = TargetModel::from_checkpoint(&again).expect("re-saved checkpoint must load");
        assert_eq!(again, reloaded.to_checkpoint());
    }
});
