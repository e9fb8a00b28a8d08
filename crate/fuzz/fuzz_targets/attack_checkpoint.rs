#![no_main]

use libfuzzer_sys::fuzz_target;
use miaaudit_core::attack::AttackModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = AttackModel::from_checkpoint(text) {
        let again = model.to_checkpoint();
        let reloaded = AttackModel::from_checkpoint(&again).expect("re-saved checkpoint must load");
        assert_eq!(again, reloaded.to_checkpoint());
    }
});
