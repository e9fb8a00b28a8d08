#![no_main]

use libfuzzer_sys::fuzz_target;
use miaaudit_core::nnet::DenseNet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(net) = DenseNet::from_checkpoint(text) {
        let again = net.to_checkpoint();
        let reloaded = DenseNet::from_checkpoint(&again).expect("re-saved checkpoint must load");
        assert_eq!(again, reloaded.to_checkpoint());
    }
});
