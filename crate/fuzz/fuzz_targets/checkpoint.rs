#![no_main]

use libfuzzer_sys::fuzz_target;
use pald_core::experiments::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().expect("decoded checkpoint encodes");
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode().expect("second encode"), bytes);
    }
});
