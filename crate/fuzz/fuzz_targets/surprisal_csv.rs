#![no_main]

use libfuzzer_sys::fuzz_target;
use pald_core::flow::read_surprisal_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_surprisal_csv(data);
});
