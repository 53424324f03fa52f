#![no_main]

use libfuzzer_sys::fuzz_target;

// parse must reject malformed checkpoint bytes with an error, never panic
// or allocate unbounded memory from attacker-controlled lengths
fuzz_target!(|data: &[u8]| {
    let _ = contextseg::checkpoint::parse(data);
});
