#![no_main]

use libfuzzer_sys::fuzz_target;

use contextseg::config::RunConfig;

// parse must reject malformed config text with an error, never panic; any
// accepted config must serialize to a fixed point
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        let ser = cfg.serialize();
        let again = RunConfig::parse(&ser).expect("serialized config must re-parse");
        assert_eq!(cfg, again, "parse/serialize round trip diverged");
    }
});
