#![no_main]

use cloudrone::parse_scenario;
use cloudrone::scenario::serialize_scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = parse_scenario(text) {
        let again = parse_scenario(&serialize_scenario(&s)).expect("serialized scenario parses");
        assert_eq!(again, s);
    }
});
