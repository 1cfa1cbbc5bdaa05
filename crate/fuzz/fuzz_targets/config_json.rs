//! Run configurations are untrusted input: parsing and validation must
//! reject bad documents with an error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use tpl_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(text) {
        // a config that validated must also build its problem
        cfg.build_ocp().expect("validated config builds");
        let _ = cfg.static_guess();
    }
});
