#![no_main]

use libfuzzer_sys::fuzz_target;
use liprcp_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // Split off trailing `--set` style lines after a NUL.
    let (toml, overrides) = text.split_once('\0').unwrap_or((text, ""));
    let overrides: Vec<String> = overrides.lines().map(str::to_string).collect();
    if let Ok(cfg) = RunConfig::from_toml(toml, &overrides) {
        cfg.validate().unwrap();
    }
});
