#![no_main]

use conceptcf::config::RunConfig;
use libfuzzer_sys::fuzz_target;

// The TOML document comes first; each line after a `---` line is a `--set` override.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (doc, rest) = text.split_once("\n---\n").unwrap_or((text, ""));
    let overrides: Vec<String> = rest.lines().map(str::to_string).collect();
    if let Ok(c) = RunConfig::from_toml_str(doc, &overrides) {
        let _ = c.validate();
        let back = RunConfig::from_toml_str(&c.to_toml(), &[]).expect("printed config parses");
        assert_eq!(back.hash(), c.hash());
    }
});
