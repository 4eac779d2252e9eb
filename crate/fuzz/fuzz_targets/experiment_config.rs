#![no_main]

use lamn_cli::{Command, ExperimentConfig};
use libfuzzer_sys::fuzz_target;

const COMMANDS: [Command; 7] = [
    Command::Simulate,
    Command::Psi,
    Command::Info,
    Command::LamnCheck,
    Command::FactorTwo,
    Command::Estimate,
    Command::Study,
];

fuzz_target!(|data: &[u8]| {
    let Some((&selector, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let Ok(config) = ExperimentConfig::from_json(text) else { return };
    let command = COMMANDS[selector as usize % COMMANDS.len()];
    if let Ok(resolved) = config.resolve(command) {
        let manifest = resolved.config.to_json();
        let again = ExperimentConfig::from_json(&manifest)
            .and_then(|c| c.resolve(command))
            .expect("a manifest resolves");
        assert_eq!(manifest, again.config.to_json());
    }
});
