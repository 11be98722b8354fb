use std::fs;
use std::path::Path;

use sbrl_core::orchestrator::TrainConfig;

use crate::commands::CliError;

/// Reads and validates a TOML config. Every failure names the path or key.
pub fn load(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config `{}`: {e}", path.display())))?;
    parse(&text).map_err(|e| CliError::Input(format!("config `{}`: {e}", path.display())))
}

pub fn parse(text: &str) -> Result<TrainConfig, String> {
    let config: TrainConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

pub fn render(config: &TrainConfig) -> String {
    toml::to_string_pretty(config).expect("configs always serialize")
}
