//! Experiment runner: TOML configs, seeded repetitions, run directories on
//! disk, attack sweeps over captured rounds and summary reports.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use commands::{cmd_attack, cmd_report, cmd_train, AttackOptions, OUTPUT_ROOT_ENV};
pub use config::{DatasetConfig, ExperimentConfig, ModelConfig, ModelName};

/// Short machine-readable class of a failure, for the error record.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    use ifl_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) => "io",
                E::MissingArtifact(_) => "missing_artifact",
                E::Malformed(_) | E::Format(_) => "malformed_input",
                E::InvalidArgument(_) | E::InvalidSpec(_) | E::CryptoParams(_) => "invalid_config",
                _ => "computation",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "invalid_config";
        }
    }
    let text = err.to_string();
    if text.starts_with("missing artifact") {
        "missing_artifact"
    } else if text.contains("already exists") {
        "output_exists"
    } else {
        "invalid_config"
    }
}
