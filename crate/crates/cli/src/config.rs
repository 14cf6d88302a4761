//! TOML run configuration: one file drives generation, training and
//! evaluation. Unknown keys are rejected and every seed is explicit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wildflow_core::error::{Error, Result};
use wildflow_core::eval::RegionSpec;
use wildflow_core::flow::FlowConfig;
use wildflow_core::synth::GeneratorConfig;
use wildflow_core::train::{ModelKind, TrainConfig};

/// Evaluation settings: which year is held out and how scored regions are
/// selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out test year; `None` means the last year in the dataset.
    pub test_year: Option<i32>,
    /// Years of history before the test year used for training.
    pub train_window_years: u32,
    pub regions: RegionSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_year: None,
            train_window_years: 3,
            regions: RegionSpec::default(),
        }
    }
}

/// Default directories; command-line flags override these when given.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// The full run configuration. Every section has defaults, so an empty
/// file is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model kind trained when `--model` is not given.
    pub model: ModelKind,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Wildflow,
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            flow: FlowConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.flow.validate()?;
        if self.eval.train_window_years == 0 {
            return Err(Error::invalid("eval.train_window_years must be positive"));
        }
        if self.eval.regions.seed_count == 0 {
            return Err(Error::invalid("eval.regions.seed_count must be positive"));
        }
        if self.eval.regions.max_region_size == 0 {
            return Err(Error::invalid(
                "eval.regions.max_region_size must be positive",
            ));
        }
        Ok(())
    }
}

/// Parses a model kind name as used in configs and `--model`.
pub fn parse_model_kind(s: &str) -> Result<ModelKind> {
    match s {
        "wildflow" => Ok(ModelKind::Wildflow),
        "logreg" => Ok(ModelKind::Logreg),
        "mlp" => Ok(ModelKind::Mlp),
        "gnn" => Ok(ModelKind::Gnn),
        "no_composite_base" => Ok(ModelKind::WildflowNoBase),
        "no_detection_head" => Ok(ModelKind::WildflowNoDet),
        other => Err(Error::invalid(format!(
            "unknown model kind '{other}', expected one of wildflow, logreg, \
             mlp, gnn, no_composite_base, no_detection_head"
        ))),
    }
}

fn line_and_column(text: &str, byte: usize) -> (u64, u64) {
    let byte = byte.min(text.len());
    let before = &text[..byte];
    let line = before.bytes().filter(|&b| b == b'\n').count() as u64 + 1;
    let column = before
        .rfind('\n')
        .map_or(byte, |nl| byte - nl - 1) as u64
        + 1;
    (line, column)
}

/// Loads and validates a TOML run config. Parse failures come back as
/// [`Error::Parse`] with the offending line, so callers can classify them
/// separately from validation failures.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| {
        let (line, column) = e
            .span()
            .map_or((0, 0), |span| line_and_column(&text, span.start));
        Error::Parse {
            file: path.display().to_string(),
            line,
            column: column.to_string(),
            message: e.message().to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use wildflow_core::eval::RegionSchedule;

    #[test]
    fn empty_config_is_the_default() {
        let config: RunConfig = toml::from_str("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.model, ModelKind::Wildflow);
        assert_eq!(config.eval.train_window_years, 3);
        config.validate().unwrap();
    }

    #[test]
    fn nested_sections_override_defaults() {
        let text = "model = \"gnn\"\n\
            [generator]\nrows = 8\ncols = 9\n\
            [train]\nseed = 7\n\
            [flow]\nscheme = \"rk4\"\n\
            [eval]\ntest_year = 2016\n\
            [eval.regions]\nschedule = \"fixed\"\n\
            [paths]\ndata_dir = \"data\"\n";
        let config: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(config.model, ModelKind::Gnn);
        assert_eq!(config.generator.rows, 8);
        assert_eq!(config.generator.cols, 9);
        assert_eq!(config.train.seed, 7);
        assert_eq!(config.eval.test_year, Some(2016));
        assert_eq!(config.eval.regions.schedule, RegionSchedule::Fixed);
        assert_eq!(config.paths.data_dir.as_deref(), Some(Path::new("data")));
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[generator]\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train.stage1]\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[eval.regions]\nbogus = 1\n").is_err());
    }

    #[test]
    fn parse_errors_carry_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "model = \"wildflow\"\n[generator]\nrows = \"x\"\n").unwrap();
        match load_run_config(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_values_fail_validation_not_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[generator]\nrows = 0\n").unwrap();
        match load_run_config(&path) {
            Err(Error::InvalidArgument(_)) => {}
            other => panic!("expected an invalid argument error, got {other:?}"),
        }
    }

    #[test]
    fn missing_config_is_a_missing_artifact() {
        match load_run_config(Path::new("/nonexistent/run.toml")) {
            Err(Error::MissingArtifact(_)) => {}
            other => panic!("expected a missing artifact error, got {other:?}"),
        }
    }

    #[test]
    fn model_kind_names_round_trip() {
        for kind in [
            ModelKind::Wildflow,
            ModelKind::Logreg,
            ModelKind::Mlp,
            ModelKind::Gnn,
            ModelKind::WildflowNoBase,
            ModelKind::WildflowNoDet,
        ] {
            assert_eq!(parse_model_kind(kind.name()).unwrap(), kind);
        }
        assert!(parse_model_kind("nonsense").is_err());
    }
}
