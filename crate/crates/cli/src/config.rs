//! Run configuration: a TOML file supplies defaults, command-line flags
//! override them, and the merged result is echoed next to the outputs.

use std::path::{Path, PathBuf};

use jpvae::classifier::ClassifierConfig;
use jpvae::covparam::CrossCovKind;
use jpvae::data::DEFAULT_THRESHOLD;
use jpvae::evaluation::ClassifierCell;
use jpvae::model::{Architecture, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATA_DIR_ENV: &str = "JPVAE_DATA_DIR";
pub const ECHO_FILE: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    #[default]
    Test,
}

/// Which classifier train/test pairings `eval` runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CellSet {
    /// The six single-view pairings.
    Table,
    /// Concatenated-view pairings.
    Concat,
    #[default]
    All,
    None,
}

impl CellSet {
    pub fn cells(self) -> Vec<ClassifierCell> {
        match self {
            CellSet::Table => ClassifierCell::table(),
            CellSet::Concat => ClassifierCell::concatenation(),
            CellSet::All => {
                let mut c = ClassifierCell::table();
                c.extend(ClassifierCell::concatenation());
                c
            }
            CellSet::None => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four MNIST IDX files (raw or gzip).
    pub dir: Option<PathBuf>,
    /// Directory written by `ingest`; preferred over `dir` when set.
    pub cache_dir: Option<PathBuf>,
    pub threshold: u8,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            cache_dir: None,
            threshold: DEFAULT_THRESHOLD,
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DataConfig {
    /// Flag, then config file, then `$JPVAE_DATA_DIR`, then `data/mnist` in
    /// the source tree.
    pub fn resolved_dir(&self) -> PathBuf {
        if let Some(d) = &self.dir {
            return d.clone();
        }
        if let Some(d) = std::env::var_os(DATA_DIR_ENV) {
            return PathBuf::from(d);
        }
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    pub checkpoint: Option<PathBuf>,
    /// The observed view; the other one is imputed.
    pub from: u8,
    pub split: SplitArg,
    pub fit_stats: bool,
    pub output: Option<PathBuf>,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            checkpoint: None,
            from: 1,
            split: SplitArg::Test,
            fit_stats: false,
            output: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoints: Vec<PathBuf>,
    pub cells: CellSet,
    pub baselines: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub kind: Option<String>,
    pub report: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub count: usize,
    pub per_row: usize,
    pub from: u8,
    pub variant: Option<CrossCovKind>,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            kind: None,
            report: None,
            checkpoint: None,
            output: None,
            count: 16,
            per_row: 8,
            from: 1,
            variant: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub out: PathBuf,
    pub variants: Vec<CrossCovKind>,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub arch: Architecture,
    pub classifier: ClassifierConfig,
    pub impute: ImputeConfig,
    pub eval: EvalSection,
    pub plot: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            out: PathBuf::from("runs"),
            variants: vec![CrossCovKind::ScaledOrthogonal],
            seeds: vec![1],
            data: DataConfig::default(),
            train: TrainConfig::default(),
            arch: Architecture::default(),
            classifier: ClassifierConfig::default(),
            impute: ImputeConfig::default(),
            eval: EvalSection::default(),
            plot: PlotConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    /// Writes the resolved configuration into the output directory.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(jpvae::Error::from)?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(jpvae::Error::from)?;
        Ok(path)
    }
}
