//! Experiment drivers, datasets, reports and figures.

pub mod data;
pub mod experiments;
pub mod figures;
pub mod report;
pub mod theory;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackError, AttackKind};
use crate::attribution::{AttributionConfig, AttributionError, Method};
use crate::geometry::GeometryError;
use crate::metrics::MetricError;
use crate::nn::NnError;
use crate::training::{TrainConfig, TrainError};

pub use data::{gen_two_moons, load_idx, DataError, Dataset};
pub use experiments::{
    run_regularization_experiment, run_robustness_experiment, run_transfer_experiment, select_inputs,
};
pub use figures::{emit_contour_field, emit_heatmap, ContourSummary, Region};
pub use report::{Budget, ComparisonReport, MetricReport, MetricRow, ModelSummary};
pub use theory::{run_theory_checks, TheoryConfig, TheorySummary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Robustness,
    Regularization,
    Transfer,
    TheoryCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Idx { images: PathBuf, labels: PathBuf },
    TwoMoons { n: usize, noise: f64, seed: u64 },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Idx {
            images: "data/digits8-test-images.idx".into(),
            labels: "data/digits8-test-labels.idx".into(),
        }
    }
}

impl DatasetSpec {
    /// Loads the dataset in its native units.
    pub fn load(&self) -> Result<Dataset> {
        Ok(match self {
            DatasetSpec::Idx { images, labels } => load_idx(images, labels)?,
            DatasetSpec::TwoMoons { n, noise, seed } => gen_two_moons(*n, *noise, *seed),
        })
    }

    fn rebase(&mut self, dir: &Path) {
        if let DatasetSpec::Idx { images, labels } = self {
            *images = rebase(dir, images);
            *labels = rebase(dir, labels);
        }
    }
}

fn rebase(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// One experiment run. Budgets in `epsilons` are in the dataset's native
/// units; models see inputs scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    pub checkpoints: Vec<PathBuf>,
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    pub attacks: Vec<AttackKind>,
    pub epsilons: Vec<f64>,
    pub k: usize,
    pub images: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub attack_steps: usize,
    pub surrogate_beta: f64,
    /// Attribution settings in model (unit-range) units.
    pub attribution: AttributionConfig,
    pub theory: TheoryConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Robustness,
            checkpoints: Vec::new(),
            dataset: DatasetSpec::default(),
            methods: Method::ALL.to_vec(),
            attacks: vec![AttackKind::TopK],
            epsilons: vec![2.0, 4.0, 8.0, 16.0],
            k: 4,
            images: 100,
            seed: 0,
            out_dir: "out".into(),
            attack_steps: 50,
            surrogate_beta: 50.0,
            attribution: AttributionConfig::for_range(0.0, 1.0),
            theory: TheoryConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.epsilons.is_empty() {
            return bad("epsilons must not be empty");
        }
        if self.epsilons.windows(2).any(|w| w[1] <= w[0]) || self.epsilons[0] < 0.0 {
            return bad("epsilons must be nonnegative and strictly increasing");
        }
        if self.methods.is_empty() || self.attacks.is_empty() {
            return bad("methods and attacks must not be empty");
        }
        if self.k == 0 || self.images == 0 {
            return bad("k and images must be >= 1");
        }
        Ok(())
    }

    /// Parses a TOML spec; relative paths resolve against the file's directory.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec: ExperimentSpec = read_toml(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        spec.checkpoints = spec.checkpoints.iter().map(|c| rebase(dir, c)).collect();
        spec.dataset.rebase(dir);
        spec.out_dir = rebase(dir, &spec.out_dir);
        Ok(spec)
    }

    pub fn load_networks(&self) -> Result<Vec<(String, crate::nn::Network)>> {
        if self.checkpoints.is_empty() {
            return Err(HarnessError::InvalidSpec("no checkpoints given".into()));
        }
        self.checkpoints
            .iter()
            .map(|p| {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, crate::nn::Network::load_checkpoint(p)?))
            })
            .collect()
    }
}

/// Training run: dataset, trainer settings and where to write the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub checkpoint: PathBuf,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Idx {
                images: "data/digits8-train-images.idx".into(),
                labels: "data/digits8-train-labels.idx".into(),
            },
            train: TrainConfig::default(),
            checkpoint: "model.ckpt".into(),
        }
    }
}

impl TrainSpec {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec: TrainSpec = read_toml(path)?;
        spec.dataset.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(spec)
    }
}

/// Training history stored next to a checkpoint.
pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.csv")
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| HarnessError::Config { path: path.to_path_buf(), message: e.to_string() })
}
