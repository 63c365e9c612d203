//! Per-command configuration records. Every table rejects unknown keys and
//! every field has a built-in default, so an empty file is a valid config.

use std::path::{Path, PathBuf};

use affinitynet::data::{self, Dataset, Orientation};
use affinitynet::layers::ModelSpec;
use affinitynet::training::{BatchMode, EarlyStop, Optimizer, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Feature attention with kNN pooling, then affine + ReLU, then the head.
    FeatureAttention,
    /// Feature attention, then a kNN pooling layer with cosine kernels, then the head.
    KnnPooling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub hidden: usize,
    pub k: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: Architecture::FeatureAttention,
            hidden: 100,
            k: 40,
        }
    }
}

impl ModelSection {
    pub fn affinitynet(&self, input_dim: usize, classes: usize) -> ModelSpec {
        match self.architecture {
            Architecture::FeatureAttention => ModelSpec::feature_attention_net(input_dim, self.hidden, classes, self.k),
            Architecture::KnnPooling => ModelSpec::affinitynet(input_dim, self.hidden, classes, self.k),
        }
    }

    pub fn baseline(&self, input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec::neural_net(input_dim, self.hidden, classes)
    }

    fn validate(&self) -> CliResult<()> {
        if self.hidden == 0 {
            return invalid("model.hidden must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_mode: BatchMode,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.1,
            optimizer: Optimizer::default(),
            batch_mode: BatchMode::Full,
            early_stop: None,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed,
            batch_mode: self.batch_mode,
            early_stop: self.early_stop,
        }
    }

    fn validate(&self) -> CliResult<()> {
        self.with_seed(0).validate().map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Labeled data for `classify` and `cluster`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassData {
    /// Four Gaussian clusters in two signal columns plus forty noise columns.
    Synthetic {
        #[serde(default = "default_per_cluster")]
        n_per_cluster: usize,
    },
    /// Two Gaussian classes of unequal size.
    TwoClass {
        #[serde(default = "default_sizes")]
        sizes: [usize; 2],
        #[serde(default = "default_dims")]
        dims: usize,
        #[serde(default = "default_gap")]
        gap: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_orientation")]
        orientation: Orientation,
        /// Column holding the labels; alternatively give `labels_path`.
        #[serde(default)]
        label_column: Option<String>,
        /// Two-column `(sample_id, label)` file.
        #[serde(default)]
        labels_path: Option<PathBuf>,
        #[serde(default)]
        top_variance: Option<usize>,
        #[serde(default)]
        z_score: bool,
    },
}

fn default_per_cluster() -> usize {
    1000
}
fn default_sizes() -> [usize; 2] {
    [421, 54]
}
fn default_dims() -> usize {
    20
}
fn default_gap() -> f64 {
    1.5
}
fn default_orientation() -> Orientation {
    Orientation::SamplesAsRows
}
fn default_survival_n() -> usize {
    1000
}

impl ClassData {
    /// Generated sources draw a fresh sample per seed; CSV sources ignore it.
    pub fn load(&self, seed: u64) -> CliResult<Dataset<f64>> {
        let d = match self {
            ClassData::Synthetic { n_per_cluster } => data::gen_synthetic(*n_per_cluster, seed)?,
            ClassData::TwoClass { sizes, dims, gap } => data::gen_two_class((sizes[0], sizes[1]), *dims, *gap, seed)?,
            ClassData::Csv {
                path,
                orientation,
                label_column,
                labels_path,
                top_variance,
                z_score,
            } => {
                let mut d = data::load_csv(path, *orientation, label_column.as_deref())?;
                if let Some(lp) = labels_path {
                    d = d.attach_labels(std::fs::File::open(lp)?)?;
                }
                if d.labels.is_none() {
                    return invalid("csv source needs label_column or labels_path");
                }
                prepare(d, *top_variance, *z_score)?
            }
        };
        d.validate()?;
        Ok(d)
    }

    /// Whether every seed sees the same rows.
    pub fn is_fixed(&self) -> bool {
        matches!(self, ClassData::Csv { .. })
    }

    fn validate(&self) -> CliResult<()> {
        match self {
            ClassData::Synthetic { n_per_cluster } if *n_per_cluster == 0 => invalid("n_per_cluster must be positive"),
            ClassData::TwoClass { sizes, dims, gap } => {
                if sizes.contains(&0) || *dims == 0 || !gap.is_finite() {
                    invalid("two_class needs positive sizes and dims and a finite gap")
                } else {
                    Ok(())
                }
            }
            ClassData::Csv { path, label_column, labels_path, .. } => {
                if label_column.is_some() && labels_path.is_some() {
                    return invalid("give only one of label_column and labels_path");
                }
                if label_column.is_none() && labels_path.is_none() {
                    return invalid("csv source needs label_column or labels_path");
                }
                if !path.exists() {
                    return invalid(&format!("no such file: {}", path.display()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Data with survival records for `survival`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurvivalData {
    /// Two signal and forty noise covariates with exponential event times.
    Synthetic {
        #[serde(default = "default_survival_n")]
        n: usize,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_orientation")]
        orientation: Orientation,
        /// Three-column `(sample_id, time, event)` file.
        survival_path: PathBuf,
        #[serde(default)]
        top_variance: Option<usize>,
        #[serde(default)]
        z_score: bool,
    },
}

impl SurvivalData {
    pub fn load(&self, seed: u64) -> CliResult<Dataset<f64>> {
        let d = match self {
            SurvivalData::Synthetic { n } => data::gen_survival(*n, seed)?,
            SurvivalData::Csv {
                path,
                orientation,
                survival_path,
                top_variance,
                z_score,
            } => {
                let d = data::load_csv(path, *orientation, None)?.attach_survival(std::fs::File::open(survival_path)?)?;
                prepare(d, *top_variance, *z_score)?
            }
        };
        d.validate()?;
        Ok(d)
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, SurvivalData::Csv { .. })
    }

    fn validate(&self) -> CliResult<()> {
        match self {
            SurvivalData::Synthetic { n } if *n < 2 => invalid("survival n must be at least 2"),
            SurvivalData::Csv { path, survival_path, .. } => {
                for p in [path, survival_path] {
                    if !p.exists() {
                        return invalid(&format!("no such file: {}", p.display()));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn prepare(d: Dataset<f64>, top_variance: Option<usize>, z_score: bool) -> CliResult<Dataset<f64>> {
    let d = match top_variance {
        Some(m) => data::top_variance_select(&d, m)?,
        None => d,
    };
    Ok(if z_score { d.z_score() } else { d })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub reps: usize,
    pub n_per_cluster: usize,
    pub train_fraction: f64,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reps: 5,
            n_per_cluster: 1000,
            train_fraction: 0.01,
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub seed: u64,
    pub reps: usize,
    /// Number of best runs averaged per fraction.
    pub top: usize,
    pub fractions: Vec<f64>,
    pub data: ClassData,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reps: 20,
            top: 10,
            fractions: vec![0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            data: ClassData::TwoClass {
                sizes: default_sizes(),
                dims: default_dims(),
                gap: default_gap(),
            },
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub seed: u64,
    pub reps: usize,
    pub train_fraction: f64,
    /// Defaults to the number of distinct labels.
    pub clusters: Option<usize>,
    pub data: ClassData,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reps: 30,
            train_fraction: 0.01,
            clusters: None,
            data: ClassData::Synthetic {
                n_per_cluster: default_per_cluster(),
            },
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalConfig {
    pub seed: u64,
    pub reps: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Sizes of the predicted risk groups, lowest risk first.
    pub group_proportions: Vec<f64>,
    /// Columns for the linear Cox baseline; empty disables it.
    pub baseline_columns: Vec<usize>,
    pub data: SurvivalData,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reps: 5,
            train_fraction: 0.4,
            validation_fraction: 0.3,
            group_proportions: vec![0.5, 0.5],
            baseline_columns: vec![2, 3],
            data: SurvivalData::Synthetic { n: default_survival_n() },
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random instances per check.
    pub reps: usize,
    /// Name of a check whose analytic gradient is perturbed on purpose.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reps: 3,
            corrupt: None,
        }
    }
}

fn invalid<T>(msg: &str) -> CliResult<T> {
    Err(CliError::Config(msg.to_string()))
}

fn check_fraction(name: &str, f: f64) -> CliResult<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        invalid(&format!("{name} must lie in (0, 1), got {f}"))
    }
}

fn check_reps(reps: usize) -> CliResult<()> {
    if reps == 0 {
        invalid("reps must be positive")
    } else {
        Ok(())
    }
}

/// Common surface used by the loader.
pub trait CommandConfig: Default + Serialize + DeserializeOwned {
    fn set_seed(&mut self, seed: u64);
    fn set_reps(&mut self, reps: usize);
    fn validate(&self) -> CliResult<()>;
}

impl CommandConfig for SyntheticConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_reps(&mut self, reps: usize) {
        self.reps = reps;
    }
    fn validate(&self) -> CliResult<()> {
        check_reps(self.reps)?;
        if self.n_per_cluster == 0 {
            return invalid("n_per_cluster must be positive");
        }
        check_fraction("train_fraction", self.train_fraction)?;
        self.model.validate()?;
        self.train.validate()
    }
}

impl CommandConfig for ClassifyConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_reps(&mut self, reps: usize) {
        self.reps = reps;
    }
    fn validate(&self) -> CliResult<()> {
        check_reps(self.reps)?;
        if self.top == 0 || self.top > self.reps {
            return invalid(&format!("top must lie in 1..={}, got {}", self.reps, self.top));
        }
        if self.fractions.is_empty() {
            return invalid("fractions must not be empty");
        }
        for &f in &self.fractions {
            check_fraction("fraction", f)?;
        }
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

impl CommandConfig for ClusterConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_reps(&mut self, reps: usize) {
        self.reps = reps;
    }
    fn validate(&self) -> CliResult<()> {
        check_reps(self.reps)?;
        check_fraction("train_fraction", self.train_fraction)?;
        if self.clusters == Some(0) {
            return invalid("clusters must be positive");
        }
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

impl CommandConfig for SurvivalConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_reps(&mut self, reps: usize) {
        self.reps = reps;
    }
    fn validate(&self) -> CliResult<()> {
        check_reps(self.reps)?;
        check_fraction("train_fraction", self.train_fraction)?;
        if !(self.validation_fraction >= 0.0 && self.train_fraction + self.validation_fraction < 1.0) {
            return invalid("train_fraction + validation_fraction must stay below 1");
        }
        let total: f64 = self.group_proportions.iter().sum();
        if self.group_proportions.len() < 2 || self.group_proportions.iter().any(|&p| !(p > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return invalid("group_proportions needs at least two positive entries summing to 1");
        }
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

impl CommandConfig for GradcheckConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_reps(&mut self, reps: usize) {
        self.reps = reps;
    }
    fn validate(&self) -> CliResult<()> {
        check_reps(self.reps)?;
        if let Some(name) = &self.corrupt {
            if !affinitynet::gradsuite::check_names().contains(name) {
                return invalid(&format!("unknown check {name:?}"));
            }
        }
        Ok(())
    }
}

/// Overrides given on the command line.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub reps: Option<usize>,
}

/// Built-in defaults, then the file, then the overrides; validated.
pub fn load<C: CommandConfig>(path: Option<&Path>, overrides: Overrides) -> CliResult<C> {
    let mut config: C = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            parse(&text)?
        }
        None => C::default(),
    };
    if let Some(seed) = overrides.seed {
        config.set_seed(seed);
    }
    if let Some(reps) = overrides.reps {
        config.set_reps(reps);
    }
    config.validate()?;
    Ok(config)
}

pub fn parse<C: DeserializeOwned>(text: &str) -> CliResult<C> {
    toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
}

/// The effective config as TOML.
pub fn echo<C: Serialize>(config: &C) -> String {
    toml::to_string(config).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: ClassifyConfig = parse("").unwrap();
        assert_eq!(c, ClassifyConfig::default());
        assert_eq!(c.fractions.len(), 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse::<SyntheticConfig>("sede = 3").is_err());
        assert!(parse::<SyntheticConfig>("[model]\nhiden = 3").is_err());
        assert!(parse::<ClassifyConfig>("[data]\nsource = \"two_class\"\ngapp = 1.0").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = SurvivalConfig::default();
        c.train.early_stop = Some(EarlyStop {
            patience: 3,
            metric: affinitynet::training::StopMetric::TestMetric,
        });
        let back: SurvivalConfig = parse(&echo(&c)).unwrap();
        assert_eq!(back, c);
        for text in [
            echo(&SyntheticConfig::default()),
            echo(&ClassifyConfig::default()),
            echo(&ClusterConfig::default()),
            echo(&GradcheckConfig::default()),
        ] {
            assert!(!text.is_empty());
        }
        let g: GradcheckConfig = parse(&echo(&GradcheckConfig::default())).unwrap();
        assert_eq!(g, GradcheckConfig::default());
    }

    #[test]
    fn overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\nreps = 2\n").unwrap();
        let c: SyntheticConfig = load(Some(&path), Overrides::default()).unwrap();
        assert_eq!((c.seed, c.reps), (4, 2));
        let c: SyntheticConfig = load(
            Some(&path),
            Overrides {
                seed: Some(9),
                reps: None,
            },
        )
        .unwrap();
        assert_eq!((c.seed, c.reps), (9, 2));
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [
            "reps = 0",
            "train_fraction = 1.5",
            "[train]\nlearning_rate = -1.0",
            "[model]\nhidden = 0",
        ];
        for text in bad {
            let c: SyntheticConfig = parse(text).unwrap();
            assert!(c.validate().is_err(), "{text}");
        }
        let c: ClassifyConfig = parse("reps = 5\ntop = 6").unwrap();
        assert!(c.validate().is_err());
        let c: GradcheckConfig = parse("corrupt = \"nope\"").unwrap();
        assert!(c.validate().is_err());
    }
}
