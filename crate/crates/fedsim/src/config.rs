//! Experiment configuration: TOML in, validated spec out.
//!
//! Every field has a documented default, so the empty string is a valid
//! config. Unknown keys are hard errors (typos must not silently fall
//! back to defaults). Serialization round-trips: `parse(serialize(c))`
//! reproduces `c` exactly, which the determinism contract leans on.
//!
//! Defaults follow the reference experiment setup where one is stated
//! (eta_l = 0.1, lr_decay = 0.995); the rest (clients, local steps,
//! batch size, eta_g, rounds) are desk-scale choices, not quoted values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelKind, Direction, PerturbationChannel};
use crate::error::{Error, Result};
use crate::localopt::{Algorithm, HyperParams};
use crate::metrics::SliceMode;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random draw is keyed on it.
    pub seed: u64,
    /// Communication rounds R. 0 is allowed and produces a header-only log.
    pub rounds: u64,
    pub num_clients: usize,
    pub algorithm: Algorithm,
    /// Output directory for run artifacts, relative to the output root.
    pub output_dir: String,
    /// Run clients on a thread pool. Outputs are identical either way.
    pub parallel_clients: bool,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub model: ModelSpec,
    pub hyper: HyperSpec,
    pub uplink: ChannelSpec,
    pub downlink: ChannelSpec,
    pub metrics: MetricsSpec,
    pub landscape: LandscapeSpec,
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            rounds: 100,
            num_clients: 10,
            algorithm: Algorithm::FedAvg,
            output_dir: "out".to_owned(),
            parallel_clients: true,
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::default(),
            model: ModelSpec::default(),
            hyper: HyperSpec::default(),
            uplink: ChannelSpec::default(),
            downlink: ChannelSpec::default(),
            metrics: MetricsSpec::default(),
            landscape: LandscapeSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Synth generator shape.
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub input_dim: usize,
    pub spread: f64,
    /// IDX file paths (required when source = "idx").
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<String>,
    /// Keep only the first N samples after loading; 0 = no cap.
    pub train_cap: usize,
    pub test_cap: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DataSource::Synth,
            num_classes: 5,
            per_class_train: 200,
            per_class_test: 50,
            input_dim: 8,
            spread: 0.6,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_cap: 0,
            test_cap: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    /// Dirichlet concentration; smaller = more skew. Ignored for iid.
    pub alpha: f64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            kind: PartitionKind::Iid,
            alpha: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden width (mlp only).
    pub hidden: usize,
    /// Parameter count and curvature (quadratic only); the input/class
    /// shape of real models comes from the dataset.
    pub dim: usize,
    pub curvature: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            hidden: 16,
            dim: 10,
            curvature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperSpec {
    pub eta_l: f64,
    pub eta_g: f64,
    pub local_steps: usize,
    pub rho: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
}

impl Default for HyperSpec {
    fn default() -> Self {
        HyperSpec {
            eta_l: 0.1,
            eta_g: 1.0,
            local_steps: 5,
            rho: 0.3,
            batch_size: 32,
            lr_decay: 0.995,
        }
    }
}

impl HyperSpec {
    pub fn to_hyper(&self) -> HyperParams {
        HyperParams {
            eta_l: self.eta_l,
            eta_g: self.eta_g,
            local_steps: self.local_steps,
            rho: self.rho,
            batch_size: self.batch_size,
            lr_decay: self.lr_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    /// Exact error norm (gaussian_fixed_norm) or per-coordinate std
    /// (gaussian_iid).
    pub strength: f64,
    /// Grid points (quantization only).
    pub levels: usize,
    /// Norm bound and relative noise std (dp_clip_gauss only).
    pub clip: f64,
    pub sigma: f64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            kind: ChannelKind::None,
            strength: 0.0,
            levels: 16,
            clip: 1.0,
            sigma: 0.1,
        }
    }
}

impl ChannelSpec {
    pub fn build(&self, direction: Direction) -> Result<PerturbationChannel> {
        match self.kind {
            ChannelKind::None => Ok(PerturbationChannel::none(direction)),
            ChannelKind::GaussianFixedNorm => {
                PerturbationChannel::gaussian_fixed_norm(self.strength, direction)
            }
            ChannelKind::GaussianIid => {
                PerturbationChannel::gaussian_iid(self.strength, direction)
            }
            ChannelKind::Quantization => {
                PerturbationChannel::quantization(self.levels, direction)
            }
            ChannelKind::DpClipGauss => {
                PerturbationChannel::dp_clip_gauss(self.clip, self.sigma, direction)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    /// Evaluate loss/accuracy every k rounds (the final round always).
    pub eval_stride: u64,
    /// Track the squared global gradient norm each evaluated round.
    pub track_grad_norm: bool,
    /// Random probes for the per-round sharpness estimate; 0 disables it.
    pub sharpness_probes: usize,
    pub sharpness_rho: f64,
    /// Mini-batch draws per client for assumption estimation; 0 disables.
    pub assumption_batches: usize,
    pub assumption_batch_size: usize,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec {
            eval_stride: 1,
            track_grad_norm: true,
            sharpness_probes: 0,
            sharpness_rho: 0.5,
            assumption_batches: 0,
            assumption_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSpec {
    pub mode: SliceMode,
    pub extent: f64,
    pub resolution: usize,
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        LandscapeSpec {
            mode: SliceMode::TwoD,
            extent: 1.0,
            resolution: 51,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Dump the final model as a binary vector next to the CSVs.
    pub save_model: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { save_model: false }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::config("num_clients", "must be >= 1"));
        }
        self.dataset.validate()?;
        self.partition.validate()?;
        self.model.validate(&self.dataset)?;
        validate_hyper(&self.hyper)?;
        validate_channel(&self.uplink, "uplink")?;
        validate_channel(&self.downlink, "downlink")?;
        self.metrics.validate()?;
        self.landscape.validate()?;
        Ok(())
    }

    /// Input width the configured model sees.
    pub fn input_dim(&self) -> usize {
        self.dataset.input_dim
    }

    /// Instantiates the configured model against the dataset shape.
    pub fn build_model(&self, input_dim: usize, num_classes: usize) -> Result<Model> {
        match self.model.kind {
            ModelKind::Logistic => Model::logistic(input_dim, num_classes),
            ModelKind::Mlp => Model::mlp(input_dim, self.model.hidden, num_classes),
            ModelKind::Quadratic => {
                crate::model::quadratic_test_model(self.model.dim, self.model.curvature)
            }
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        match self.source {
            DataSource::Synth => {
                if self.num_classes < 2 {
                    return Err(Error::config("dataset.num_classes", "must be >= 2"));
                }
                if self.per_class_train < 1 || self.per_class_test < 1 {
                    return Err(Error::config(
                        "dataset.per_class_train/per_class_test",
                        "must be >= 1",
                    ));
                }
                if self.input_dim < 1 {
                    return Err(Error::config("dataset.input_dim", "must be >= 1"));
                }
                if !(self.spread > 0.0) {
                    return Err(Error::config("dataset.spread", "must be > 0"));
                }
            }
            DataSource::Idx => {
                for (key, value) in [
                    ("dataset.train_images", &self.train_images),
                    ("dataset.train_labels", &self.train_labels),
                    ("dataset.test_images", &self.test_images),
                    ("dataset.test_labels", &self.test_labels),
                ] {
                    if value.is_none() {
                        return Err(Error::config(key, "required when source = \"idx\""));
                    }
                }
            }
        }
        Ok(())
    }
}

impl PartitionSpec {
    fn validate(&self) -> Result<()> {
        if self.kind == PartitionKind::Dirichlet && !(self.alpha > 0.0) {
            return Err(Error::config("partition.alpha", "must be > 0"));
        }
        Ok(())
    }
}

impl ModelSpec {
    fn validate(&self, _dataset: &DatasetSpec) -> Result<()> {
        match self.kind {
            ModelKind::Mlp if self.hidden < 1 => {
                Err(Error::config("model.hidden", "must be >= 1"))
            }
            ModelKind::Quadratic if self.dim < 1 => {
                Err(Error::config("model.dim", "must be >= 1"))
            }
            ModelKind::Quadratic if !(self.curvature > 0.0) => {
                Err(Error::config("model.curvature", "must be > 0"))
            }
            _ => Ok(()),
        }
    }
}

fn validate_hyper(h: &HyperSpec) -> Result<()> {
    if !(h.eta_l > 0.0) || !h.eta_l.is_finite() {
        return Err(Error::config("hyper.eta_l", "must be > 0 and finite"));
    }
    if !(h.eta_g > 0.0) || !h.eta_g.is_finite() {
        return Err(Error::config("hyper.eta_g", "must be > 0 and finite"));
    }
    if h.local_steps < 1 {
        return Err(Error::config("hyper.local_steps", "must be >= 1"));
    }
    if !(h.rho >= 0.0) || !h.rho.is_finite() {
        return Err(Error::config("hyper.rho", "must be >= 0 and finite"));
    }
    if h.batch_size < 1 {
        return Err(Error::config("hyper.batch_size", "must be >= 1"));
    }
    if !(h.lr_decay > 0.0 && h.lr_decay <= 1.0) {
        return Err(Error::config("hyper.lr_decay", "must be in (0, 1]"));
    }
    Ok(())
}

fn validate_channel(c: &ChannelSpec, link: &str) -> Result<()> {
    let key = |field: &str| format!("{link}.{field}");
    match c.kind {
        ChannelKind::None => {}
        ChannelKind::GaussianFixedNorm | ChannelKind::GaussianIid => {
            if !(c.strength >= 0.0) || !c.strength.is_finite() {
                return Err(Error::Config {
                    key: key("strength"),
                    reason: "must be >= 0 and finite".to_owned(),
                });
            }
        }
        ChannelKind::Quantization => {
            if c.levels < 2 {
                return Err(Error::Config {
                    key: key("levels"),
                    reason: "must be >= 2".to_owned(),
                });
            }
        }
        ChannelKind::DpClipGauss => {
            if !(c.clip > 0.0) {
                return Err(Error::Config {
                    key: key("clip"),
                    reason: "must be > 0".to_owned(),
                });
            }
            if !(c.sigma >= 0.0) {
                return Err(Error::Config {
                    key: key("sigma"),
                    reason: "must be >= 0".to_owned(),
                });
            }
        }
    }
    Ok(())
}

impl MetricsSpec {
    fn validate(&self) -> Result<()> {
        if self.eval_stride < 1 {
            return Err(Error::config("metrics.eval_stride", "must be >= 1"));
        }
        if self.sharpness_probes > 0 && !(self.sharpness_rho > 0.0) {
            return Err(Error::config("metrics.sharpness_rho", "must be > 0"));
        }
        if self.assumption_batches == 1 {
            return Err(Error::config(
                "metrics.assumption_batches",
                "must be 0 (off) or >= 2",
            ));
        }
        if self.assumption_batches > 0 && self.assumption_batch_size < 1 {
            return Err(Error::config("metrics.assumption_batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

impl LandscapeSpec {
    fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) {
            return Err(Error::config("landscape.extent", "must be > 0"));
        }
        if self.resolution % 2 == 0 {
            return Err(Error::config("landscape.resolution", "must be odd"));
        }
        Ok(())
    }
}

/// Parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical serialization; `parse(serialize(c)) == c`.
pub fn serialize_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::ConfigParse(e.to_string()))
}

/// A base config plus per-axis override lists; cells are the cartesian
/// product. An empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axes: SweepAxes,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub algorithm: Vec<Algorithm>,
    pub rho: Vec<f64>,
    /// Dirichlet alpha values; any entry switches the partition kind.
    pub alpha: Vec<f64>,
    /// gaussian_fixed_norm strengths; 0 means a clean link.
    pub uplink_strength: Vec<f64>,
    pub downlink_strength: Vec<f64>,
    pub seed: Vec<u64>,
}

/// One sweep cell: a stable label (used as the output subdirectory) and
/// the fully resolved config.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub config: ExperimentConfig,
}

impl SweepSpec {
    /// Expands the cartesian product in a fixed axis order, validating
    /// every cell.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        let algorithms: Vec<Option<Algorithm>> = option_axis(&self.axes.algorithm);
        let rhos = option_axis(&self.axes.rho);
        let alphas = option_axis(&self.axes.alpha);
        let ups = option_axis(&self.axes.uplink_strength);
        let downs = option_axis(&self.axes.downlink_strength);
        let seeds = option_axis(&self.axes.seed);

        let mut cells = Vec::new();
        for &algorithm in &algorithms {
            for &rho in &rhos {
                for &alpha in &alphas {
                    for &up in &ups {
                        for &down in &downs {
                            for &seed in &seeds {
                                let mut cfg = self.base.clone();
                                let mut label = Vec::new();
                                if let Some(a) = algorithm {
                                    cfg.algorithm = a;
                                    label.push(format!("alg={a}"));
                                }
                                if let Some(r) = rho {
                                    cfg.hyper.rho = r;
                                    label.push(format!("rho={r}"));
                                }
                                if let Some(a) = alpha {
                                    cfg.partition.kind = PartitionKind::Dirichlet;
                                    cfg.partition.alpha = a;
                                    label.push(format!("alpha={a}"));
                                }
                                if let Some(s) = up {
                                    cfg.uplink = strength_channel(s);
                                    label.push(format!("up={s}"));
                                }
                                if let Some(s) = down {
                                    cfg.downlink = strength_channel(s);
                                    label.push(format!("down={s}"));
                                }
                                if let Some(s) = seed {
                                    cfg.seed = s;
                                    label.push(format!("seed={s}"));
                                }
                                cfg.validate()?;
                                let label = if label.is_empty() {
                                    "base".to_owned()
                                } else {
                                    label.join("_")
                                };
                                cells.push(SweepCell { label, config: cfg });
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

fn option_axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

fn strength_channel(strength: f64) -> ChannelSpec {
    ChannelSpec {
        kind: if strength == 0.0 {
            ChannelKind::None
        } else {
            ChannelKind::GaussianFixedNorm
        },
        strength,
        ..ChannelSpec::default()
    }
}

pub fn parse_sweep(path: &Path) -> Result<SweepSpec> {
    parse_sweep_str(&std::fs::read_to_string(path)?)
}

pub fn parse_sweep_str(text: &str) -> Result<SweepSpec> {
    let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    spec.base.validate()?;
    spec.cells()?;
    Ok(spec)
}
