//! Experiment configuration files (TOML, or JSON with the same schema).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wafl_core::attacks::AttackConfig;
use wafl_core::data::{gen_synthetic_mixture, load_csv, load_idx, partition_noniid, translate, LabeledExample};
use wafl_core::fl_engine::{AlgorithmVariant, EvalConfig, TrainConfig, WeightsMode, DEFAULT_ETA_MLP, DEFAULT_ETA_MLR};
use wafl_core::model::{Activation, ModelKind};
use wafl_core::{FederationData, LossKind, ModelSpec, OtConfig, ProbabilityVector, SurrogateConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<SourceConfig>,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ot: Option<OtConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_adapt: Option<DomainAdaptSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Synthetic {
        #[serde(default = "d_classes")]
        num_classes: usize,
        #[serde(default = "d_dim")]
        feature_dim: usize,
        #[serde(default = "d_examples")]
        num_examples: usize,
        #[serde(default = "d_separation")]
        separation: f64,
        /// Added to every feature vector.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shift: Option<Vec<f64>>,
        /// Added to the root seed for this source's samples.
        #[serde(default)]
        seed_offset: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_examples: Option<usize>,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "d_true")]
        classification: bool,
    },
}

fn d_classes() -> usize {
    4
}
fn d_dim() -> usize {
    10
}
fn d_examples() -> usize {
    2000
}
fn d_separation() -> f64 {
    3.0
}
fn d_true() -> bool {
    true
}

impl SourceConfig {
    fn is_image(&self) -> bool {
        matches!(self, SourceConfig::Idx { .. })
    }

    /// Makes relative paths relative to `base`.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            SourceConfig::Synthetic { .. } => {}
            SourceConfig::Idx { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            SourceConfig::Csv { path, .. } => fix(path),
        }
    }

    fn check(&self, key: &str) -> Result<(), CliError> {
        let exists = |p: &Path, field: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{key}.{field}: file not found: {}", p.display())))
            }
        };
        match self {
            SourceConfig::Synthetic {
                num_classes,
                feature_dim,
                num_examples,
                shift,
                ..
            } => {
                if !(2..=10).contains(num_classes) {
                    return Err(CliError::Config(format!("{key}.num_classes: must lie in [2, 10]")));
                }
                if *feature_dim == 0 || *num_examples == 0 {
                    return Err(CliError::Config(format!("{key}: feature_dim and num_examples must be positive")));
                }
                if let Some(s) = shift {
                    if s.len() != *feature_dim {
                        return Err(CliError::Config(format!(
                            "{key}.shift: expected {feature_dim} entries, got {}",
                            s.len()
                        )));
                    }
                }
                Ok(())
            }
            SourceConfig::Idx { images, labels, .. } => {
                exists(images, "images")?;
                exists(labels, "labels")
            }
            SourceConfig::Csv { path, .. } => exists(path, "path"),
        }
    }

    pub fn load(&self, root_seed: u64) -> wafl_core::Result<Vec<LabeledExample>> {
        match self {
            SourceConfig::Synthetic {
                num_classes,
                feature_dim,
                num_examples,
                separation,
                shift,
                seed_offset,
            } => {
                let pool = gen_synthetic_mixture(
                    *num_classes,
                    *feature_dim,
                    *num_examples,
                    *separation,
                    root_seed.wrapping_add(*seed_offset),
                )?;
                Ok(match shift {
                    Some(s) => translate(&pool, s),
                    None => pool,
                })
            }
            SourceConfig::Idx {
                images,
                labels,
                max_examples,
            } => {
                let mut pool = load_idx(images, labels)?;
                if let Some(cap) = max_examples {
                    pool.truncate(*cap);
                }
                Ok(pool)
            }
            SourceConfig::Csv { path, classification } => load_csv(path, *classification),
        }
    }

    /// Feature dimension and class count implied by the loaded pool.
    pub fn shape(pool: &[LabeledExample], classification: bool) -> (usize, usize) {
        let dim = pool.first().map_or(0, |e| e.x.len());
        let classes = if classification {
            pool.iter().filter_map(|e| e.y.class()).max().map_or(1, |c| c + 1)
        } else {
            1
        };
        (dim, classes)
    }

    fn classification(&self) -> bool {
        !matches!(self, SourceConfig::Csv { classification: false, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default = "d_clients")]
    pub num_clients: usize,
    #[serde(default = "d_lpc")]
    pub labels_per_client: usize,
    #[serde(default = "d_dispersion")]
    pub size_dispersion: f64,
}

fn d_clients() -> usize {
    10
}
fn d_lpc() -> usize {
    2
}
fn d_dispersion() -> f64 {
    0.5
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            num_clients: d_clients(),
            labels_per_client: d_lpc(),
            size_dispersion: d_dispersion(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    #[default]
    Mlr,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub kind: ModelName,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub l2_reg: f64,
}

impl ModelSection {
    pub fn spec(&self, feature_dim: usize, num_classes: usize) -> ModelSpec {
        let kind = match self.kind {
            ModelName::Mlr => ModelKind::Mlr,
            ModelName::Mlp => ModelKind::Mlp {
                hidden_dims: self.hidden_dims.clone(),
                activation: self.activation,
            },
        };
        ModelSpec {
            kind,
            feature_dim,
            num_classes,
            l2_reg: self.l2_reg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    #[default]
    Fedavg,
    Wafl,
    Fedfgsm,
    Fedpgd,
    Agnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightsSpec {
    Named(String),
    Explicit(Vec<f64>),
}

impl Default for WeightsSpec {
    fn default() -> Self {
        WeightsSpec::Named("data_proportional".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_local_steps")]
    pub local_steps: usize,
    /// Defaults to 0.05 for MLR and 0.01 for MLP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default = "d_cpr")]
    pub clients_per_round: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub variant: VariantName,
    #[serde(default)]
    pub weights: WeightsSpec,
    #[serde(default = "d_lambda_lr")]
    pub lambda_lr: f64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_sample_cap: Option<usize>,
}

fn d_rounds() -> usize {
    200
}
fn d_local_steps() -> usize {
    2
}
fn d_cpr() -> usize {
    10
}
fn d_batch() -> usize {
    64
}
fn d_lambda_lr() -> f64 {
    0.01
}
fn d_eval_every() -> usize {
    1
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            rounds: d_rounds(),
            local_steps: d_local_steps(),
            eta: None,
            clients_per_round: d_cpr(),
            batch_size: d_batch(),
            variant: VariantName::Fedavg,
            weights: WeightsSpec::default(),
            lambda_lr: d_lambda_lr(),
            loss: LossKind::CrossEntropy,
            eval_every: d_eval_every(),
            rho_sample_cap: None,
        }
    }
}

/// `[attack]`: PGD shift for evaluation and the FedFGSM/FedPGD threat model.
/// Clipping defaults to [0, 1] for IDX image data and to none otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_max: Option<f64>,
    #[serde(default)]
    pub attacked_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainAdaptSection {
    pub sources: Vec<SourceConfig>,
    pub target: SourceConfig,
    #[serde(default = "d_subsample")]
    pub distance_subsample: usize,
}

fn d_subsample() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "d_out")]
    pub dir: PathBuf,
    #[serde(default = "d_true")]
    pub checkpoint: bool,
}

fn d_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: d_out(),
            checkpoint: true,
        }
    }
}

/// Parses a config file; `.json` files use JSON, everything else TOML.
/// Relative data paths are resolved against the file's directory.
pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(d) = &mut cfg.dataset {
        d.rebase(base);
    }
    if let Some(da) = &mut cfg.domain_adapt {
        da.sources.iter_mut().for_each(|s| s.rebase(base));
        da.target.rebase(base);
    }
    Ok(cfg)
}

fn cfg_err(key: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {e}"))
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unprintable config: {e}\n"))
    }

    pub fn dataset(&self) -> Result<&SourceConfig, CliError> {
        self.dataset
            .as_ref()
            .ok_or_else(|| CliError::Config("missing key `dataset`".into()))
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        self.surrogate.clone().unwrap_or_else(|| SurrogateConfig::new(1.0))
    }

    pub fn attack(&self, image_data: bool) -> Option<AttackConfig> {
        self.attack.as_ref().map(|a| {
            let (clip_min, clip_max) = match (a.clip_min, a.clip_max, image_data) {
                (None, None, true) => (Some(0.0), Some(1.0)),
                (lo, hi, _) => (lo, hi),
            };
            AttackConfig {
                epsilon: a.epsilon,
                alpha: a.alpha,
                steps: a.steps,
                clip_min,
                clip_max,
                attacked_fraction: a.attacked_fraction,
                seed: self.seed,
            }
        })
    }

    fn eta(&self) -> f64 {
        self.train.eta.unwrap_or(match self.model.kind {
            ModelName::Mlr => DEFAULT_ETA_MLR,
            ModelName::Mlp => DEFAULT_ETA_MLP,
        })
    }

    /// Resolves the `[train]` section for a federation of `num_clients`.
    pub fn train_config(&self, num_clients: usize, image_data: bool) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let attack = self.attack(image_data);
        let need_attack = || attack.clone().ok_or_else(|| cfg_err("attack", "required by train.variant"));
        let variant = match t.variant {
            VariantName::Fedavg => AlgorithmVariant::FedAvg,
            VariantName::Wafl => AlgorithmVariant::Wafl(self.surrogate()),
            VariantName::Fedfgsm => AlgorithmVariant::FedFgsm(need_attack()?),
            VariantName::Fedpgd => AlgorithmVariant::FedPgd(need_attack()?),
            VariantName::Agnostic => AlgorithmVariant::AgnosticAscent { lambda_lr: t.lambda_lr },
        };
        let weights_mode = match &t.weights {
            WeightsSpec::Named(n) if n == "data_proportional" => WeightsMode::DataProportional,
            WeightsSpec::Named(n) if n == "uniform" => WeightsMode::Uniform,
            WeightsSpec::Named(n) => {
                return Err(cfg_err(
                    "train.weights",
                    format!("expected \"data_proportional\", \"uniform\" or a list, got \"{n}\""),
                ))
            }
            WeightsSpec::Explicit(w) => {
                WeightsMode::Explicit(ProbabilityVector::new(w.clone()).map_err(|e| cfg_err("train.weights", e))?)
            }
        };
        let cfg = TrainConfig {
            rounds: t.rounds,
            local_steps: t.local_steps,
            eta: self.eta(),
            clients_per_round: t.clients_per_round,
            batch_size: t.batch_size,
            variant,
            weights_mode,
            seed: self.seed,
            loss: t.loss,
            eval: EvalConfig {
                every: t.eval_every,
                shift: attack,
                rho_sample_cap: t.rho_sample_cap,
            },
        };
        cfg.validate(num_clients).map_err(|e| cfg_err("train", e))?;
        if let WeightsMode::Explicit(w) = &cfg.weights_mode {
            if w.len() != num_clients {
                return Err(cfg_err(
                    "train.weights",
                    format!("expected {num_clients} entries, got {}", w.len()),
                ));
            }
        }
        Ok(cfg)
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate_for_federation(&self) -> Result<(), CliError> {
        let ds = self.dataset()?;
        ds.check("dataset")?;
        let p = &self.partition;
        if p.num_clients == 0 || p.labels_per_client == 0 {
            return Err(cfg_err("partition", "num_clients and labels_per_client must be positive"));
        }
        if !(p.size_dispersion >= 0.0 && p.size_dispersion.is_finite()) {
            return Err(cfg_err("partition.size_dispersion", "must be finite and nonnegative"));
        }
        if self.model.kind == ModelName::Mlp && self.model.hidden_dims.is_empty() {
            return Err(cfg_err("model.hidden_dims", "an MLP needs at least one hidden layer"));
        }
        if let Some(s) = &self.surrogate {
            s.validate().map_err(|e| cfg_err("surrogate", e))?;
        }
        if let Some(a) = self.attack(ds.is_image()) {
            a.validate().map_err(|e| cfg_err("attack", e))?;
        }
        if let Some(o) = &self.ot {
            o.validate().map_err(|e| cfg_err("ot", e))?;
        }
        self.train_config(p.num_clients, ds.is_image())?;
        Ok(())
    }

    pub fn validate_domain_adapt(&self) -> Result<&DomainAdaptSection, CliError> {
        let da = self
            .domain_adapt
            .as_ref()
            .ok_or_else(|| CliError::Config("missing key `domain_adapt`".into()))?;
        if da.sources.len() < 2 {
            return Err(CliError::Config("domain_adapt.sources: need ≥ 2 sources".into()));
        }
        for (i, s) in da.sources.iter().enumerate() {
            s.check(&format!("domain_adapt.sources[{i}]"))?;
        }
        da.target.check("domain_adapt.target")?;
        if da.distance_subsample < 2 {
            return Err(cfg_err("domain_adapt.distance_subsample", "must be at least 2"));
        }
        self.surrogate().validate().map_err(|e| cfg_err("surrogate", e))?;
        self.ot.clone().unwrap_or_default().validate().map_err(|e| cfg_err("ot", e))?;
        // clients_per_round is capped at the number of sources when training
        self.train_config(da.sources.len().max(self.train.clients_per_round), false)?;
        Ok(da)
    }

    pub fn image_data(&self) -> bool {
        self.dataset.as_ref().is_some_and(SourceConfig::is_image)
    }
}

/// Loaded federation together with the model it implies.
pub struct Prepared {
    pub federation: FederationData,
    pub spec: ModelSpec,
    pub train: TrainConfig,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    cfg.validate_for_federation()?;
    let ds = cfg.dataset()?;
    let pool = ds.load(cfg.seed).map_err(CliError::Runtime)?;
    let (dim, classes) = SourceConfig::shape(&pool, ds.classification());
    let p = &cfg.partition;
    let federation = partition_noniid(&pool, p.num_clients, p.labels_per_client, p.size_dispersion, cfg.seed)
        .map_err(CliError::Runtime)?;
    let spec = cfg.model.spec(dim, if cfg.train.loss == LossKind::Square { 1 } else { classes });
    spec.validate().map_err(|e| cfg_err("model", e))?;
    let train = cfg.train_config(federation.num_clients(), ds.is_image())?;
    Ok(Prepared { federation, spec, train })
}
