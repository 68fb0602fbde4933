//! Experiment pipelines: γ sweeps, attacked-fraction sweeps, the
//! domain-adaptation comparison and the desk-scale dataset presets.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, shift_test_sets, AttackConfig};
use crate::data::{
    gen_synthetic_mixture, load_idx, partition_noniid, subsample, ClientDataset, FederationData, LabeledExample,
};
use crate::error::{Error, Result};
use crate::fl_engine::{evaluate, evaluate_examples, run_federated, AlgorithmVariant, TrainConfig, WeightsMode};
use crate::math::{dist_sq, ProbabilityVector};
use crate::model::{ModelParams, ModelSpec};
use crate::ot::{pairwise_dataset_distance, select_lambda_domain_adaptation, OtConfig};
use crate::surrogate::{avg_worst_case_perturbation, SurrogateConfig};

// ---------------------------------------------------------------------------
// Presets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPreset {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_examples")]
    pub num_examples: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    #[serde(default = "default_labels_per_client")]
    pub labels_per_client: usize,
    #[serde(default = "default_dispersion")]
    pub size_dispersion: f64,
}

fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    10
}
fn default_examples() -> usize {
    2000
}
fn default_separation() -> f64 {
    3.0
}
fn default_clients() -> usize {
    10
}
fn default_labels_per_client() -> usize {
    2
}
fn default_dispersion() -> f64 {
    0.5
}

impl Default for SyntheticPreset {
    fn default() -> Self {
        Self {
            num_classes: default_classes(),
            feature_dim: default_dim(),
            num_examples: default_examples(),
            separation: default_separation(),
            num_clients: default_clients(),
            labels_per_client: default_labels_per_client(),
            size_dispersion: default_dispersion(),
        }
    }
}

impl SyntheticPreset {
    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.num_classes) {
            return Err(Error::invalid("synthetic preset supports 2 to 10 classes"));
        }
        if self.feature_dim == 0 || self.num_examples == 0 || self.num_clients == 0 {
            return Err(Error::invalid("synthetic preset sizes must be positive"));
        }
        Ok(())
    }

    pub fn build(&self, seed: u64) -> Result<FederationData> {
        self.validate()?;
        let pool = gen_synthetic_mixture(self.num_classes, self.feature_dim, self.num_examples, self.separation, seed)?;
        partition_noniid(&pool, self.num_clients, self.labels_per_client, self.size_dispersion, seed)
    }

    pub fn model(&self, l2_reg: f64) -> ModelSpec {
        ModelSpec::mlr(self.feature_dim, self.num_classes, l2_reg)
    }
}

pub const MNIST_SMALL_CLIENTS: usize = 20;
pub const MNIST_SMALL_LABELS_PER_CLIENT: usize = 2;
pub const MNIST_SMALL_EXAMPLES: usize = 10_000;

/// The "mnist-small" preset: the first 10k IDX examples split among 20
/// clients with two labels each; pair with `ModelSpec::mlr(784, 10, _)`.
pub fn mnist_small(images: impl AsRef<Path>, labels: impl AsRef<Path>, seed: u64) -> Result<FederationData> {
    let mut pool = load_idx(images, labels)?;
    pool.truncate(MNIST_SMALL_EXAMPLES);
    partition_noniid(&pool, MNIST_SMALL_CLIENTS, MNIST_SMALL_LABELS_PER_CLIENT, 0.0, seed)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma,
    Fraction,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Gamma => "gamma",
            SweepAxis::Fraction => "fraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis_value: f64,
    pub variant: String,
    pub clean_acc: f64,
    pub clean_loss: f64,
    pub shifted_acc: Option<f64>,
    pub shifted_loss: Option<f64>,
    pub rho_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub records: Vec<SweepRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepResult {
    /// Records of one variant in axis order.
    pub fn column(&self, variant: &str) -> Vec<&SweepRecord> {
        self.records.iter().filter(|r| r.variant == variant).collect()
    }

    /// CSV with header `<axis>,variant,clean_acc,clean_loss,shifted_acc,shifted_loss,rho_hat`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record([
            self.axis.name(),
            "variant",
            "clean_acc",
            "clean_loss",
            "shifted_acc",
            "shifted_loss",
            "rho_hat",
        ])
        .map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.axis_value.to_string(),
                r.variant.clone(),
                r.clean_acc.to_string(),
                r.clean_loss.to_string(),
                opt(r.shifted_acc),
                opt(r.shifted_loss),
                opt(r.rho_hat),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSweepOptions {
    /// Training examples per client used for `ρ̂`.
    pub rho_sample_cap: usize,
    /// Surrogate settings other than γ; `gamma` is overwritten per point.
    pub surrogate: SurrogateConfig,
}

impl Default for GammaSweepOptions {
    fn default() -> Self {
        Self {
            rho_sample_cap: 50,
            surrogate: SurrogateConfig::new(1.0),
        }
    }
}

/// Trains WAFL at each γ of an ascending grid and records final clean (and
/// optionally shifted) metrics together with `ρ̂` at the trained model.
pub fn gamma_sweep(
    federation: &FederationData,
    spec: &ModelSpec,
    base: &TrainConfig,
    gamma_grid: &[f64],
    attack: Option<&AttackConfig>,
    opts: &GammaSweepOptions,
) -> Result<SweepResult> {
    if gamma_grid.is_empty() {
        return Err(Error::invalid("gamma grid is empty"));
    }
    if gamma_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("gamma grid must be strictly ascending"));
    }
    if opts.rho_sample_cap == 0 {
        return Err(Error::invalid("rho_sample_cap must be at least 1"));
    }
    let records = gamma_grid
        .par_iter()
        .map(|&gamma| {
            let surrogate = SurrogateConfig {
                gamma,
                ..opts.surrogate.clone()
            };
            let mut cfg = base.clone().with_variant(AlgorithmVariant::Wafl(surrogate.clone()));
            cfg.eval.every = 0;
            cfg.eval.rho_sample_cap = None;
            cfg.eval.shift = attack.cloned();
            let out = run_federated(federation, spec, &cfg)?;
            let last = out.logs.last().expect("at least one round");
            let rho = avg_worst_case_perturbation(
                federation,
                spec,
                &out.params,
                &surrogate,
                cfg.loss,
                opts.rho_sample_cap,
                cfg.seed,
            )?;
            Ok(SweepRecord {
                axis_value: gamma,
                variant: "wafl".into(),
                clean_acc: last.clean_acc.unwrap_or(f64::NAN),
                clean_loss: last.clean_loss.unwrap_or(f64::NAN),
                shifted_acc: last.shifted_acc,
                shifted_loss: last.shifted_loss,
                rho_hat: Some(rho),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        axis: SweepAxis::Gamma,
        records,
    })
}

/// Trains each configuration once, then evaluates it with the test sets of
/// `round(f·m)` attacked clients PGD-shifted, for every fraction `f`.
/// Records are ordered by fraction, then by configuration.
pub fn robustness_sweep(
    federation: &FederationData,
    spec: &ModelSpec,
    configs: &[TrainConfig],
    attack: &AttackConfig,
    fractions: &[f64],
) -> Result<SweepResult> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::invalid("fractions must lie in [0, 1]"));
    }
    attack.validate()?;
    let trained = configs
        .par_iter()
        .map(|cfg| {
            let mut cfg = cfg.clone();
            cfg.eval.every = 0;
            cfg.eval.shift = None;
            cfg.eval.rho_sample_cap = None;
            let out = run_federated(federation, spec, &cfg)?;
            let clean = evaluate(federation, spec, &out.params, cfg.loss)?;
            Ok((cfg, out.params, clean))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(fractions.len() * configs.len());
    for &f in fractions {
        let rows = trained
            .par_iter()
            .map(|(cfg, params, clean)| {
                let shifted = shift_test_sets(federation, spec, params, &attack.clone().with_fraction(f), cfg.loss)?;
                let s = evaluate(&shifted, spec, params, cfg.loss)?;
                Ok(SweepRecord {
                    axis_value: f,
                    variant: cfg.variant.name().into(),
                    clean_acc: clean.accuracy,
                    clean_loss: clean.loss,
                    shifted_acc: Some(s.accuracy),
                    shifted_loss: Some(s.loss),
                    rho_hat: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(rows);
    }
    Ok(SweepResult {
        axis: SweepAxis::Fraction,
        records,
    })
}

/// The five compared variants sharing one base configuration.
pub fn standard_variants(base: &TrainConfig, gamma: f64, adversarial: &AttackConfig, lambda_lr: f64) -> Vec<TrainConfig> {
    let fgsm = AttackConfig {
        steps: 1,
        alpha: adversarial.epsilon,
        ..adversarial.clone()
    };
    [
        AlgorithmVariant::FedAvg,
        AlgorithmVariant::Wafl(SurrogateConfig::new(gamma)),
        AlgorithmVariant::FedFgsm(fgsm),
        AlgorithmVariant::FedPgd(adversarial.clone()),
        AlgorithmVariant::AgnosticAscent { lambda_lr },
    ]
    .into_iter()
    .map(|v| base.clone().with_variant(v))
    .collect()
}

// ---------------------------------------------------------------------------
// Domain adaptation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAdaptConfig {
    /// Base training settings; variant and weights are set per method.
    pub train: TrainConfig,
    pub surrogate: SurrogateConfig,
    pub ot: OtConfig,
    /// Points per dataset used for the transport distances.
    pub distance_subsample: usize,
    pub lambda_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub target_acc: f64,
    pub target_loss: f64,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAdaptReport {
    /// Entropic `W₂²(source_i, target)`.
    pub distances: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub rho_star_sq: f64,
    pub methods: Vec<MethodResult>,
}

impl DomainAdaptReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// CSV with header `method,target_acc,target_loss,lambda_json`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(["method", "target_acc", "target_loss", "lambda_json"]).map_err(csv_err)?;
        for m in &self.methods {
            w.write_record([
                m.method.clone(),
                m.target_acc.to_string(),
                m.target_loss.to_string(),
                serde_json::to_string(&m.lambda)?,
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const DA_WAFL: &str = "wafl_lambda_star";
pub const DA_FEDAVG_PROPORTIONAL: &str = "fedavg_proportional";
pub const DA_FEDAVG_UNIFORM: &str = "fedavg_uniform";
pub const DA_AGNOSTIC: &str = "agnostic";

/// Picks `λ*` from source-to-target transport costs, trains WAFL with it and
/// compares target accuracy against FedAvg (data-proportional and uniform
/// weights) and the agnostic λ-ascent baseline. Each source is one client
/// whose whole dataset is used for training.
pub fn domain_adaptation_eval(
    sources: &[Vec<LabeledExample>],
    target: &[LabeledExample],
    spec: &ModelSpec,
    cfg: &DomainAdaptConfig,
) -> Result<DomainAdaptReport> {
    if sources.len() < 2 {
        return Err(Error::invalid("need ≥ 2 sources"));
    }
    if target.is_empty() || sources.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyExamples);
    }
    let distances = sources
        .par_iter()
        .map(|s| pairwise_dataset_distance(s, target, &cfg.ot, cfg.distance_subsample, cfg.train.seed))
        .collect::<Result<Vec<_>>>()?;
    let selection = select_lambda_domain_adaptation(&distances)?;

    let clients = sources
        .iter()
        .enumerate()
        .map(|(i, s)| ClientDataset {
            client_id: i,
            train: s.clone(),
            test: Vec::new(),
        })
        .collect();
    let federation = FederationData::new(clients, spec.feature_dim, spec.num_classes)?;

    let methods: Vec<(&str, AlgorithmVariant, WeightsMode)> = vec![
        (
            DA_WAFL,
            AlgorithmVariant::Wafl(cfg.surrogate.clone()),
            WeightsMode::Explicit(selection.lambda.clone()),
        ),
        (DA_FEDAVG_PROPORTIONAL, AlgorithmVariant::FedAvg, WeightsMode::DataProportional),
        (DA_FEDAVG_UNIFORM, AlgorithmVariant::FedAvg, WeightsMode::Uniform),
        (
            DA_AGNOSTIC,
            AlgorithmVariant::AgnosticAscent {
                lambda_lr: cfg.lambda_lr,
            },
            WeightsMode::Uniform,
        ),
    ];
    let target_refs: Vec<&LabeledExample> = target.iter().collect();
    let results = methods
        .into_par_iter()
        .map(|(name, variant, weights)| {
            let mut train = cfg.train.clone().with_variant(variant);
            train.weights_mode = weights;
            train.eval.every = 0;
            train.eval.shift = None;
            train.eval.rho_sample_cap = None;
            if train.clients_per_round > federation.num_clients() {
                train.clients_per_round = federation.num_clients();
            }
            let out = run_federated(&federation, spec, &train)?;
            let m = evaluate_examples(&target_refs, spec, &out.params, train.loss)?;
            Ok(MethodResult {
                method: name.into(),
                target_acc: m.accuracy,
                target_loss: m.loss,
                lambda: out.lambda.into_inner(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainAdaptReport {
        distances,
        lambda_star: selection.lambda.into_inner(),
        rho_star_sq: selection.rho_star_sq,
        methods: results,
    })
}

// ---------------------------------------------------------------------------
// γ ↔ ε correspondence

/// Mean Euclidean distance `d(ẑ_pgd, z)` between training examples and their
/// PGD perturbations, over at most `sample_cap` examples per client weighted
/// by λ.
pub fn mean_pgd_displacement(
    federation: &FederationData,
    spec: &ModelSpec,
    params: &ModelParams,
    attack: &AttackConfig,
    kind: crate::model::LossKind,
    sample_cap: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, client) in federation.clients.iter().enumerate() {
        let sample = subsample(&client.train, sample_cap, seed, &format!("rho:client:{i}"));
        let mut sum = 0.0;
        for z in &sample {
            let adv = pgd(spec, params, z, attack, kind)?;
            sum += dist_sq(&adv.x, &z.x).sqrt();
        }
        total += federation.weights[i] * sum / sample.len() as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaMatch {
    pub gamma: f64,
    pub rho_hat: f64,
    pub target: f64,
}

/// Bisects `log γ` in `[lo, hi]` until `ρ̂(γ)` at fixed parameters matches the
/// mean PGD displacement. `ρ̂` falls as γ grows, so the bracket must satisfy
/// `ρ̂(lo) ≥ target ≥ ρ̂(hi)`; otherwise the nearer end is returned.
#[allow(clippy::too_many_arguments)]
pub fn gamma_matching_attack(
    federation: &FederationData,
    spec: &ModelSpec,
    params: &ModelParams,
    attack: &AttackConfig,
    surrogate: &SurrogateConfig,
    kind: crate::model::LossKind,
    sample_cap: usize,
    seed: u64,
    bracket: (f64, f64),
    iters: usize,
) -> Result<GammaMatch> {
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::invalid("gamma bracket must satisfy 0 < lo < hi"));
    }
    let target = mean_pgd_displacement(federation, spec, params, attack, kind, sample_cap, seed)?;
    let rho = |gamma: f64| {
        let s = SurrogateConfig {
            gamma,
            ..surrogate.clone()
        };
        avg_worst_case_perturbation(federation, spec, params, &s, kind, sample_cap, seed)
    };
    let (rho_lo, rho_hi) = (rho(lo)?, rho(hi)?);
    if rho_lo <= target {
        return Ok(GammaMatch { gamma: lo, rho_hat: rho_lo, target });
    }
    if rho_hi >= target {
        return Ok(GammaMatch { gamma: hi, rho_hat: rho_hi, target });
    }
    let mut best = GammaMatch { gamma: hi, rho_hat: rho_hi, target };
    for _ in 0..iters {
        let mid = (lo * hi).sqrt();
        let r = rho(mid)?;
        if (r - target).abs() < (best.rho_hat - target).abs() {
            best = GammaMatch { gamma: mid, rho_hat: r, target };
        }
        if r > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// Equal-weight federation helper for tests and examples.
pub fn uniform_weights(federation: FederationData) -> Result<FederationData> {
    let m = federation.num_clients();
    federation.with_weights(ProbabilityVector::uniform(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::translate;
    use crate::fl_engine::EvalConfig;
    use crate::model::LossKind;

    fn small() -> (FederationData, ModelSpec, TrainConfig) {
        let preset = SyntheticPreset {
            num_classes: 3,
            feature_dim: 4,
            num_examples: 400,
            num_clients: 5,
            ..SyntheticPreset::default()
        };
        let fed = preset.build(3).unwrap();
        let spec = preset.model(0.0);
        let cfg = TrainConfig {
            rounds: 10,
            local_steps: 2,
            eta: 0.1,
            clients_per_round: 5,
            batch_size: 16,
            variant: AlgorithmVariant::FedAvg,
            weights_mode: WeightsMode::DataProportional,
            seed: 1,
            loss: LossKind::CrossEntropy,
            eval: EvalConfig::default(),
        };
        (fed, spec, cfg)
    }

    #[test]
    fn gamma_sweep_without_attack_has_no_shifted_columns() {
        let (fed, spec, cfg) = small();
        let res = gamma_sweep(&fed, &spec, &cfg, &[0.5, 5.0], None, &GammaSweepOptions::default()).unwrap();
        assert_eq!(res.records.len(), 2);
        assert!(res.records.iter().all(|r| r.shifted_acc.is_none() && r.rho_hat.is_some()));
        assert!(res.records[0].rho_hat >= res.records[1].rho_hat);
        assert!(gamma_sweep(&fed, &spec, &cfg, &[5.0, 0.5], None, &GammaSweepOptions::default()).is_err());
    }

    #[test]
    fn zero_fraction_equals_clean_evaluation() {
        let (fed, spec, cfg) = small();
        let attack = AttackConfig::unclipped(0.5, 0.1, 5);
        let res = robustness_sweep(&fed, &spec, std::slice::from_ref(&cfg), &attack, &[0.0, 1.0]).unwrap();
        let r0 = &res.records[0];
        assert_eq!(r0.shifted_acc, Some(r0.clean_acc));
        assert_eq!(r0.shifted_loss, Some(r0.clean_loss));
        assert!(res.records[1].shifted_acc.unwrap() <= r0.clean_acc);
        let mut a = Vec::new();
        let mut b = Vec::new();
        res.write_csv(&mut a).unwrap();
        robustness_sweep(&fed, &spec, &[cfg], &attack, &[0.0, 1.0]).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn domain_adaptation_prefers_the_matching_source() {
        let near = gen_synthetic_mixture(2, 2, 60, 3.0, 1).unwrap();
        let far = translate(&gen_synthetic_mixture(2, 2, 240, 3.0, 2).unwrap(), &[40.0, -40.0]);
        let target = gen_synthetic_mixture(2, 2, 100, 3.0, 3).unwrap();
        let spec = ModelSpec::mlr(2, 2, 0.0);
        let cfg = DomainAdaptConfig {
            train: TrainConfig {
                rounds: 30,
                local_steps: 2,
                eta: 0.1,
                clients_per_round: 2,
                batch_size: 16,
                variant: AlgorithmVariant::FedAvg,
                weights_mode: WeightsMode::DataProportional,
                seed: 4,
                loss: LossKind::CrossEntropy,
                eval: EvalConfig::default(),
            },
            surrogate: SurrogateConfig::new(5.0),
            ot: OtConfig::default().with_reg(1e-2),
            distance_subsample: 40,
            lambda_lr: 0.01,
        };
        let report = domain_adaptation_eval(&[near.clone(), far], &target, &spec, &cfg).unwrap();
        assert_eq!(report.lambda_star, vec![1.0, 0.0]);
        let wafl = report.method(DA_WAFL).unwrap();
        let avg = report.method(DA_FEDAVG_PROPORTIONAL).unwrap();
        assert!(wafl.target_acc >= avg.target_acc);
        let err = domain_adaptation_eval(&[near], &target, &spec, &cfg).unwrap_err();
        assert!(err.to_string().contains("need ≥ 2 sources"));
    }

    #[test]
    fn gamma_match_brackets() {
        let (fed, spec, cfg) = small();
        let out = run_federated(&fed, &spec, &cfg).unwrap();
        let attack = AttackConfig::unclipped(0.3, 0.05, 10);
        let m = gamma_matching_attack(
            &fed,
            &spec,
            &out.params,
            &attack,
            &SurrogateConfig::new(1.0),
            LossKind::CrossEntropy,
            10,
            1,
            (0.05, 50.0),
            20,
        )
        .unwrap();
        assert!(m.target > 0.0);
        assert!((0.05..=50.0).contains(&m.gamma));
    }
}
