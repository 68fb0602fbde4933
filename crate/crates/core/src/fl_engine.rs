//! Local SGD federated training: client sampling, K local steps per sampled
//! client, renormalized weighted aggregation and per-round evaluation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, pgd, shift_test_sets, AttackConfig};
use crate::data::{ClientDataset, FederationData, LabeledExample};
use crate::error::{Error, Result};
use crate::math::{derive_stream, project_simplex, ProbabilityVector};
use crate::model::{self, backprop, GradSink, LossKind, ModelParams, ModelSpec};
use crate::surrogate::{accumulate_surrogate_grad, avg_worst_case_perturbation, SurrogateConfig};

pub const DEFAULT_ETA_MLR: f64 = 0.05;
pub const DEFAULT_ETA_MLP: f64 = 0.01;

/// Stream tag for the initial global model.
pub const INIT_TAG: &str = "init:point";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmVariant {
    FedAvg,
    Wafl(SurrogateConfig),
    FedFgsm(AttackConfig),
    FedPgd(AttackConfig),
    AgnosticAscent { lambda_lr: f64 },
}

impl AlgorithmVariant {
    /// Short name used in CSV output.
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmVariant::FedAvg => "fedavg",
            AlgorithmVariant::Wafl(_) => "wafl",
            AlgorithmVariant::FedFgsm(_) => "fedfgsm",
            AlgorithmVariant::FedPgd(_) => "fedpgd",
            AlgorithmVariant::AgnosticAscent { .. } => "agnostic",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AlgorithmVariant::FedAvg => Ok(()),
            AlgorithmVariant::Wafl(s) => s.validate(),
            AlgorithmVariant::FedFgsm(a) | AlgorithmVariant::FedPgd(a) => a.validate(),
            AlgorithmVariant::AgnosticAscent { lambda_lr } => {
                if *lambda_lr >= 0.0 && lambda_lr.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("lambda_lr must be finite and nonnegative"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    #[default]
    DataProportional,
    Uniform,
    Explicit(ProbabilityVector),
}

impl WeightsMode {
    pub fn resolve(&self, federation: &FederationData) -> Result<ProbabilityVector> {
        let m = federation.num_clients();
        match self {
            WeightsMode::DataProportional => Ok(crate::data::default_weights(federation)),
            WeightsMode::Uniform => Ok(ProbabilityVector::uniform(m)),
            WeightsMode::Explicit(w) if w.len() == m => Ok(w.clone()),
            WeightsMode::Explicit(w) => Err(Error::DimensionMismatch {
                expected: m,
                got: w.len(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Clean evaluation period in rounds; the final round is always
    /// evaluated. 0 evaluates only the final round.
    #[serde(default = "one")]
    pub every: usize,
    /// PGD shift applied to the attacked clients' test sets at the final
    /// round.
    #[serde(default)]
    pub shift: Option<AttackConfig>,
    /// Examples per client used for `ρ̂` on evaluated rounds (WAFL only).
    #[serde(default)]
    pub rho_sample_cap: Option<usize>,
}

fn one() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 1,
            shift: None,
            rho_sample_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Global rounds `T`.
    pub rounds: usize,
    /// Local steps `K`.
    pub local_steps: usize,
    pub eta: f64,
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub variant: AlgorithmVariant,
    #[serde(default)]
    pub weights_mode: WeightsMode,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl TrainConfig {
    /// `T = 200, K = 2, |S_t| = 10, |D_i| = 64`, FedAvg.
    pub fn paper_defaults(eta: f64, seed: u64) -> Self {
        Self {
            rounds: 200,
            local_steps: 2,
            eta,
            clients_per_round: 10,
            batch_size: 64,
            variant: AlgorithmVariant::FedAvg,
            weights_mode: WeightsMode::DataProportional,
            seed,
            loss: LossKind::CrossEntropy,
            eval: EvalConfig::default(),
        }
    }

    pub fn with_variant(mut self, variant: AlgorithmVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if self.rounds == 0 || self.local_steps == 0 {
            return Err(Error::invalid("rounds and local_steps must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > num_clients {
            return Err(Error::invalid(format!(
                "clients_per_round must lie in [1, {num_clients}], got {}",
                self.clients_per_round
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be finite and nonnegative"));
        }
        if let Some(a) = &self.eval.shift {
            a.validate()?;
        }
        if self.eval.rho_sample_cap == Some(0) {
            return Err(Error::invalid("rho_sample_cap must be at least 1"));
        }
        self.variant.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Weighted mean of the per-example training objective over the local
    /// steps of this round: `φ_γ` for WAFL, the loss at the perturbed point
    /// for FedFGSM/FedPGD, the plain loss otherwise.
    pub surrogate_loss: f64,
    pub clean_acc: Option<f64>,
    pub clean_loss: Option<f64>,
    pub shifted_acc: Option<f64>,
    pub shifted_loss: Option<f64>,
    pub rho_hat: Option<f64>,
    pub lambda: Option<Vec<f64>>,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub logs: Vec<RoundLog>,
    /// Aggregation weights after the last round.
    pub lambda: ProbabilityVector,
}

/// Uniform draw of `k` of `m` clients without replacement, returned in
/// ascending order.
pub fn sample_clients(m: usize, k: usize, seed: u64, round: usize) -> Vec<usize> {
    if k >= m {
        return (0..m).collect();
    }
    let mut ids: Vec<usize> = (0..m).collect();
    ids.shuffle(&mut derive_stream(seed, &format!("sample:{round}")));
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub params: ModelParams,
    /// Mean per-example objective over all local steps.
    pub mean_objective: f64,
}

/// `K` mini-batch SGD steps from `theta_global` on one client's training set.
/// Batches are drawn without replacement from a per-epoch shuffle seeded by
/// `"client:i:round:t"` and summed in ascending example order.
pub fn local_update(
    spec: &ModelSpec,
    client_index: usize,
    client: &ClientDataset,
    theta_global: &ModelParams,
    cfg: &TrainConfig,
    round: usize,
) -> Result<LocalResult> {
    let data = &client.train;
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyExamples);
    }
    let b = cfg.batch_size.min(n);
    let mut rng = derive_stream(cfg.seed, &format!("client:{client_index}:round:{round}"));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = n;
    let mut params = theta_global.clone();
    let mut grad = vec![0.0; params.len()];
    let mut objective_sum = 0.0;
    for _ in 0..cfg.local_steps {
        let mut batch: Vec<usize> = if b == n {
            (0..n).collect()
        } else {
            if cursor + b > n {
                order = crate::data::shuffled_indices(n, &mut rng);
                cursor = 0;
            }
            let picked = order[cursor..cursor + b].to_vec();
            cursor += b;
            picked
        };
        batch.sort_unstable();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / b as f64;
        let mut step_obj = 0.0;
        for &j in &batch {
            step_obj += example_gradient(spec, &params, &data[j], cfg, scale, &mut grad)?;
        }
        objective_sum += step_obj / b as f64;
        for (t, g) in params.theta.iter_mut().zip(&grad) {
            *t -= cfg.eta * g;
        }
    }
    if params.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(LocalResult {
        params,
        mean_objective: objective_sum / cfg.local_steps as f64,
    })
}

/// Accumulates `scale · ∇_θ` of the variant's per-example objective into
/// `grad` and returns the objective value.
fn example_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    example: &LabeledExample,
    cfg: &TrainConfig,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let plain = |e: &LabeledExample, grad: &mut [f64]| {
        backprop(
            spec,
            &params.theta,
            &e.x,
            e.y,
            cfg.loss,
            GradSink {
                theta: Some((grad, scale)),
                input: None,
            },
        )
    };
    match &cfg.variant {
        AlgorithmVariant::FedAvg | AlgorithmVariant::AgnosticAscent { .. } => plain(example, grad),
        AlgorithmVariant::Wafl(s) => {
            Ok(accumulate_surrogate_grad(spec, params, example, s, cfg.loss, scale, grad)?.surrogate_value)
        }
        AlgorithmVariant::FedFgsm(a) => {
            let adv = fgsm(spec, params, example, a.epsilon, a.clip(), cfg.loss)?;
            plain(&adv, grad)
        }
        AlgorithmVariant::FedPgd(a) => {
            let adv = pgd(spec, params, example, a, cfg.loss)?;
            plain(&adv, grad)
        }
    }
}

/// `Σ_{i∈S} λ_i θ_i / Σ_{i∈S} λ_i`, summed in ascending client id regardless
/// of the order of `local_models`.
pub fn aggregate(local_models: &[(usize, ModelParams)], lambda: &ProbabilityVector) -> Result<ModelParams> {
    if local_models.is_empty() {
        return Err(Error::invalid("no participating clients"));
    }
    let mut sorted: Vec<&(usize, ModelParams)> = local_models.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let dim = sorted[0].1.len();
    let mut total_w = 0.0;
    for (id, p) in &sorted {
        if *id >= lambda.len() {
            return Err(Error::invalid(format!("client id {id} has no weight")));
        }
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        total_w += lambda[*id];
    }
    if !(total_w > 0.0) {
        return Err(Error::DegenerateAggregation);
    }
    let mut theta = vec![0.0; dim];
    for (id, p) in &sorted {
        let w = lambda[*id] / total_w;
        for (t, v) in theta.iter_mut().zip(&p.theta) {
            *t += w * v;
        }
    }
    Ok(ModelParams { theta })
}

/// One projected ascent step `λ ← Π_Δ(λ + lr · losses)`.
pub fn agnostic_lambda_step(lambda: &ProbabilityVector, losses: &[f64], lambda_lr: f64) -> Result<ProbabilityVector> {
    if losses.len() != lambda.len() {
        return Err(Error::DimensionMismatch {
            expected: lambda.len(),
            got: losses.len(),
        });
    }
    if lambda_lr == 0.0 {
        return Ok(lambda.clone());
    }
    let moved: Vec<f64> = lambda
        .as_slice()
        .iter()
        .zip(losses)
        .map(|(l, g)| l + lambda_lr * g)
        .collect();
    project_simplex(&moved)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean loss over every client's test set; classification only.
pub fn evaluate(federation: &FederationData, spec: &ModelSpec, params: &ModelParams, kind: LossKind) -> Result<Metrics> {
    evaluate_examples(&federation.all_test().collect::<Vec<_>>(), spec, params, kind)
}

pub fn evaluate_examples(examples: &[&LabeledExample], spec: &ModelSpec, params: &ModelParams, kind: LossKind) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let per: Vec<(bool, f64)> = examples
        .par_iter()
        .map(|e| {
            let l = model::loss(spec, params, e, kind)?;
            let hit = kind == LossKind::CrossEntropy && e.y.class() == Some(model::predict(spec, params, &e.x));
            Ok((hit, l))
        })
        .collect::<Result<_>>()?;
    let hits = per.iter().filter(|(h, _)| *h).count();
    let loss = per.iter().map(|(_, l)| l).sum::<f64>() / per.len() as f64;
    Ok(Metrics {
        accuracy: hits as f64 / per.len() as f64,
        loss,
    })
}

/// Runs `T` rounds of Algorithm 1 from the initial model drawn from
/// `derive_stream(seed, "init:point")`.
pub fn run_federated(federation: &FederationData, spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = ModelParams::init(spec, &mut derive_stream(cfg.seed, INIT_TAG));
    run_federated_from(federation, spec, cfg, init)
}

pub fn run_federated_from(
    federation: &FederationData,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    init: ModelParams,
) -> Result<TrainOutcome> {
    federation.validate()?;
    spec.validate()?;
    let m = federation.num_clients();
    cfg.validate(m)?;
    if init.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            expected: spec.num_params(),
            got: init.len(),
        });
    }
    let mut lambda = cfg.weights_mode.resolve(federation)?;
    let agnostic_lr = match cfg.variant {
        AlgorithmVariant::AgnosticAscent { lambda_lr } => Some(lambda_lr),
        _ => None,
    };
    let mut last_losses = vec![0.0; m];
    let mut theta = init;
    let mut logs = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds {
        let started = Instant::now();
        let participants = sample_clients(m, cfg.clients_per_round, cfg.seed, t);
        let locals: Vec<(usize, LocalResult)> = participants
            .par_iter()
            .map(|&i| {
                local_update(spec, i, &federation.clients[i], &theta, cfg, t)
                    .map(|r| (i, r))
                    .map_err(|e| Error::ClientUpdate {
                        round: t,
                        client: i,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;

        let part_w: f64 = participants.iter().map(|i| lambda[*i]).sum();
        let surrogate_loss = if part_w > 0.0 {
            locals.iter().map(|(i, r)| lambda[*i] * r.mean_objective).sum::<f64>() / part_w
        } else {
            locals.iter().map(|(_, r)| r.mean_objective).sum::<f64>() / locals.len() as f64
        };
        let models: Vec<(usize, ModelParams)> = locals.iter().map(|(i, r)| (*i, r.params.clone())).collect();
        theta = match aggregate(&models, &lambda) {
            Ok(p) => p,
            // the ascent can drive every participant's weight to zero; the
            // global model then stays where it was
            Err(Error::DegenerateAggregation) if agnostic_lr.is_some() => theta,
            Err(e) => return Err(e),
        };
        if let Some(lr) = agnostic_lr {
            for (i, r) in &locals {
                last_losses[*i] = r.mean_objective;
            }
            lambda = agnostic_lambda_step(&lambda, &last_losses, lr)?;
        }

        let last = t + 1 == cfg.rounds;
        let eval_now = last || (cfg.eval.every > 0 && (t + 1) % cfg.eval.every == 0);
        let mut log = RoundLog {
            round: t,
            participants,
            surrogate_loss,
            clean_acc: None,
            clean_loss: None,
            shifted_acc: None,
            shifted_loss: None,
            rho_hat: None,
            lambda: agnostic_lr.map(|_| lambda.as_slice().to_vec()),
            wall_time_ms: 0.0,
        };
        if eval_now && federation.all_test().next().is_some() {
            let clean = evaluate(federation, spec, &theta, cfg.loss)?;
            log.clean_acc = Some(clean.accuracy);
            log.clean_loss = Some(clean.loss);
            if let (Some(cap), AlgorithmVariant::Wafl(s)) = (cfg.eval.rho_sample_cap, &cfg.variant) {
                log.rho_hat = Some(avg_worst_case_perturbation(
                    federation, spec, &theta, s, cfg.loss, cap, cfg.seed,
                )?);
            }
            if let (true, Some(attack)) = (last, &cfg.eval.shift) {
                let shifted = shift_test_sets(federation, spec, &theta, attack, cfg.loss)?;
                let s = evaluate(&shifted, spec, &theta, cfg.loss)?;
                log.shifted_acc = Some(s.accuracy);
                log.shifted_loss = Some(s.loss);
            }
        }
        log.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        log::debug!(
            "round {t}: objective {:.6} clean_acc {:?} ({:.1} ms)",
            log.surrogate_loss,
            log.clean_acc,
            log.wall_time_ms
        );
        logs.push(log);
    }
    Ok(TrainOutcome {
        params: theta,
        logs,
        lambda,
    })
}

pub const ROUNDS_CSV_HEADER: [&str; 9] = [
    "round",
    "variant",
    "clean_acc",
    "clean_loss",
    "shifted_acc",
    "shifted_loss",
    "surrogate_loss",
    "rho_hat_optional",
    "lambda_json_optional",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one CSV row per round; absent values are empty fields.
pub fn write_rounds_csv<W: Write>(out: W, variant: &str, logs: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(ROUNDS_CSV_HEADER).map_err(csv_err)?;
    for log in logs {
        let lambda = match &log.lambda {
            Some(l) => serde_json::to_string(l)?,
            None => String::new(),
        };
        w.write_record([
            log.round.to_string(),
            variant.to_string(),
            opt(log.clean_acc),
            opt(log.clean_loss),
            opt(log.shifted_acc),
            opt(log.shifted_loss),
            log.surrogate_loss.to_string(),
            opt(log.rho_hat),
            lambda,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub rounds: usize,
    pub num_params: usize,
    pub final_clean_acc: Option<f64>,
    pub final_clean_loss: Option<f64>,
    pub final_shifted_acc: Option<f64>,
    pub final_shifted_loss: Option<f64>,
    pub final_surrogate_loss: f64,
    pub final_rho_hat: Option<f64>,
    pub final_lambda: Vec<f64>,
    pub config: TrainConfig,
}

impl RunSummary {
    pub fn new(cfg: &TrainConfig, spec: &ModelSpec, outcome: &TrainOutcome) -> Self {
        let last = outcome.logs.last();
        Self {
            variant: cfg.variant.name().to_string(),
            rounds: cfg.rounds,
            num_params: spec.num_params(),
            final_clean_acc: last.and_then(|l| l.clean_acc),
            final_clean_loss: last.and_then(|l| l.clean_loss),
            final_shifted_acc: last.and_then(|l| l.shifted_acc),
            final_shifted_loss: last.and_then(|l| l.shifted_loss),
            final_surrogate_loss: last.map_or(f64::NAN, |l| l.surrogate_loss),
            final_rho_hat: last.and_then(|l| l.rho_hat),
            final_lambda: outcome.lambda.as_slice().to_vec(),
            config: cfg.clone(),
        }
    }
}
