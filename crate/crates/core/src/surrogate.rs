//! The dual surrogate of the Wasserstein worst-case risk,
//!
//! ```text
//! φ_γ(z, θ) = sup_ζ  ℓ(ζ, h_θ) − γ d²(ζ, z),   d²(ζ, z) = ‖ζ_x − x‖² + κ|ζ_y − y|²
//! ```
//!
//! solved by gradient ascent started at `ζ = z`. By the envelope theorem the
//! parameter gradient of `φ_γ` is the loss gradient evaluated at the maximizer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{subsample, FederationData, Label, LabeledExample};
use crate::error::{Error, Result};
use crate::math::{axpy, dist_sq, norm, norm_sq};
use crate::model::{self, backprop, GradSink, LossKind, ModelParams, ModelSpec};

/// Label transport weight. `Infinite` forbids moving labels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "KappaRepr", into = "KappaRepr")]
pub enum Kappa {
    Finite(f64),
    #[default]
    Infinite,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KappaRepr {
    Num(f64),
    Text(String),
}

impl TryFrom<KappaRepr> for Kappa {
    type Error = String;

    fn try_from(r: KappaRepr) -> std::result::Result<Self, String> {
        match r {
            KappaRepr::Num(v) if v.is_infinite() && v > 0.0 => Ok(Kappa::Infinite),
            KappaRepr::Num(v) if v > 0.0 => Ok(Kappa::Finite(v)),
            KappaRepr::Num(v) => Err(format!("kappa must be positive, got {v}")),
            KappaRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Kappa> for KappaRepr {
    fn from(k: Kappa) -> Self {
        match k {
            Kappa::Finite(v) => KappaRepr::Num(v),
            Kappa::Infinite => KappaRepr::Text("inf".into()),
        }
    }
}

impl FromStr for Kappa {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Kappa::Infinite),
            other => {
                let v: f64 = other.parse().map_err(|_| format!("invalid kappa `{s}`"))?;
                KappaRepr::Num(v).try_into()
            }
        }
    }
}

impl fmt::Display for Kappa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kappa::Finite(v) => write!(f, "{v}"),
            Kappa::Infinite => f.write_str("inf"),
        }
    }
}

pub const DEFAULT_ASCENT_STEPS: usize = 15;
pub const DEFAULT_ASCENT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub gamma: f64,
    #[serde(default)]
    pub kappa: Kappa,
    #[serde(default = "default_steps")]
    pub ascent_steps: usize,
    /// Defaults to `1 / (2γ)`, which turns each step into the fixed-point map
    /// `ζ ← z + ∇ℓ(ζ) / 2γ` for the squared cost.
    #[serde(default)]
    pub ascent_lr: Option<f64>,
    #[serde(default = "default_tol")]
    pub ascent_tol: f64,
    #[serde(default = "default_p")]
    pub wasserstein_p: u8,
}

fn default_steps() -> usize {
    DEFAULT_ASCENT_STEPS
}

fn default_tol() -> f64 {
    DEFAULT_ASCENT_TOL
}

fn default_p() -> u8 {
    2
}

impl SurrogateConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            kappa: Kappa::Infinite,
            ascent_steps: DEFAULT_ASCENT_STEPS,
            ascent_lr: None,
            ascent_tol: DEFAULT_ASCENT_TOL,
            wasserstein_p: 2,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.ascent_steps = steps;
        self
    }

    pub fn with_kappa(mut self, kappa: Kappa) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.ascent_tol = tol;
        self
    }

    pub fn learning_rate(&self) -> f64 {
        self.ascent_lr.unwrap_or(0.5 / self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.ascent_steps == 0 {
            return Err(Error::invalid("ascent_steps must be at least 1"));
        }
        if !(self.learning_rate() > 0.0) {
            return Err(Error::invalid("ascent_lr must be positive"));
        }
        if self.ascent_tol < 0.0 {
            return Err(Error::invalid("ascent_tol must be nonnegative"));
        }
        if !matches!(self.wasserstein_p, 1 | 2) {
            return Err(Error::invalid("wasserstein_p must be 1 or 2"));
        }
        if let Kappa::Finite(k) = self.kappa {
            if !(k > 0.0) {
                return Err(Error::invalid("kappa must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCasePoint {
    pub zeta: Vec<f64>,
    pub zeta_label: Label,
    pub transport_cost_sq: f64,
    pub surrogate_value: f64,
    pub ascent_iters_used: usize,
}

impl WorstCasePoint {
    pub fn as_example(&self) -> LabeledExample {
        LabeledExample {
            x: self.zeta.clone(),
            y: self.zeta_label,
        }
    }
}

/// `‖x − x'‖² + κ|y − y'|²`. With `κ = ∞` the labels must agree.
pub fn transport_cost_sq(z: &LabeledExample, z_prime: &LabeledExample, kappa: Kappa) -> Result<f64> {
    if z.x.len() != z_prime.x.len() {
        return Err(Error::DimensionMismatch {
            expected: z.x.len(),
            got: z_prime.x.len(),
        });
    }
    let features = dist_sq(&z.x, &z_prime.x);
    let dy = z.y.as_f64() - z_prime.y.as_f64();
    match kappa {
        Kappa::Infinite if dy != 0.0 => Err(Error::LabelPerturbationDisallowed),
        Kappa::Infinite => Ok(features),
        Kappa::Finite(k) => Ok(features + k * dy * dy),
    }
}

struct AscentState {
    x: Vec<f64>,
    y: f64,
    loss: f64,
    gx: Vec<f64>,
    gy: f64,
}

/// Loss and its gradient at the candidate point; the label gradient is only
/// meaningful when the label is free to move.
fn probe(
    spec: &ModelSpec,
    params: &ModelParams,
    x: Vec<f64>,
    y: f64,
    label: Label,
    label_free: bool,
    kind: LossKind,
) -> Result<AscentState> {
    let yl = if label_free { Label::Value(y) } else { label };
    let mut gx = vec![0.0; spec.feature_dim];
    let loss = backprop(
        spec,
        &params.theta,
        &x,
        yl,
        kind,
        GradSink {
            theta: None,
            input: Some(&mut gx),
        },
    )?;
    let gy = if label_free {
        model::grad_label(spec, params, &x, yl, kind).unwrap_or(0.0)
    } else {
        0.0
    };
    Ok(AscentState { x, y, loss, gx, gy })
}

/// Gradient ascent on `ζ ↦ ℓ(ζ) − γ c(ζ, z)` from `ζ = z`.
///
/// A step that lowers the objective is rejected and retried with half the
/// step size, so accepted iterates are monotone. The solve errors out when
/// the iterate leaves the representable range.
pub fn solve_inner_max(
    spec: &ModelSpec,
    params: &ModelParams,
    example: &LabeledExample,
    cfg: &SurrogateConfig,
    kind: LossKind,
) -> Result<WorstCasePoint> {
    solve_inner_max_traced(spec, params, example, cfg, kind, |_| {})
}

/// [`solve_inner_max`] reporting the objective after every accepted step.
pub fn solve_inner_max_traced(
    spec: &ModelSpec,
    params: &ModelParams,
    example: &LabeledExample,
    cfg: &SurrogateConfig,
    kind: LossKind,
    mut on_accept: impl FnMut(f64),
) -> Result<WorstCasePoint> {
    cfg.validate()?;
    let gamma = cfg.gamma;
    let kappa = match cfg.kappa {
        Kappa::Finite(k) => Some(k),
        Kappa::Infinite => None,
    };
    let label_free = kappa.is_some() && matches!(example.y, Label::Value(_)) && kind == LossKind::Square;
    let kappa_v = kappa.unwrap_or(0.0);
    let y0 = example.y.as_f64();

    let cost_sq = |s: &AscentState| {
        let dy = if label_free { s.y - y0 } else { 0.0 };
        dist_sq(&s.x, &example.x) + kappa_v * dy * dy
    };
    let penalty = |s: &AscentState| {
        let c = cost_sq(s);
        if cfg.wasserstein_p == 1 {
            gamma * c.sqrt()
        } else {
            gamma * c
        }
    };
    // ascent direction: ∇ℓ − γ∇c
    let direction = |s: &AscentState| -> (Vec<f64>, f64) {
        let c = cost_sq(s);
        let dy = if label_free { s.y - y0 } else { 0.0 };
        if cfg.wasserstein_p == 2 {
            let mut gx = s.gx.clone();
            for (g, (zi, xi)) in gx.iter_mut().zip(s.x.iter().zip(&example.x)) {
                *g -= 2.0 * gamma * (zi - xi);
            }
            (gx, s.gy - 2.0 * gamma * kappa_v * dy)
        } else if c > 0.0 {
            let d = c.sqrt();
            let mut gx = s.gx.clone();
            for (g, (zi, xi)) in gx.iter_mut().zip(s.x.iter().zip(&example.x)) {
                *g -= gamma * (zi - xi) / d;
            }
            (gx, s.gy - gamma * kappa_v * dy / d)
        } else {
            // minimal-norm element of the superdifferential at ζ = z
            let gnorm = (norm_sq(&s.gx) + s.gy * s.gy).sqrt();
            if gnorm <= gamma {
                (vec![0.0; s.gx.len()], 0.0)
            } else {
                let shrink = 1.0 - gamma / gnorm;
                (s.gx.iter().map(|g| g * shrink).collect(), s.gy * shrink)
            }
        }
    };

    let mut state = probe(spec, params, example.x.clone(), y0, example.y, label_free, kind)?;
    let mut objective = state.loss - penalty(&state);
    on_accept(objective);
    let mut lr = cfg.learning_rate();
    let mut iters = 0;
    let scale = 1.0 + norm(&example.x);
    'outer: while iters < cfg.ascent_steps {
        let (gx, gy) = direction(&state);
        let gnorm = (norm_sq(&gx) + gy * gy).sqrt();
        if gnorm <= cfg.ascent_tol {
            break;
        }
        iters += 1;
        let mut halvings = 0;
        loop {
            let mut x = state.x.clone();
            axpy(lr, &gx, &mut x);
            let y = state.y + lr * gy;
            if x.iter().any(|v| !v.is_finite()) || !y.is_finite() || norm(&x) > 1e150 * scale {
                return Err(Error::InnerAscentDiverged { gamma });
            }
            let cand = probe(spec, params, x, y, example.y, label_free, kind)?;
            let cand_obj = cand.loss - penalty(&cand);
            if !cand_obj.is_finite() {
                return Err(Error::InnerAscentDiverged { gamma });
            }
            if cand_obj >= objective {
                state = cand;
                objective = cand_obj;
                on_accept(objective);
                break;
            }
            // the predicted gain is below the resolution of the objective
            if lr * gnorm * gnorm <= 4.0 * f64::EPSILON * (1.0 + objective.abs()) {
                break 'outer;
            }
            halvings += 1;
            lr *= 0.5;
            if halvings > 60 {
                break 'outer;
            }
        }
    }

    let transport = cost_sq(&state);
    Ok(WorstCasePoint {
        zeta_label: if label_free { Label::Value(state.y) } else { example.y },
        zeta: state.x,
        transport_cost_sq: transport,
        surrogate_value: objective,
        ascent_iters_used: iters,
    })
}

pub fn surrogate_loss(
    spec: &ModelSpec,
    params: &ModelParams,
    example: &LabeledExample,
    cfg: &SurrogateConfig,
    kind: LossKind,
) -> Result<f64> {
    Ok(solve_inner_max(spec, params, example, cfg, kind)?.surrogate_value)
}

/// `∇_θ φ_γ(z, θ) = ∇_θ ℓ(ζ*, θ)`.
pub fn surrogate_grad_theta(
    spec: &ModelSpec,
    params: &ModelParams,
    example: &LabeledExample,
    cfg: &SurrogateConfig,
    kind: LossKind,
) -> Result<Vec<f64>> {
    let wc = solve_inner_max(spec, params, example, cfg, kind)?;
    model::grad_theta(spec, params, &wc.as_example(), kind)
}

/// Adds `scale · ∇_θ φ_γ` into `out` and returns the solved point.
pub(crate) fn accumulate_surrogate_grad(
    spec: &ModelSpec,
    params: &ModelParams,
    example: &LabeledExample,
    cfg: &SurrogateConfig,
    kind: LossKind,
    scale: f64,
    out: &mut [f64],
) -> Result<WorstCasePoint> {
    let wc = solve_inner_max(spec, params, example, cfg, kind)?;
    backprop(
        spec,
        &params.theta,
        &wc.zeta,
        wc.zeta_label,
        kind,
        GradSink {
            theta: Some((out, scale)),
            input: None,
        },
    )?;
    Ok(wc)
}

/// Average worst-case perturbation `ρ̂ = sqrt(Σ_i λ_i mean_z d²(ζ*(z), z))`
/// over at most `sample_cap` training examples per client.
pub fn avg_worst_case_perturbation(
    federation: &FederationData,
    spec: &ModelSpec,
    params: &ModelParams,
    cfg: &SurrogateConfig,
    kind: LossKind,
    sample_cap: usize,
    seed: u64,
) -> Result<f64> {
    if sample_cap == 0 {
        return Err(Error::invalid("sample_cap must be at least 1"));
    }
    let mut total = 0.0;
    for (i, client) in federation.clients.iter().enumerate() {
        let sample = subsample(&client.train, sample_cap, seed, &format!("rho:client:{i}"));
        let mut sum = 0.0;
        for z in &sample {
            sum += solve_inner_max(spec, params, z, cfg, kind)?.transport_cost_sq;
        }
        total += federation.weights[i] * sum / sample.len() as f64;
    }
    Ok(total.sqrt())
}

/// `L = L_θθ + L_θz L_zθ / (γ − L_zz)`, the smoothness of `φ_γ` in θ.
pub fn smoothness_constant(l_tt: f64, l_tz: f64, l_zt: f64, l_zz: f64, gamma: f64) -> Result<f64> {
    if gamma <= l_zz {
        return Err(Error::BelowSmoothnessThreshold { gamma, l_zz });
    }
    Ok(l_tt + l_tz * l_zt / (gamma - l_zz))
}

/// Largest absolute eigenvalue of the input Hessian of the loss at `example`,
/// by power iteration on finite-difference Hessian-vector products.
pub fn estimate_input_smoothness(
    spec: &ModelSpec,
    params: &ModelParams,
    example: &LabeledExample,
    kind: LossKind,
    iters: usize,
) -> Result<f64> {
    let p = spec.feature_dim;
    let h = 1e-5;
    let mut v: Vec<f64> = (0..p).map(|j| 1.0 + 0.1 * j as f64).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut eig = 0.0;
    for _ in 0..iters.max(1) {
        let plus: Vec<f64> = example.x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = example.x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (_, gp) = model::loss_and_grad_input(spec, params, &plus, example.y, kind)?;
        let (_, gm) = model::loss_and_grad_input(spec, params, &minus, example.y, kind)?;
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        eig = norm(&hv);
        if eig == 0.0 {
            return Ok(0.0);
        }
        v = hv.into_iter().map(|x| x / eig).collect();
    }
    Ok(eig)
}
