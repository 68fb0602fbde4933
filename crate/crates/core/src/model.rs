//! Differentiable hypothesis classes (multinomial logistic regression and a
//! small smooth MLP) with analytic gradients in the parameters and in the
//! input features.
//!
//! Parameters are one flat vector. Each affine layer is stored row by row as
//! `[w_r0, …, w_r(in-1), b_r]`, i.e. the weights act on the bias-augmented
//! input `(x, 1)`. Layers follow each other in forward order.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Label, LabeledExample};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Mlr,
    Mlp {
        hidden_dims: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub feature_dim: usize,
    /// Output width. Square loss uses a single output.
    pub num_classes: usize,
    #[serde(default)]
    pub l2_reg: f64,
}

impl ModelSpec {
    pub fn mlr(feature_dim: usize, num_classes: usize, l2_reg: f64) -> Self {
        Self {
            kind: ModelKind::Mlr,
            feature_dim,
            num_classes,
            l2_reg,
        }
    }

    /// Linear regression `θᵀ(x, 1)` for the square loss.
    pub fn linear(feature_dim: usize) -> Self {
        Self::mlr(feature_dim, 1, 0.0)
    }

    pub fn mlp(feature_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, l2_reg: f64) -> Self {
        Self {
            kind: ModelKind::Mlp {
                hidden_dims,
                activation: Activation::Tanh,
            },
            feature_dim,
            num_classes,
            l2_reg,
        }
    }

    /// Widths of every layer, input first.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.feature_dim];
        if let ModelKind::Mlp { hidden_dims, .. } = &self.kind {
            widths.extend_from_slice(hidden_dims);
        }
        widths.push(self.num_classes);
        widths
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths()
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    fn activation(&self) -> Activation {
        match &self.kind {
            ModelKind::Mlr => Activation::Tanh,
            ModelKind::Mlp { activation, .. } => *activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(Error::invalid("l2_reg must be a finite nonnegative number"));
        }
        if let ModelKind::Mlp { hidden_dims, .. } = &self.kind {
            if hidden_dims.contains(&0) {
                return Err(Error::invalid("hidden layer widths must be positive"));
            }
        }
        Ok(())
    }

    /// Squared norm of the weight entries (bias columns excluded).
    pub fn weight_norm_sq(&self, theta: &[f64]) -> f64 {
        let mut total = 0.0;
        let mut offset = 0;
        for w in self.layer_widths().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            for r in 0..fan_out {
                let row = &theta[offset + r * (fan_in + 1)..offset + r * (fan_in + 1) + fan_in];
                total += row.iter().map(|v| v * v).sum::<f64>();
            }
            offset += (fan_in + 1) * fan_out;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams {
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            theta: vec![0.0; spec.num_params()],
        }
    }

    /// Zero for MLR (the objective is convex); scaled Gaussian weights for
    /// MLPs so that hidden units are not symmetric.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        if matches!(spec.kind, ModelKind::Mlr) {
            return Self::zeros(spec);
        }
        let mut theta = Vec::with_capacity(spec.num_params());
        for w in spec.layer_widths().windows(2) {
            let scale = (1.0 / w[0] as f64).sqrt();
            for _ in 0..w[1] {
                for _ in 0..w[0] {
                    let z: f64 = StandardNormal.sample(rng);
                    theta.push(scale * z);
                }
                theta.push(0.0);
            }
        }
        Self { theta }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Square,
}

fn check(spec: &ModelSpec, theta: &[f64], x: &[f64], y: Label, kind: LossKind) -> Result<()> {
    if theta.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            expected: spec.num_params(),
            got: theta.len(),
        });
    }
    if x.len() != spec.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.feature_dim,
            got: x.len(),
        });
    }
    match (kind, y) {
        (LossKind::CrossEntropy, Label::Class(c)) if c < spec.num_classes => Ok(()),
        (LossKind::CrossEntropy, Label::Class(c)) => Err(Error::invalid(format!(
            "class {c} outside {} outputs",
            spec.num_classes
        ))),
        (LossKind::CrossEntropy, Label::Value(_)) => {
            Err(Error::invalid("cross-entropy needs a class label"))
        }
        (LossKind::Square, Label::Value(_)) if spec.num_classes == 1 => Ok(()),
        (LossKind::Square, Label::Value(_)) => {
            Err(Error::invalid("square loss needs a single-output model"))
        }
        (LossKind::Square, Label::Class(_)) => Err(Error::invalid("square loss needs a real label")),
    }
}

/// `out = W a + b` for one layer stored at `theta`.
fn affine(theta: &[f64], input: &[f64], fan_out: usize, out: &mut Vec<f64>) {
    let fan_in = input.len();
    out.clear();
    for r in 0..fan_out {
        let row = &theta[r * (fan_in + 1)..(r + 1) * (fan_in + 1)];
        let mut acc = row[fan_in];
        for (w, a) in row[..fan_in].iter().zip(input) {
            acc += w * a;
        }
        out.push(acc);
    }
}

struct Forward {
    /// Pre-activations per layer; the last entry holds the logits.
    pre: Vec<Vec<f64>>,
    /// Layer inputs: `inputs[0] = x`, `inputs[l] = act(pre[l-1])`.
    inputs: Vec<Vec<f64>>,
}

fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Forward {
    let widths = spec.layer_widths();
    let act = spec.activation();
    let layers = widths.len() - 1;
    let mut pre = Vec::with_capacity(layers);
    let mut inputs = Vec::with_capacity(layers);
    inputs.push(x.to_vec());
    let mut offset = 0;
    for l in 0..layers {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let size = (fan_in + 1) * fan_out;
        let mut z = Vec::with_capacity(fan_out);
        affine(&theta[offset..offset + size], &inputs[l], fan_out, &mut z);
        offset += size;
        if l + 1 < layers {
            inputs.push(z.iter().map(|v| act.apply(*v)).collect());
        }
        pre.push(z);
    }
    Forward { pre, inputs }
}

pub fn logits(spec: &ModelSpec, params: &ModelParams, x: &[f64]) -> Vec<f64> {
    forward(spec, &params.theta, x).pre.pop().unwrap_or_default()
}

/// Data loss and its derivative with respect to the logits.
fn output_loss(logits: &[f64], y: Label, kind: LossKind) -> (f64, Vec<f64>) {
    match kind {
        LossKind::CrossEntropy => {
            let c = y.class().expect("checked");
            let lse = log_sum_exp(logits);
            let dz = logits
                .iter()
                .enumerate()
                .map(|(k, z)| (z - lse).exp() - if k == c { 1.0 } else { 0.0 })
                .collect();
            (lse - logits[c], dz)
        }
        LossKind::Square => {
            let r = logits[0] - y.as_f64();
            (0.5 * r * r, vec![r])
        }
    }
}

fn regularized(kind: LossKind, spec: &ModelSpec) -> bool {
    kind == LossKind::CrossEntropy && spec.l2_reg > 0.0
}

/// Gradients requested from [`backprop`].
pub(crate) struct GradSink<'a> {
    /// Accumulates `scale · ∇_θ ℓ` into the slice.
    pub theta: Option<(&'a mut [f64], f64)>,
    /// Overwritten with `∇_x ℓ`.
    pub input: Option<&'a mut [f64]>,
}

/// Loss at `(x, y)` with optional gradient accumulation; the workhorse behind
/// every public gradient routine.
pub(crate) fn backprop(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    y: Label,
    kind: LossKind,
    sink: GradSink<'_>,
) -> Result<f64> {
    check(spec, theta, x, y, kind)?;
    let fwd = forward(spec, theta, x);
    let (mut loss, dz) = output_loss(fwd.pre.last().expect("at least one layer"), y, kind);
    if regularized(kind, spec) {
        loss += 0.5 * spec.l2_reg * spec.weight_norm_sq(theta);
    }
    if sink.theta.is_none() && sink.input.is_none() {
        return Ok(loss);
    }

    let widths = spec.layer_widths();
    let act = spec.activation();
    let layers = widths.len() - 1;
    let mut offsets = Vec::with_capacity(layers);
    let mut acc = 0;
    for l in 0..layers {
        offsets.push(acc);
        acc += (widths[l] + 1) * widths[l + 1];
    }

    let GradSink {
        theta: mut theta_sink,
        input: input_sink,
    } = sink;
    let reg = if regularized(kind, spec) { spec.l2_reg } else { 0.0 };
    let mut delta = dz;
    for l in (0..layers).rev() {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let layer = &theta[offsets[l]..offsets[l] + (fan_in + 1) * fan_out];
        let a = &fwd.inputs[l];
        if let Some((g, scale)) = theta_sink.as_mut() {
            let g = &mut g[offsets[l]..offsets[l] + (fan_in + 1) * fan_out];
            for r in 0..fan_out {
                let d = *scale * delta[r];
                let grow = &mut g[r * (fan_in + 1)..(r + 1) * (fan_in + 1)];
                let wrow = &layer[r * (fan_in + 1)..r * (fan_in + 1) + fan_in];
                for j in 0..fan_in {
                    grow[j] += d * a[j] + *scale * reg * wrow[j];
                }
                grow[fan_in] += d;
            }
        }
        if l == 0 && input_sink.is_none() {
            break;
        }
        let mut back = vec![0.0; fan_in];
        for r in 0..fan_out {
            let row = &layer[r * (fan_in + 1)..r * (fan_in + 1) + fan_in];
            for (b, w) in back.iter_mut().zip(row) {
                *b += w * delta[r];
            }
        }
        if l == 0 {
            if let Some(gx) = input_sink {
                gx.copy_from_slice(&back);
            }
            break;
        }
        delta = back
            .iter()
            .zip(&fwd.pre[l - 1])
            .map(|(b, z)| b * act.derivative(*z))
            .collect();
    }
    Ok(loss)
}

/// Loss at explicit features `x` with the example's label.
pub fn loss_at(spec: &ModelSpec, params: &ModelParams, x: &[f64], y: Label, kind: LossKind) -> Result<f64> {
    backprop(spec, &params.theta, x, y, kind, GradSink { theta: None, input: None })
}

/// Cross-entropy: `−log softmax(logits)[y] + (r/2)‖W‖²`; square: `½(θᵀx̃ − y)²`.
pub fn loss(spec: &ModelSpec, params: &ModelParams, example: &LabeledExample, kind: LossKind) -> Result<f64> {
    loss_at(spec, params, &example.x, example.y, kind)
}

pub fn grad_theta(spec: &ModelSpec, params: &ModelParams, example: &LabeledExample, kind: LossKind) -> Result<Vec<f64>> {
    let mut g = vec![0.0; spec.num_params()];
    backprop(
        spec,
        &params.theta,
        &example.x,
        example.y,
        kind,
        GradSink {
            theta: Some((&mut g, 1.0)),
            input: None,
        },
    )?;
    Ok(g)
}

/// Gradient in the input features, label held fixed.
pub fn grad_input(spec: &ModelSpec, params: &ModelParams, example: &LabeledExample, kind: LossKind) -> Result<Vec<f64>> {
    let mut g = vec![0.0; spec.feature_dim];
    backprop(
        spec,
        &params.theta,
        &example.x,
        example.y,
        kind,
        GradSink {
            theta: None,
            input: Some(&mut g),
        },
    )?;
    Ok(g)
}

/// Loss and input gradient in one pass.
pub fn loss_and_grad_input(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &[f64],
    y: Label,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; spec.feature_dim];
    let l = backprop(
        spec,
        &params.theta,
        x,
        y,
        kind,
        GradSink {
            theta: None,
            input: Some(&mut g),
        },
    )?;
    Ok((l, g))
}

/// `∂ℓ/∂y` for real-valued labels under the square loss; `None` otherwise.
pub fn grad_label(spec: &ModelSpec, params: &ModelParams, x: &[f64], y: Label, kind: LossKind) -> Option<f64> {
    match (kind, y) {
        (LossKind::Square, Label::Value(v)) => Some(v - logits(spec, params, x)[0]),
        _ => None,
    }
}

/// Argmax of the logits; ties go to the lowest class index.
pub fn predict(spec: &ModelSpec, params: &ModelParams, x: &[f64]) -> usize {
    let z = logits(spec, params, x);
    let mut best = 0;
    for (k, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = k;
        }
    }
    best
}

pub fn accuracy<'a, I>(spec: &ModelSpec, params: &ModelParams, examples: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let (mut correct, mut total) = (0usize, 0usize);
    for e in examples {
        total += 1;
        if e.y.class() == Some(predict(spec, params, &e.x)) {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyExamples);
    }
    Ok(correct as f64 / total as f64)
}

/// Mean loss over a non-empty set of examples, summed in order.
pub fn mean_loss<'a, I>(spec: &ModelSpec, params: &ModelParams, examples: I, kind: LossKind) -> Result<f64>
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let (mut sum, mut n) = (0.0, 0usize);
    for e in examples {
        sum += loss(spec, params, e, kind)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyExamples);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub theta: Vec<f64>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        spec: spec.clone(),
        theta: params.theta.clone(),
    };
    fs::write(path, serde_json::to_vec_pretty(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelSpec, ModelParams)> {
    let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(ck.format_version));
    }
    if ck.theta.len() != ck.spec.num_params() {
        return Err(Error::DimensionMismatch {
            expected: ck.spec.num_params(),
            got: ck.theta.len(),
        });
    }
    Ok((ck.spec, ModelParams { theta: ck.theta }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{derive_stream, finite_diff_grad, norm_sq, relative_error};

    fn params(theta: &[f64]) -> ModelParams {
        ModelParams { theta: theta.to_vec() }
    }

    fn random_instance(seed: u64, mlp: bool) -> (ModelSpec, ModelParams, LabeledExample) {
        let mut rng = derive_stream(seed, "model-test");
        let p = 2 + rng.random_range(0..5);
        let c = 2 + rng.random_range(0..4);
        let spec = if mlp {
            let mut s = ModelSpec::mlp(p, vec![3 + rng.random_range(0..4), 3], c, 0.01);
            if seed & 1 == 0 {
                s.kind = ModelKind::Mlp {
                    hidden_dims: vec![4],
                    activation: Activation::Softplus,
                };
            }
            s
        } else {
            ModelSpec::mlr(p, c, 0.01)
        };
        let theta = (0..spec.num_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = rng.random_range(0..c);
        (spec, ModelParams { theta }, LabeledExample::class(x, y))
    }

    #[test]
    fn uniform_softmax_loss() {
        let spec = ModelSpec::mlr(5, 10, 0.0);
        let e = LabeledExample::class(vec![0.3, 1.0, -2.0, 0.0, 9.0], 4);
        let l = loss(&spec, &ModelParams::zeros(&spec), &e, LossKind::CrossEntropy).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn square_loss_and_gradients() {
        let spec = ModelSpec::linear(1);
        let p = params(&[1.0, 0.0]);
        let fit = LabeledExample::value(vec![2.0], 2.0);
        assert_eq!(loss(&spec, &p, &fit, LossKind::Square).unwrap(), 0.0);
        assert_eq!(grad_theta(&spec, &p, &fit, LossKind::Square).unwrap(), vec![0.0, 0.0]);
        let e = LabeledExample::value(vec![1.0], 0.0);
        assert_eq!(loss(&spec, &p, &e, LossKind::Square).unwrap(), 0.5);
        assert_eq!(grad_theta(&spec, &p, &e, LossKind::Square).unwrap(), vec![1.0, 1.0]);
        assert_eq!(grad_input(&spec, &p, &e, LossKind::Square).unwrap(), vec![1.0]);
        assert_eq!(grad_label(&spec, &p, &e.x, e.y, LossKind::Square), Some(-1.0));
    }

    #[test]
    fn zero_mlr_has_zero_input_gradient_and_predicts_class_zero() {
        let spec = ModelSpec::mlr(3, 4, 0.1);
        let p = ModelParams::zeros(&spec);
        let e = LabeledExample::class(vec![1.0, -1.0, 2.0], 2);
        assert!(grad_input(&spec, &p, &e, LossKind::CrossEntropy)
            .unwrap()
            .iter()
            .all(|g| *g == 0.0));
        assert_eq!(predict(&spec, &p, &e.x), 0);
        assert_eq!(accuracy(&spec, &p, [&e]).unwrap(), 0.0);
        let hit = LabeledExample::class(vec![0.0; 3], 0);
        assert_eq!(accuracy(&spec, &p, [&hit]).unwrap(), 1.0);
        assert!(matches!(accuracy(&spec, &p, []), Err(Error::EmptyExamples)));
    }

    #[test]
    fn dimension_and_label_errors() {
        let spec = ModelSpec::mlr(3, 2, 0.0);
        let p = ModelParams::zeros(&spec);
        let bad_x = LabeledExample::class(vec![1.0], 0);
        assert!(matches!(
            loss(&spec, &p, &bad_x, LossKind::CrossEntropy),
            Err(Error::DimensionMismatch { .. })
        ));
        let real = LabeledExample::value(vec![0.0; 3], 1.0);
        assert!(loss(&spec, &p, &real, LossKind::CrossEntropy).is_err());
        let class = LabeledExample::class(vec![0.0; 3], 5);
        assert!(loss(&spec, &p, &class, LossKind::CrossEntropy).is_err());
        assert!(loss(&spec, &p, &class, LossKind::Square).is_err());
        let short = params(&[0.0; 3]);
        assert!(grad_theta(&spec, &short, &LabeledExample::class(vec![0.0; 3], 0), LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn parameter_count() {
        assert_eq!(ModelSpec::mlr(784, 10, 0.0).num_params(), 7850);
        assert_eq!(ModelSpec::mlp(4, vec![5], 3, 0.0).num_params(), 5 * 5 + 6 * 3);
    }

    #[test]
    fn regularization_adds_half_weight_norm() {
        for seed in 0..10 {
            let (mut spec, p, e) = random_instance(seed, seed % 2 == 1);
            spec.l2_reg = 0.0;
            let plain = loss(&spec, &p, &e, LossKind::CrossEntropy).unwrap();
            assert!(plain >= 0.0);
            spec.l2_reg = 0.3;
            let reg = loss(&spec, &p, &e, LossKind::CrossEntropy).unwrap();
            let expected = plain + 0.15 * spec.weight_norm_sq(&p.theta);
            assert!((reg - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
        let spec = ModelSpec::mlr(2, 2, 1.0);
        // bias entries are at positions 2 and 5
        assert_eq!(spec.weight_norm_sq(&[1.0, 1.0, 9.0, 1.0, 1.0, 9.0]), 4.0);
        assert!(spec.weight_norm_sq(&[0.0; 6]) <= norm_sq(&[0.0; 6]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mlp in [false, true] {
            for seed in 0..20 {
                let (spec, p, e) = random_instance(seed, mlp);
                let kind = LossKind::CrossEntropy;
                let g = grad_theta(&spec, &p, &e, kind).unwrap();
                let fd = finite_diff_grad(
                    |t| loss(&spec, &params(t), &e, kind).unwrap(),
                    &p.theta,
                    1e-5,
                );
                assert!(relative_error(&g, &fd, 1e-8) < 1e-4, "theta seed {seed} mlp {mlp}");
                let gx = grad_input(&spec, &p, &e, kind).unwrap();
                let fdx = finite_diff_grad(|x| loss_at(&spec, &p, x, e.y, kind).unwrap(), &e.x, 1e-5);
                assert!(relative_error(&gx, &fdx, 1e-8) < 1e-4, "input seed {seed} mlp {mlp}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (spec, p, _) = random_instance(3, true);
        let dir = std::env::temp_dir().join(format!("wafl-ck-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        save_checkpoint(&path, &spec, &p).unwrap();
        let (s2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(p2, p);
        let mut raw: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        raw["format_version"] = 99.into();
        fs::write(&path, raw.to_string()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion(99))));
    }
}
