//! l∞ gradient-sign attacks (FGSM, PGD) used both as adversarial-training
//! baselines and to shift clients' held-out data at evaluation time.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FederationData, LabeledExample};
use crate::error::{Error, Result};
use crate::math::derive_stream;
use crate::model::{self, LossKind, ModelParams, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub clip_min: Option<f64>,
    #[serde(default)]
    pub clip_max: Option<f64>,
    #[serde(default)]
    pub attacked_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    /// ε = 0.3, α = 0.01, 40 steps, pixels clipped to [0, 1].
    pub fn mnist() -> Self {
        Self {
            epsilon: 0.3,
            alpha: 0.01,
            steps: 40,
            clip_min: Some(0.0),
            clip_max: Some(1.0),
            attacked_fraction: 0.0,
            seed: 0,
        }
    }

    /// ε = 8/255, α = 2/255, 10 steps, pixels clipped to [0, 1].
    pub fn cifar() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            clip_min: Some(0.0),
            clip_max: Some(1.0),
            attacked_fraction: 0.0,
            seed: 0,
        }
    }

    /// Unclipped attack for unscaled synthetic features.
    pub fn unclipped(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            epsilon,
            alpha,
            steps,
            clip_min: None,
            clip_max: None,
            attacked_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.attacked_fraction = fraction;
        self
    }

    pub fn clip(&self) -> Option<(f64, f64)> {
        match (self.clip_min, self.clip_max) {
            (None, None) => None,
            (lo, hi) => Some((lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be a finite nonnegative number"));
        }
        if self.steps >= 1 && !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive when steps >= 1"));
        }
        if let (Some(lo), Some(hi)) = (self.clip_min, self.clip_max) {
            if !(lo < hi) {
                return Err(Error::invalid("clip_min must be below clip_max"));
            }
        }
        if !(0.0..=1.0).contains(&self.attacked_fraction) {
            return Err(Error::invalid("attacked_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clip_into(x: &mut [f64], clip: Option<(f64, f64)>) {
    if let Some((lo, hi)) = clip {
        x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

/// `x' = clip(x + ε · sign(∇_x ℓ))`, label unchanged.
pub fn fgsm(
    spec: &ModelSpec,
    params: &ModelParams,
    example: &LabeledExample,
    epsilon: f64,
    clip: Option<(f64, f64)>,
    kind: LossKind,
) -> Result<LabeledExample> {
    let g = model::grad_input(spec, params, example, kind)?;
    let mut x: Vec<f64> = example
        .x
        .iter()
        .zip(&g)
        .map(|(xi, gi)| xi + epsilon * sign(*gi))
        .collect();
    clip_into(&mut x, clip);
    Ok(example.with_features(x))
}

/// `steps` iterations of `x ← Π_ε(clip(x + α sign(∇_x ℓ)))` from the clean
/// point, where `Π_ε` projects onto the l∞ ball of radius ε around it.
pub fn pgd(
    spec: &ModelSpec,
    params: &ModelParams,
    example: &LabeledExample,
    cfg: &AttackConfig,
    kind: LossKind,
) -> Result<LabeledExample> {
    let clip = cfg.clip();
    let x0 = &example.x;
    let mut x = x0.clone();
    for _ in 0..cfg.steps {
        let (_, g) = model::loss_and_grad_input(spec, params, &x, example.y, kind)?;
        for (j, xj) in x.iter_mut().enumerate() {
            let mut v = *xj + cfg.alpha * sign(g[j]);
            if let Some((lo, hi)) = clip {
                v = v.clamp(lo, hi);
            }
            *xj = v.clamp(x0[j] - cfg.epsilon, x0[j] + cfg.epsilon);
        }
    }
    Ok(example.with_features(x))
}

/// `round(fraction · m)` distinct client ids, ascending.
pub fn select_attacked_clients(m: usize, attacked_fraction: f64, seed: u64) -> BTreeSet<usize> {
    let count = ((attacked_fraction.clamp(0.0, 1.0) * m as f64).round() as usize).min(m);
    let mut ids: Vec<usize> = (0..m).collect();
    ids.shuffle(&mut derive_stream(seed, "attack:select"));
    ids.truncate(count);
    ids.into_iter().collect()
}

/// PGD-perturbs every test example of the attacked clients against `params`;
/// train sets and unattacked clients are copied unchanged.
pub fn shift_test_sets(
    federation: &FederationData,
    spec: &ModelSpec,
    params: &ModelParams,
    cfg: &AttackConfig,
    kind: LossKind,
) -> Result<FederationData> {
    cfg.validate()?;
    let attacked = select_attacked_clients(federation.num_clients(), cfg.attacked_fraction, cfg.seed);
    let mut shifted = federation.clone();
    if cfg.epsilon == 0.0 || cfg.steps == 0 {
        return Ok(shifted);
    }
    for id in attacked {
        let client = &mut shifted.clients[id];
        client.test = client
            .test
            .par_iter()
            .map(|e| pgd(spec, params, e, cfg, kind))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(shifted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_mixture;
    use crate::math::{derive_stream, finite_diff_grad, linf_dist};
    use rand::Rng;

    fn logistic() -> (ModelSpec, ModelParams) {
        // class 0 has zero weights; class 1 has w = (1, −1): a binary logistic model
        let spec = ModelSpec::mlr(2, 2, 0.0);
        let params = ModelParams {
            theta: vec![0.0, 0.0, 0.0, 1.0, -1.0, 0.0],
        };
        (spec, params)
    }

    fn random_instance(seed: u64) -> (ModelSpec, ModelParams, LabeledExample) {
        let mut rng = derive_stream(seed, "attack-test");
        let spec = ModelSpec::mlr(5, 3, 0.0);
        let theta = (0..spec.num_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = (0..5).map(|_| rng.random_range(0.1..0.9)).collect();
        (spec, ModelParams { theta }, LabeledExample::class(x, rng.random_range(0..3)))
    }

    #[test]
    fn fgsm_on_binary_logistic() {
        let (spec, p) = logistic();
        let e = LabeledExample::class(vec![0.0, 0.0], 1);
        let g = model::grad_input(&spec, &p, &e, LossKind::CrossEntropy).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
        let fd = finite_diff_grad(
            |x| model::loss_at(&spec, &p, x, e.y, LossKind::CrossEntropy).unwrap(),
            &e.x,
            1e-6,
        );
        assert!((fd[0] + 0.5).abs() < 1e-8 && (fd[1] - 0.5).abs() < 1e-8);
        let adv = fgsm(&spec, &p, &e, 0.1, None, LossKind::CrossEntropy).unwrap();
        assert_eq!(adv.x, vec![-0.1, 0.1]);
        assert_eq!(adv.y, e.y);
    }

    #[test]
    fn fgsm_degenerate_cases() {
        let (spec, p) = logistic();
        let e = LabeledExample::class(vec![0.3, 0.7], 1);
        assert_eq!(fgsm(&spec, &p, &e, 0.0, None, LossKind::CrossEntropy).unwrap(), e);
        let zero = ModelParams::zeros(&spec);
        assert_eq!(fgsm(&spec, &zero, &e, 0.5, None, LossKind::CrossEntropy).unwrap(), e);
    }

    #[test]
    fn pgd_single_step_is_fgsm() {
        for seed in 0..30 {
            let (spec, p, e) = random_instance(seed);
            let eps = 0.05;
            let cfg = AttackConfig {
                epsilon: eps,
                alpha: eps,
                steps: 1,
                clip_min: Some(0.0),
                clip_max: Some(1.0),
                attacked_fraction: 0.0,
                seed: 0,
            };
            let a = pgd(&spec, &p, &e, &cfg, LossKind::CrossEntropy).unwrap();
            let b = fgsm(&spec, &p, &e, eps, cfg.clip(), LossKind::CrossEntropy).unwrap();
            assert_eq!(a, b);
            let mut big = cfg.clone();
            big.alpha = 0.2;
            let c = pgd(&spec, &p, &e, &big, LossKind::CrossEntropy).unwrap();
            assert_eq!(c, b);
        }
    }

    #[test]
    fn pgd_stays_in_ball_and_box() {
        for seed in 0..30 {
            let (spec, p, e) = random_instance(seed);
            let cfg = AttackConfig {
                epsilon: 0.3,
                alpha: 0.07,
                steps: 12,
                clip_min: Some(0.0),
                clip_max: Some(1.0),
                attacked_fraction: 0.0,
                seed: 0,
            };
            let adv = pgd(&spec, &p, &e, &cfg, LossKind::CrossEntropy).unwrap();
            assert!(linf_dist(&adv.x, &e.x) <= 0.3 + 1e-12);
            assert!(adv.x.iter().all(|v| (0.0..=1.0).contains(v)));
            let before = model::loss(&spec, &p, &e, LossKind::CrossEntropy).unwrap();
            let after = model::loss(&spec, &p, &adv, LossKind::CrossEntropy).unwrap();
            assert!(after >= before);
        }
    }

    #[test]
    fn attacked_client_selection() {
        assert!(select_attacked_clients(10, 0.0, 7).is_empty());
        assert_eq!(select_attacked_clients(10, 1.0, 7), (0..10).collect());
        let a = select_attacked_clients(10, 0.4, 7);
        assert_eq!(a.len(), 4);
        assert_eq!(a, select_attacked_clients(10, 0.4, 7));
        assert_eq!(a.into_iter().collect::<Vec<_>>(), PINNED_10_04_7.to_vec());
    }

    const PINNED_10_04_7: [usize; 4] = [2, 6, 7, 9];

    #[test]
    fn shifting_with_nothing_to_do_is_identity() {
        let ex = gen_synthetic_mixture(2, 3, 80, 3.0, 3).unwrap();
        let fed = crate::data::partition_noniid(&ex, 4, 2, 0.0, 1).unwrap();
        let spec = ModelSpec::mlr(3, 2, 0.0);
        let p = ModelParams {
            theta: vec![1.0, 0.5, -0.5, 0.0, -1.0, 0.2, 0.1, 0.3],
        };
        let none = AttackConfig::unclipped(0.5, 0.1, 5).with_fraction(0.0);
        assert_eq!(shift_test_sets(&fed, &spec, &p, &none, LossKind::CrossEntropy).unwrap(), fed);
        let zero = AttackConfig::unclipped(0.0, 0.1, 5).with_fraction(1.0);
        assert_eq!(shift_test_sets(&fed, &spec, &p, &zero, LossKind::CrossEntropy).unwrap(), fed);
        let all = AttackConfig::unclipped(0.5, 0.1, 5).with_fraction(0.5);
        let shifted = shift_test_sets(&fed, &spec, &p, &all, LossKind::CrossEntropy).unwrap();
        let attacked = select_attacked_clients(4, 0.5, 0);
        for (i, (a, b)) in fed.clients.iter().zip(&shifted.clients).enumerate() {
            assert_eq!(a.train, b.train);
            assert_eq!(a.test == b.test, !attacked.contains(&i));
        }
    }
}
