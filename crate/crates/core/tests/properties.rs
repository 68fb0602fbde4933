use proptest::prelude::*;
use wafl_core::attacks::{pgd, select_attacked_clients};
use wafl_core::fl_engine::{agnostic_lambda_step, aggregate, sample_clients};
use wafl_core::math::linf_dist;
use wafl_core::model::{self, load_checkpoint, save_checkpoint};
use wafl_core::ot::{cost_matrix, exact_w_small, sinkhorn_w, GroundMetric};
use wafl_core::surrogate::surrogate_loss;
use wafl_core::{
    AttackConfig, DiscreteDistribution, LabeledExample, LossKind, ModelParams, ModelSpec, OtConfig,
    ProbabilityVector, SurrogateConfig,
};

fn cloud(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), n)
}

fn mlr_instance() -> impl Strategy<Value = (ModelSpec, ModelParams, LabeledExample)> {
    (2usize..5, 2usize..4).prop_flat_map(|(dim, classes)| {
        let spec = ModelSpec::mlr(dim, classes, 0.0);
        let n = spec.num_params();
        (
            Just(spec),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-2.0f64..2.0, dim),
            0..classes,
        )
            .prop_map(|(spec, theta, x, y)| (spec, ModelParams { theta }, LabeledExample::class(x, y)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn aggregate_ignores_arrival_order(
        models in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..6),
        weights in prop::collection::vec(0.05f64..1.0, 6),
        rotate in 0usize..6,
    ) {
        let m = models.len();
        let lambda = ProbabilityVector::from_weights(&weights[..m]).unwrap();
        let local: Vec<(usize, ModelParams)> = models
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, theta)| (i, ModelParams { theta }))
            .collect();
        let mut shuffled = local.clone();
        shuffled.rotate_left(rotate % m);
        shuffled.reverse();
        let a = aggregate(&local, &lambda).unwrap();
        let b = aggregate(&shuffled, &lambda).unwrap();
        prop_assert_eq!(&a, &b);
        for j in 0..3 {
            let lo = models.iter().map(|t| t[j]).fold(f64::INFINITY, f64::min);
            let hi = models.iter().map(|t| t[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.theta[j] >= lo - 1e-12 && a.theta[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn sampled_clients_are_sorted_and_distinct(m in 1usize..40, k in 1usize..40, seed in 0u64..50, round in 0usize..20) {
        let s = sample_clients(m, k, seed, round);
        prop_assert_eq!(s.len(), k.min(m));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|i| *i < m));
        prop_assert_eq!(s, sample_clients(m, k, seed, round));
    }

    #[test]
    fn attacked_count_is_rounded_fraction(m in 1usize..50, f in 0.0f64..=1.0, seed in 0u64..50) {
        let ids = select_attacked_clients(m, f, seed);
        prop_assert_eq!(ids.len(), (f * m as f64).round() as usize);
        prop_assert!(ids.iter().all(|i| *i < m));
    }

    #[test]
    fn agnostic_step_ignores_uniform_loss_shifts(
        losses in prop::collection::vec(0.0f64..3.0, 2..6),
        shift in -2.0f64..2.0,
        lr in 0.0f64..0.5,
    ) {
        let lambda = ProbabilityVector::uniform(losses.len());
        let shifted: Vec<f64> = losses.iter().map(|l| l + shift).collect();
        let a = agnostic_lambda_step(&lambda, &losses, lr).unwrap();
        let b = agnostic_lambda_step(&lambda, &shifted, lr).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_transport_is_symmetric_and_beats_identity(
        (p, q) in (1usize..7, 1usize..4).prop_flat_map(|(n, dim)| (cloud(n, dim), cloud(n, dim))),
    ) {
        let n = p.len();
        let (pp, qq) = (DiscreteDistribution::uniform(p.clone()).unwrap(), DiscreteDistribution::uniform(q.clone()).unwrap());
        let (pq, plan) = exact_w_small(&pp, &qq, 2).unwrap();
        let (qp, _) = exact_w_small(&qq, &pp, 2).unwrap();
        prop_assert!((pq - qp).abs() < 1e-12);
        prop_assert!(plan.marginal_error() < 1e-12);
        let identity: f64 = p.iter().zip(&q).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sum::<f64>() / n as f64;
        prop_assert!(pq * pq <= identity + 1e-12);
        let (self_cost, _) = exact_w_small(&pp, &pp, 2).unwrap();
        prop_assert!(self_cost.abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_plan_has_exact_marginals(p in cloud(5, 2), q in cloud(4, 2)) {
        let a = DiscreteDistribution::uniform(p).unwrap();
        let b = DiscreteDistribution::uniform(q).unwrap();
        let res = sinkhorn_w(&a, &b, &OtConfig::default().with_reg(1e-2)).unwrap();
        prop_assert!(res.coupling.marginal_error() < 1e-12);
        prop_assert!(res.coupling.plan.iter().flatten().all(|v| *v >= 0.0));
        let cost = cost_matrix(&a.points, &b.points, 2, GroundMetric::Euclidean);
        let (exact, _) = exact_w_small(&a, &b, 2).unwrap();
        prop_assert!(res.coupling.transport_cost(&cost) >= exact * exact - 1e-9);
    }

    #[test]
    fn distribution_round_trips(points in cloud(4, 3), w in prop::collection::vec(0.01f64..1.0, 4)) {
        let d = DiscreteDistribution::new(points, ProbabilityVector::from_weights(&w).unwrap()).unwrap();
        prop_assert_eq!(&DiscreteDistribution::from_json(&d.to_json().unwrap()).unwrap(), &d);
        prop_assert_eq!(&DiscreteDistribution::from_csv(&d.to_csv()).unwrap(), &d);
    }

    #[test]
    fn pgd_stays_in_the_clipped_ball((spec, p, z) in mlr_instance(), eps in 0.0f64..1.0, steps in 0usize..15) {
        let cfg = AttackConfig {
            epsilon: eps,
            alpha: eps / 4.0 + 1e-3,
            steps,
            clip_min: Some(-1.5),
            clip_max: Some(1.5),
            attacked_fraction: 0.0,
            seed: 0,
        };
        let adv = pgd(&spec, &p, &z, &cfg, LossKind::CrossEntropy).unwrap();
        prop_assert!(linf_dist(&adv.x, &z.x) <= eps + 1e-12);
        let inside = |v: &f64| (-1.5..=1.5).contains(v);
        prop_assert!(adv.x.iter().zip(&z.x).all(|(a, x)| !inside(x) || inside(a)));
        prop_assert_eq!(adv.y, z.y);
    }

    #[test]
    fn surrogate_dominates_loss_and_shrinks_with_gamma((spec, p, z) in mlr_instance(), g in 0.5f64..5.0) {
        let kind = LossKind::CrossEntropy;
        let plain = model::loss(&spec, &p, &z, kind).unwrap();
        let lo = surrogate_loss(&spec, &p, &z, &SurrogateConfig::new(g), kind).unwrap();
        let hi = surrogate_loss(&spec, &p, &z, &SurrogateConfig::new(4.0 * g), kind).unwrap();
        prop_assert!(lo >= plain - 1e-12);
        prop_assert!(hi >= plain - 1e-12);
        prop_assert!(lo >= hi - 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let spec = ModelSpec::mlp(3, vec![4], 2, 0.1);
    let theta: Vec<f64> = (0..spec.num_params()).map(|i| (i as f64 * 0.7).sin() / 3.0).collect();
    let params = ModelParams { theta };
    let dir = tempfile_dir();
    let path = dir.join("ckpt.json");
    save_checkpoint(&path, &spec, &params).unwrap();
    let (s, p) = load_checkpoint(&path).unwrap();
    assert_eq!(s, spec);
    assert_eq!(p, params);
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("wafl-core-props-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
