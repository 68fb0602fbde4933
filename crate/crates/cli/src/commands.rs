use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use wafl_core::fl_engine::{run_federated, write_rounds_csv, RunSummary};
use wafl_core::math::derive_stream;
use wafl_core::metrics_eval::{
    domain_adaptation_eval, gamma_sweep, robustness_sweep, standard_variants, DomainAdaptConfig, GammaSweepOptions,
};
use wafl_core::model::save_checkpoint;
use wafl_core::ot::{exact_w_small, sinkhorn_w};
use wafl_core::{DiscreteDistribution, OtConfig};

use crate::config::{self, ExperimentConfig, Prepared, SourceConfig};
use crate::{CliError, GlobalArgs};

fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig, CliError> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = config::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn print_resolved(cfg: &ExperimentConfig) {
    println!("# resolved config (dry run)");
    print!("{}", cfg.to_toml());
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.output.dir)?;
    Ok(cfg.output.dir.clone())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

pub fn run(g: &GlobalArgs) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    cfg.validate_for_federation()?;
    if g.dry_run {
        print_resolved(&cfg);
        return Ok(());
    }
    let Prepared { federation, spec, train } = config::prepare(&cfg)?;
    log::info!(
        "{} clients, {} training examples, {} parameters",
        federation.num_clients(),
        federation.total_train(),
        spec.num_params()
    );
    let outcome = run_federated(&federation, &spec, &train)?;
    let dir = out_dir(&cfg)?;
    write_rounds_csv(create(&dir, "rounds.csv")?, train.variant.name(), &outcome.logs)?;
    let summary = RunSummary::new(&train, &spec, &outcome);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(wafl_core::Error::from)?)?;
    if cfg.output.checkpoint {
        save_checkpoint(dir.join("checkpoint.json"), &spec, &outcome.params)?;
    }
    println!(
        "{}: final clean accuracy {} after {} rounds; outputs in {}",
        summary.variant,
        summary.final_clean_acc.map_or("n/a".into(), |a| format!("{a:.4}")),
        summary.rounds,
        dir.display()
    );
    Ok(())
}

pub fn sweep_gamma(g: &GlobalArgs, grid: &[f64], with_attack: bool) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    cfg.validate_for_federation()?;
    if grid.is_empty() || !grid.windows(2).all(|w| w[0] < w[1]) || !grid.iter().all(|v| *v > 0.0) {
        return Err(CliError::Config("--gamma-grid: expected positive, strictly ascending values".into()));
    }
    let attack = if with_attack {
        Some(
            cfg.attack(cfg.image_data())
                .ok_or_else(|| CliError::Config("--with-attack needs an [attack] section".into()))?,
        )
    } else {
        None
    };
    if g.dry_run {
        print_resolved(&cfg);
        return Ok(());
    }
    let Prepared { federation, spec, train } = config::prepare(&cfg)?;
    let opts = GammaSweepOptions {
        rho_sample_cap: cfg.train.rho_sample_cap.unwrap_or(50),
        surrogate: cfg.surrogate(),
    };
    let res = gamma_sweep(&federation, &spec, &train, grid, attack.as_ref(), &opts)?;
    let dir = out_dir(&cfg)?;
    res.write_csv(create(&dir, "sweep_gamma.csv")?)?;
    res.write_csv(std::io::stdout())?;
    Ok(())
}

pub fn sweep_attack(g: &GlobalArgs, fractions: &[f64]) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    cfg.validate_for_federation()?;
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CliError::Config("--fractions: values must lie in [0, 1]".into()));
    }
    let attack = cfg
        .attack(cfg.image_data())
        .ok_or_else(|| CliError::Config("sweep-attack needs an [attack] section".into()))?;
    if g.dry_run {
        print_resolved(&cfg);
        return Ok(());
    }
    let Prepared { federation, spec, train } = config::prepare(&cfg)?;
    let configs = standard_variants(&train, cfg.surrogate().gamma, &attack, cfg.train.lambda_lr);
    let res = robustness_sweep(&federation, &spec, &configs, &attack, fractions)?;
    let dir = out_dir(&cfg)?;
    res.write_csv(create(&dir, "sweep_attack.csv")?)?;
    res.write_csv(std::io::stdout())?;
    Ok(())
}

pub fn domain_adapt(g: &GlobalArgs) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    let da = cfg.validate_domain_adapt()?;
    if g.dry_run {
        print_resolved(&cfg);
        return Ok(());
    }
    let sources = da
        .sources
        .iter()
        .map(|s| s.load(cfg.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let target = da.target.load(cfg.seed)?;
    let all: Vec<_> = sources.iter().flatten().chain(&target).cloned().collect();
    let (dim, classes) = SourceConfig::shape(&all, true);
    let spec = cfg.model.spec(dim, classes);
    spec.validate()?;
    let train = cfg.train_config(sources.len().max(cfg.train.clients_per_round), false)?;
    let da_cfg = DomainAdaptConfig {
        train,
        surrogate: cfg.surrogate(),
        ot: cfg.ot.clone().unwrap_or_default(),
        distance_subsample: da.distance_subsample,
        lambda_lr: cfg.train.lambda_lr,
    };
    let report = domain_adaptation_eval(&sources, &target, &spec, &da_cfg)?;
    let dir = out_dir(&cfg)?;
    report.write_csv(create(&dir, "domain_adapt.csv")?)?;
    fs::write(
        dir.join("domain_adapt.json"),
        serde_json::to_string_pretty(&report).map_err(wafl_core::Error::from)?,
    )?;
    println!("distances: {:?}", report.distances);
    println!("lambda*: {:?}", report.lambda_star);
    report.write_csv(std::io::stdout())?;
    Ok(())
}

pub const OT_CHECK_TOLERANCE: f64 = 0.01;

pub fn ot_check(g: &GlobalArgs, sizes: &[usize], trials: usize, entropic_reg: f64) -> Result<(), CliError> {
    if sizes.is_empty() || sizes.iter().any(|n| *n == 0 || *n > 64) || trials == 0 {
        return Err(CliError::Config("--sizes must lie in [1, 64] and --trials must be positive".into()));
    }
    let ot = OtConfig::default().with_reg(entropic_reg);
    ot.validate().map_err(|e| CliError::Config(format!("--entropic-reg: {e}")))?;
    if g.dry_run {
        println!("ot-check sizes={sizes:?} trials={trials} entropic_reg={entropic_reg}");
        return Ok(());
    }
    let seed = g.seed.unwrap_or(0);
    let mut worst: f64 = 0.0;
    for &n in sizes {
        let mut rng = derive_stream(seed, &format!("ot-check:{n}"));
        let mut size_worst: f64 = 0.0;
        for _ in 0..trials {
            let dim = rng.random_range(1..=3);
            let mut cloud = || {
                DiscreteDistribution::uniform(
                    (0..n)
                        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .collect(),
                )
            };
            let (p, q) = (cloud()?, cloud()?);
            let (exact, _) = exact_w_small(&p, &q, 2)?;
            let approx = sinkhorn_w(&p, &q, &ot)?.cost;
            let rel = (approx - exact).abs() / exact.max(f64::MIN_POSITIVE);
            size_worst = size_worst.max(rel);
        }
        println!("n={n}: max relative error {size_worst:.3e}");
        worst = worst.max(size_worst);
    }
    println!("max relative error: {worst:.3e}");
    if worst <= OT_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Runtime(wafl_core::Error::InvalidArgument(format!(
            "Sinkhorn relative error {worst:.3e} exceeds {OT_CHECK_TOLERANCE}"
        ))))
    }
}

pub fn dataset(g: &GlobalArgs) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    cfg.validate_for_federation()?;
    if g.dry_run {
        print_resolved(&cfg);
        return Ok(());
    }
    let Prepared { federation, spec, .. } = config::prepare(&cfg)?;
    let dir = out_dir(&cfg)?;
    let mut w = csv::Writer::from_writer(create(&dir, "partition.csv")?);
    let csv_err = |e: csv::Error| CliError::Runtime(wafl_core::Error::InvalidArgument(e.to_string()));
    w.write_record(["client_id", "train", "test", "weight", "labels"]).map_err(csv_err)?;
    for (i, c) in federation.clients.iter().enumerate() {
        let labels = c
            .classes()
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        w.write_record([
            c.client_id.to_string(),
            c.train.len().to_string(),
            c.test.len().to_string(),
            federation.weights[i].to_string(),
            labels,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    println!(
        "{} clients, {} train / {} test examples, feature_dim {}, {} classes",
        federation.num_clients(),
        federation.total_train(),
        federation.all_test().count(),
        spec.feature_dim,
        spec.num_classes
    );
    Ok(())
}
