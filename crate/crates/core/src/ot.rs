//! Optimal transport between discrete distributions: an exact small-instance
//! solver (assignment on a common-denominator expansion), log-domain Sinkhorn
//! with ε-scaling, dataset distances, the λ-selection linear program, fixed
//! support barycenters and concentration radii.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{embed, subsample, Embedding, LabeledExample};
use crate::error::{Error, Result};
use crate::math::{dist_sq, log_sum_exp, ProbabilityVector};

/// Weighted point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    pub points: Vec<Vec<f64>>,
    pub masses: ProbabilityVector,
}

impl DiscreteDistribution {
    pub fn new(points: Vec<Vec<f64>>, masses: ProbabilityVector) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("distribution needs at least one point"));
        }
        if points.len() != masses.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: masses.len(),
            });
        }
        let dim = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { points, masses })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("distribution needs at least one point"));
        }
        let masses = ProbabilityVector::uniform(points.len());
        Self::new(points, masses)
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        Self {
            points: vec![point],
            masses: ProbabilityVector::uniform(1),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Points and masses as JSON `{"points": [[..]], "masses": [..]}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: DiscreteDistribution = serde_json::from_str(s)?;
        Self::new(raw.points, raw.masses)
    }

    /// CSV with header `mass,x0,x1,...`, one row per atom.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mass");
        for j in 0..self.dim() {
            out.push_str(&format!(",x{j}"));
        }
        out.push('\n');
        for (p, m) in self.points.iter().zip(self.masses.as_slice()) {
            out.push_str(&format!("{m:?}"));
            for v in p {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(s.as_bytes());
        let mut points = Vec::new();
        let mut masses = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::invalid(e.to_string()))?;
            let vals = record
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::invalid(format!("`{f}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let (m, p) = vals.split_first().ok_or_else(|| Error::invalid("empty row"))?;
            masses.push(*m);
            points.push(p.to_vec());
        }
        Self::new(points, ProbabilityVector::new(masses)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = if path.extension().is_some_and(|e| e == "csv") {
            self.to_csv()
        } else {
            self.to_json()?
        };
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "csv") {
            Self::from_csv(&body)
        } else {
            Self::from_json(&body)
        }
    }
}

/// Ground metric between support points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundMetric {
    #[default]
    Euclidean,
    /// l∞ distance, the dual of the FGSM/PGD threat model.
    Chebyshev,
}

impl GroundMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            GroundMetric::Euclidean => dist_sq(a, b).sqrt(),
            GroundMetric::Chebyshev => crate::math::linf_dist(a, b),
        }
    }
}

/// `C_ij = d(x_i, y_j)^p`.
pub fn cost_matrix(p_points: &[Vec<f64>], q_points: &[Vec<f64>], exponent: u8, metric: GroundMetric) -> Vec<Vec<f64>> {
    p_points
        .iter()
        .map(|a| {
            q_points
                .iter()
                .map(|b| match (exponent, metric) {
                    (2, GroundMetric::Euclidean) => dist_sq(a, b),
                    (e, m) => m.distance(a, b).powi(i32::from(e)),
                })
                .collect()
        })
        .collect()
}

/// Transport plan with its marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub plan: Vec<Vec<f64>>,
    pub row_marginal: ProbabilityVector,
    pub col_marginal: ProbabilityVector,
}

impl Coupling {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let m = self.col_marginal.len();
        let mut out = vec![0.0; m];
        for row in &self.plan {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Largest absolute deviation of either marginal.
    pub fn marginal_error(&self) -> f64 {
        let r = self
            .row_sums()
            .iter()
            .zip(self.row_marginal.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let c = self
            .col_sums()
            .iter()
            .zip(self.col_marginal.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        r.max(c)
    }

    pub fn transport_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.plan
            .iter()
            .zip(cost)
            .map(|(pr, cr)| pr.iter().zip(cr).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Exact solver

pub const EXACT_MAX_SUPPORT: usize = 64;

/// Minimum-cost perfect matching on a square matrix (Hungarian algorithm with
/// potentials, O(n³)). Returns `assignment[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Smallest `N ≤ limit` with every mass an integer multiple of `1/N`.
fn common_denominator(masses: &[&[f64]], limit: usize) -> Option<usize> {
    (1..=limit).find(|&n| {
        masses.iter().all(|ms| {
            ms.iter().all(|m| {
                let scaled = m * n as f64;
                (scaled - scaled.round()).abs() <= 1e-9 * n as f64
            })
        })
    })
}

/// Exact `W_p(P, Q)` and an optimal plan for supports of at most 64 atoms
/// whose masses share a denominator of at most 64.
pub fn exact_w_small(p: &DiscreteDistribution, q: &DiscreteDistribution, exponent: u8) -> Result<(f64, Coupling)> {
    exact_w_small_with_metric(p, q, exponent, GroundMetric::Euclidean)
}

pub fn exact_w_small_with_metric(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    exponent: u8,
    metric: GroundMetric,
) -> Result<(f64, Coupling)> {
    if !matches!(exponent, 1 | 2) {
        return Err(Error::invalid("cost exponent must be 1 or 2"));
    }
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if p.len() > EXACT_MAX_SUPPORT || q.len() > EXACT_MAX_SUPPORT {
        return Err(Error::ExactSolverTooLarge(format!(
            "supports of {} and {} atoms, limit {EXACT_MAX_SUPPORT}",
            p.len(),
            q.len()
        )));
    }
    let denom = common_denominator(&[p.masses.as_slice(), q.masses.as_slice()], EXACT_MAX_SUPPORT)
        .ok_or_else(|| {
            Error::ExactSolverTooLarge(format!(
                "masses need a common denominator <= {EXACT_MAX_SUPPORT}"
            ))
        })?;
    let expand = |masses: &[f64]| -> Vec<usize> {
        masses
            .iter()
            .enumerate()
            .flat_map(|(i, m)| std::iter::repeat_n(i, (m * denom as f64).round() as usize))
            .collect()
    };
    let rows = expand(p.masses.as_slice());
    let cols = expand(q.masses.as_slice());
    debug_assert_eq!(rows.len(), denom);
    debug_assert_eq!(cols.len(), denom);

    let cost = cost_matrix(&p.points, &q.points, exponent, metric);
    let expanded: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| cost[i][j]).collect())
        .collect();
    let assignment = hungarian(&expanded);
    let mut plan = vec![vec![0.0; q.len()]; p.len()];
    let unit = 1.0 / denom as f64;
    for (r, c) in assignment.iter().enumerate() {
        plan[rows[r]][cols[*c]] += unit;
    }
    let coupling = Coupling {
        plan,
        row_marginal: p.masses.clone(),
        col_marginal: q.masses.clone(),
    };
    let total = coupling.transport_cost(&cost).max(0.0);
    Ok((total.powf(1.0 / f64::from(exponent)), coupling))
}

// ---------------------------------------------------------------------------
// Sinkhorn

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtConfig {
    /// Entropic regularization relative to the largest entry of the cost
    /// matrix.
    pub entropic_reg: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// l1 row-marginal error at which the scaling stops; the plan is
    /// rounded onto both marginals afterwards.
    #[serde(default = "default_marginal_tol")]
    pub marginal_tol: f64,
    #[serde(default = "default_exponent")]
    pub cost_exponent: u8,
    /// Anneal the regularization from 1 down to `entropic_reg`.
    #[serde(default = "default_anneal")]
    pub anneal: bool,
    #[serde(default)]
    pub metric: GroundMetric,
}

fn default_max_iters() -> usize {
    20_000
}

fn default_marginal_tol() -> f64 {
    1e-6
}

fn default_exponent() -> u8 {
    2
}

fn default_anneal() -> bool {
    true
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            entropic_reg: 1e-3,
            max_iters: default_max_iters(),
            marginal_tol: default_marginal_tol(),
            cost_exponent: 2,
            anneal: true,
            metric: GroundMetric::Euclidean,
        }
    }
}

impl OtConfig {
    pub fn with_reg(mut self, reg: f64) -> Self {
        self.entropic_reg = reg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.entropic_reg > 0.0 && self.entropic_reg.is_finite()) {
            return Err(Error::invalid("entropic_reg must be positive"));
        }
        if !matches!(self.cost_exponent, 1 | 2) {
            return Err(Error::invalid("cost_exponent must be 1 or 2"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    /// `⟨plan, C⟩^{1/p}` evaluated without the entropy term.
    pub cost: f64,
    pub coupling: Coupling,
    pub converged: bool,
    /// Row-marginal l1 error measured in the last scaling iteration, before
    /// rounding.
    pub marginal_error: f64,
    pub iterations: usize,
}

impl SinkhornResult {
    /// `⟨plan, C⟩`, i.e. `W_p^p`.
    pub fn cost_pow(&self, exponent: u8) -> f64 {
        self.cost.powi(i32::from(exponent))
    }
}

/// Log-domain Sinkhorn on a cost matrix with strictly positive marginals.
/// Returns the plan, iteration count and final row-marginal error.
fn sinkhorn_log(a: &[f64], b: &[f64], cost: &[Vec<f64>], cfg: &OtConfig) -> (Vec<Vec<f64>>, usize, f64) {
    let n = a.len();
    let m = b.len();
    let cmax = cost.iter().flatten().copied().fold(0.0, f64::max);
    let scale = if cmax > 0.0 { cmax } else { 1.0 };
    let c: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|v| v / scale).collect()).collect();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut eps_schedule = Vec::new();
    if cfg.anneal {
        let mut e = 1.0f64.max(cfg.entropic_reg);
        while e > cfg.entropic_reg {
            eps_schedule.push(e);
            e *= 0.5;
        }
    }
    eps_schedule.push(cfg.entropic_reg);

    let ct: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| c[i][j]).collect()).collect();
    let mut buf = vec![0.0; n.max(m)];
    let mut total_iters = 0;
    let mut err = f64::INFINITY;
    let stages = eps_schedule.len();
    for (stage, &eps) in eps_schedule.iter().enumerate() {
        let last = stage + 1 == stages;
        let budget = if last { cfg.max_iters } else { cfg.max_iters.min(500) };
        let tol = if last { cfg.marginal_tol } else { cfg.marginal_tol.max(1e-6) };
        let inv = 1.0 / eps;
        for _ in 0..budget {
            total_iters += 1;
            // the row sums of the current plan are a_i exp((f_old - f_new)/ε),
            // so the f-update measures the row error of the previous iterate
            err = 0.0;
            for i in 0..n {
                for j in 0..m {
                    buf[j] = (g[j] - c[i][j]) * inv;
                }
                let fi = eps * (log_a[i] - log_sum_exp(&buf[..m]));
                err += a[i] * (((f[i] - fi) * inv).exp() - 1.0).abs();
                f[i] = fi;
            }
            for j in 0..m {
                for i in 0..n {
                    buf[i] = (f[i] - ct[j][i]) * inv;
                }
                g[j] = eps * (log_b[j] - log_sum_exp(&buf[..n]));
            }
            if err <= tol && total_iters > 1 {
                break;
            }
        }
    }
    let eps = cfg.entropic_reg;
    let plan = (0..n)
        .map(|i| (0..m).map(|j| ((f[i] + g[j] - c[i][j]) / eps).exp()).collect())
        .collect();
    (plan, total_iters, err)
}

/// Projects a nearly feasible plan onto the transport polytope
/// (row then column down-scaling, then a rank-one mass correction).
fn round_to_marginals(plan: &mut [Vec<f64>], a: &[f64], b: &[f64]) {
    for (row, ai) in plan.iter_mut().zip(a) {
        let s: f64 = row.iter().sum();
        if s > *ai && s > 0.0 {
            let k = ai / s;
            row.iter_mut().for_each(|v| *v *= k);
        }
    }
    let m = b.len();
    for j in 0..m {
        let s: f64 = plan.iter().map(|r| r[j]).sum();
        if s > b[j] && s > 0.0 {
            let k = b[j] / s;
            plan.iter_mut().for_each(|r| r[j] *= k);
        }
    }
    let err_r: Vec<f64> = plan
        .iter()
        .zip(a)
        .map(|(r, ai)| (ai - r.iter().sum::<f64>()).max(0.0))
        .collect();
    let err_c: Vec<f64> = (0..m)
        .map(|j| (b[j] - plan.iter().map(|r| r[j]).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = err_r.iter().sum();
    if total > 0.0 {
        for (row, er) in plan.iter_mut().zip(&err_r) {
            for (v, ec) in row.iter_mut().zip(&err_c) {
                *v += er * ec / total;
            }
        }
    }
}

/// Entropic OT with a precomputed cost matrix.
pub fn sinkhorn_with_cost(a: &ProbabilityVector, b: &ProbabilityVector, cost: &[Vec<f64>], cfg: &OtConfig) -> Result<SinkhornResult> {
    cfg.validate()?;
    // zero-mass atoms carry no potential; solve on the positive support
    let rows: Vec<usize> = (0..a.len()).filter(|i| a[*i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|j| b[*j] > 0.0).collect();
    let sa: Vec<f64> = rows.iter().map(|i| a[*i]).collect();
    let sb: Vec<f64> = cols.iter().map(|j| b[*j]).collect();
    let sc: Vec<Vec<f64>> = rows
        .iter()
        .map(|i| cols.iter().map(|j| cost[*i][*j]).collect())
        .collect();

    let (mut small, iterations, err) = if sa.len() == 1 || sb.len() == 1 {
        // a single atom on either side leaves exactly one feasible plan
        let plan = sa.iter().map(|ai| sb.iter().map(|bj| ai * bj).collect()).collect();
        (plan, 0, 0.0)
    } else {
        sinkhorn_log(&sa, &sb, &sc, cfg)
    };
    let converged = err <= cfg.marginal_tol;
    round_to_marginals(&mut small, &sa, &sb);

    let mut plan = vec![vec![0.0; b.len()]; a.len()];
    for (ri, i) in rows.iter().enumerate() {
        for (ci, j) in cols.iter().enumerate() {
            plan[*i][*j] = small[ri][ci];
        }
    }
    let coupling = Coupling {
        plan,
        row_marginal: a.clone(),
        col_marginal: b.clone(),
    };
    let total = coupling.transport_cost(cost).max(0.0);
    if !converged {
        log::debug!("sinkhorn unconverged after {iterations} iterations, marginal error {err:e}");
    }
    Ok(SinkhornResult {
        cost: total.powf(1.0 / f64::from(cfg.cost_exponent)),
        coupling,
        converged,
        marginal_error: err,
        iterations,
    })
}

pub fn sinkhorn_w(p: &DiscreteDistribution, q: &DiscreteDistribution, cfg: &OtConfig) -> Result<SinkhornResult> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    cfg.validate()?;
    let cost = cost_matrix(&p.points, &q.points, cfg.cost_exponent, cfg.metric);
    sinkhorn_with_cost(&p.masses, &q.masses, &cost, cfg)
}

fn lexicographic(a: &[Vec<f64>], b: &[Vec<f64>]) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        for (pa, pb) in a.iter().zip(b) {
            for (x, y) in pa.iter().zip(pb) {
                let o = x.total_cmp(y);
                if o.is_ne() {
                    return o;
                }
            }
        }
        std::cmp::Ordering::Equal
    })
}

/// Entropic `W₂²` between feature clouds of two datasets, each subsampled to
/// at most `subsample_size` points. The pair is put in a canonical order
/// before solving so the result is symmetric bit for bit.
pub fn pairwise_dataset_distance(
    a: &[LabeledExample],
    b: &[LabeledExample],
    cfg: &OtConfig,
    subsample_size: usize,
    seed: u64,
) -> Result<f64> {
    pairwise_dataset_distance_embedded(a, b, cfg, subsample_size, seed, Embedding::FeaturesOnly)
}

pub fn pairwise_dataset_distance_embedded(
    a: &[LabeledExample],
    b: &[LabeledExample],
    cfg: &OtConfig,
    subsample_size: usize,
    seed: u64,
    embedding: Embedding,
) -> Result<f64> {
    if subsample_size < 2 {
        return Err(Error::invalid("subsample must be at least 2"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let pick = |d: &[LabeledExample]| -> Vec<Vec<f64>> {
        subsample(d, subsample_size, seed, "distance:subsample")
            .iter()
            .map(|e| embed(e, embedding))
            .collect()
    };
    let (mut pa, mut pb) = (pick(a), pick(b));
    if lexicographic(&pa, &pb).is_gt() {
        std::mem::swap(&mut pa, &mut pb);
    }
    let cfg = OtConfig {
        cost_exponent: 2,
        ..cfg.clone()
    };
    let res = sinkhorn_w(&DiscreteDistribution::uniform(pa)?, &DiscreteDistribution::uniform(pb)?, &cfg)?;
    Ok(res.cost_pow(2))
}

// ---------------------------------------------------------------------------
// λ selection and barycenters

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: ProbabilityVector,
    /// `ρ*² = min_i cost_i`
    pub rho_star_sq: f64,
}

pub const LAMBDA_TIE_TOL: f64 = 1e-9;

/// Solves `min_{λ∈Δ} Σ λ_i c_i`: all mass on the smallest cost, split evenly
/// among costs within `1e-9` of it.
pub fn select_lambda_domain_adaptation(costs: &[f64]) -> Result<LambdaSelection> {
    if costs.is_empty() {
        return Err(Error::invalid("need at least one cost"));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite);
    }
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let winners: Vec<usize> = (0..costs.len())
        .filter(|i| costs[*i] - min <= LAMBDA_TIE_TOL)
        .collect();
    let share = 1.0 / winners.len() as f64;
    let mut lambda = vec![0.0; costs.len()];
    for i in winners {
        lambda[i] = share;
    }
    Ok(LambdaSelection {
        lambda: ProbabilityVector::new(lambda)?,
        rho_star_sq: min,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Barycenter {
    pub distribution: DiscreteDistribution,
    /// `Σ λ_i W₂²(P_i, Q)` with sharp Sinkhorn costs.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const BARYCENTER_TOL: f64 = 1e-6;

/// `Σ λ_i W₂²(P_i, Q)` with Sinkhorn costs.
pub fn barycenter_objective(dists: &[DiscreteDistribution], lambda: &[f64], q: &DiscreteDistribution, cfg: &OtConfig) -> Result<(f64, Vec<f64>)> {
    let cfg = OtConfig {
        cost_exponent: 2,
        ..cfg.clone()
    };
    let costs = dists
        .iter()
        .map(|p| Ok(sinkhorn_w(p, q, &cfg)?.cost_pow(2)))
        .collect::<Result<Vec<f64>>>()?;
    let obj = costs.iter().zip(lambda).map(|(c, l)| c * l).sum();
    Ok((obj, costs))
}

/// Fixed-support barycenter minimizing `Σ λ_i W₂²(P_i, Q)` over masses on
/// `support`, via log-domain iterative Bregman projections. Iterates until the
/// mass vector moves by at most `1e-6` (l1) or `cfg.max_iters`.
pub fn barycenter_fixed_support(
    dists: &[DiscreteDistribution],
    lambda: &ProbabilityVector,
    support: &[Vec<f64>],
    cfg: &OtConfig,
) -> Result<Barycenter> {
    cfg.validate()?;
    if dists.is_empty() || support.is_empty() {
        return Err(Error::invalid("barycenter needs distributions and a support"));
    }
    if lambda.len() != dists.len() {
        return Err(Error::DimensionMismatch {
            expected: dists.len(),
            got: lambda.len(),
        });
    }
    let dim = support[0].len();
    if let Some(d) = dists.iter().find(|d| d.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: d.dim(),
        });
    }
    let s = support.len();
    let active: Vec<usize> = (0..dists.len()).filter(|k| lambda[*k] > 0.0).collect();
    let costs: Vec<Vec<Vec<f64>>> = active
        .iter()
        .map(|k| cost_matrix(&dists[*k].points, support, 2, GroundMetric::Euclidean))
        .collect();
    let cmax = costs.iter().flatten().flatten().copied().fold(0.0, f64::max);
    let scale = if cmax > 0.0 { cmax } else { 1.0 };
    let eps = cfg.entropic_reg;
    // kernels in log form: −C/(ε · scale)
    let log_k: Vec<Vec<Vec<f64>>> = costs
        .iter()
        .map(|c| c.iter().map(|r| r.iter().map(|v| -v / (scale * eps)).collect()).collect())
        .collect();
    let log_a: Vec<Vec<f64>> = active
        .iter()
        .map(|k| dists[*k].masses.as_slice().iter().map(|m| m.ln()).collect())
        .collect();

    let mut log_v: Vec<Vec<f64>> = vec![vec![0.0; s]; active.len()];
    let mut bary = vec![1.0 / s as f64; s];
    let mut iterations = 0;
    let mut converged = false;
    let mut buf = Vec::new();
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut log_b = vec![0.0; s];
        let mut log_ktu_all = Vec::with_capacity(active.len());
        for (slot, k) in active.iter().enumerate() {
            let n = log_a[slot].len();
            let lk = &log_k[slot];
            let log_u: Vec<f64> = (0..n)
                .map(|i| {
                    if log_a[slot][i] == f64::NEG_INFINITY {
                        return f64::NEG_INFINITY;
                    }
                    buf.clear();
                    buf.extend((0..s).map(|j| log_v[slot][j] + lk[i][j]));
                    log_a[slot][i] - log_sum_exp(&buf)
                })
                .collect();
            let log_ktu: Vec<f64> = (0..s)
                .map(|j| {
                    buf.clear();
                    buf.extend((0..n).map(|i| log_u[i] + lk[i][j]));
                    log_sum_exp(&buf)
                })
                .collect();
            for j in 0..s {
                log_b[j] += lambda[*k] * log_ktu[j];
            }
            log_ktu_all.push(log_ktu);
        }
        let norm = log_sum_exp(&log_b);
        let next: Vec<f64> = log_b.iter().map(|v| (v - norm).exp()).collect();
        for (slot, log_ktu) in log_ktu_all.iter().enumerate() {
            for j in 0..s {
                log_v[slot][j] = log_b[j] - log_ktu[j];
            }
        }
        let change: f64 = next.iter().zip(&bary).map(|(a, b)| (a - b).abs()).sum();
        bary = next;
        if change <= BARYCENTER_TOL {
            converged = true;
            break;
        }
    }
    let distribution = DiscreteDistribution::new(support.to_vec(), ProbabilityVector::from_weights(&bary)?)?;
    let (objective, _) = barycenter_objective(dists, lambda.as_slice(), &distribution, cfg)?;
    Ok(Barycenter {
        distribution,
        objective,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlternatingResult {
    pub lambda: ProbabilityVector,
    pub barycenter: DiscreteDistribution,
    pub rho_star: f64,
    /// Objective after every block update, starting from the initial pair.
    pub objective_log: Vec<f64>,
}

pub const ALTERNATING_TOL: f64 = 1e-8;
pub const ALTERNATING_MAX_ROUNDS: usize = 50;

/// Alternating minimization of `Σ λ_i W₂²(P_i, Q)` over `λ ∈ Δ` and masses of
/// `Q` on a fixed support. A barycenter step is only accepted when it does not
/// raise the objective; the λ step is exact given the current costs.
pub fn alternating_min_lambda_barycenter(
    dists: &[DiscreteDistribution],
    support: &[Vec<f64>],
    cfg: &OtConfig,
) -> Result<AlternatingResult> {
    if dists.is_empty() {
        return Err(Error::invalid("need at least one distribution"));
    }
    let mut lambda = ProbabilityVector::uniform(dists.len());
    let mut q = DiscreteDistribution::uniform(support.to_vec())?;
    let (mut objective, _) = barycenter_objective(dists, lambda.as_slice(), &q, cfg)?;
    let mut log = vec![objective];
    for _ in 0..ALTERNATING_MAX_ROUNDS {
        let start = objective;
        let candidate = barycenter_fixed_support(dists, &lambda, support, cfg)?;
        if candidate.objective <= objective {
            q = candidate.distribution;
            objective = candidate.objective;
        }
        log.push(objective);

        let (_, costs) = barycenter_objective(dists, lambda.as_slice(), &q, cfg)?;
        let sel = select_lambda_domain_adaptation(&costs)?;
        let current: f64 = costs.iter().zip(lambda.as_slice()).map(|(c, l)| c * l).sum();
        if sel.rho_star_sq <= current {
            lambda = sel.lambda;
            objective = sel.rho_star_sq;
        } else {
            objective = current;
        }
        // the λ step re-evaluates costs; keep the log monotone against drift
        objective = objective.min(*log.last().unwrap());
        log.push(objective);
        if start - objective < ALTERNATING_TOL {
            break;
        }
    }
    Ok(AlternatingResult {
        lambda,
        barycenter: q,
        rho_star: objective.max(0.0).sqrt(),
        objective_log: log,
    })
}

// ---------------------------------------------------------------------------
// Concentration radii

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationParams {
    pub c1: f64,
    pub c2: f64,
    /// Light-tail exponent, `a > 1`.
    pub a: f64,
    pub dim: usize,
    pub delta: f64,
}

impl Default for ConcentrationParams {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            a: 2.0,
            dim: 2,
            delta: 0.05,
        }
    }
}

/// Radius `ρ̂_n^δ` such that `W₂(P̂_n, P) ≤ ρ̂_n^δ` with probability `1 − δ`:
/// `(log(c₁/δ)/(c₂ n))^{min(2/d, 1/2)}` once `n ≥ log(c₁/δ)/c₂`, and with
/// exponent `1/a` below that.
pub fn concentration_radius(n: usize, params: &ConcentrationParams) -> Result<f64> {
    let ConcentrationParams { c1, c2, a, dim, delta } = *params;
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    if !(c1 > 0.0 && c2 > 0.0) || !(a > 1.0) || dim == 0 || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("invalid concentration parameters"));
    }
    if delta >= c1 {
        return Err(Error::ConfidenceMismatch { delta, c1 });
    }
    let log_term = (c1 / delta).ln();
    let base = log_term / (c2 * n as f64);
    let exponent = if n as f64 >= log_term / c2 {
        (2.0 / dim as f64).min(0.5)
    } else {
        1.0 / a
    };
    Ok(base.powf(exponent))
}

/// `sqrt(Σ λ_i ρ̂_i)`.
pub fn combined_radius(lambda: &ProbabilityVector, per_client_radii: &[f64]) -> Result<f64> {
    if lambda.len() != per_client_radii.len() {
        return Err(Error::DimensionMismatch {
            expected: lambda.len(),
            got: per_client_radii.len(),
        });
    }
    if per_client_radii.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::invalid("radii must be nonnegative"));
    }
    Ok(lambda
        .as_slice()
        .iter()
        .zip(per_client_radii)
        .map(|(l, r)| l * r)
        .sum::<f64>()
        .sqrt())
}
