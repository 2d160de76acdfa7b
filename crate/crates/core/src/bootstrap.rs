//! Parametric bootstrap under the fitted consistency model.
//!
//! Each replicate redraws every study's contrasts from the fitted
//! random-effects distribution, refits the full model and the requested
//! leave-one-design-out and subset models, and records the statistics.
//! Replicate `b` always uses ChaCha stream `b` of the plan's seed, so the
//! output does not depend on how replicates are spread over threads.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NmaError, Result};
use crate::inconsistency::{subset_fit, wald_statistic};
use crate::influence::{evaluable_designs, lodo_fit_plan, lodo_plan, mdffits, psi, replicate_ratio, LodoPlan};
use crate::linalg;
use crate::network::{DesignKey, NetworkDataset};
use crate::reml::{contrast_map, FitOptions, FitResult, PreparedModel};

pub const DEFAULT_REPLICATES: usize = 5000;
/// Fraction of failed replicates at which a statistic is flagged.
pub const FAILURE_FLAG_RATE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Psi,
    Mdffits,
    Phi,
    Xi,
    Wald,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tail {
    Upper,
    Lower,
}

impl Statistic {
    pub const ALL: [Statistic; 5] = [Statistic::Psi, Statistic::Mdffits, Statistic::Phi, Statistic::Xi, Statistic::Wald];
    pub const INFLUENCE: [Statistic; 4] = [Statistic::Psi, Statistic::Mdffits, Statistic::Phi, Statistic::Xi];

    /// Large Ψ, MDFFITS and W are extreme; small Φ and Ξ are.
    pub fn tail(self) -> Tail {
        match self {
            Statistic::Phi | Statistic::Xi => Tail::Lower,
            _ => Tail::Upper,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Psi => "psi",
            Statistic::Mdffits => "mdffits",
            Statistic::Phi => "phi",
            Statistic::Xi => "xi",
            Statistic::Wald => "wald",
        }
    }

    fn needs_full_fit(self) -> bool {
        matches!(self, Statistic::Mdffits | Statistic::Phi | Statistic::Xi)
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = NmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psi" => Ok(Statistic::Psi),
            "mdffits" => Ok(Statistic::Mdffits),
            "phi" => Ok(Statistic::Phi),
            "xi" => Ok(Statistic::Xi),
            "wald" | "w" => Ok(Statistic::Wald),
            other => Err(NmaError::Config(format!("unknown statistic `{other}`"))),
        }
    }
}

/// Share of replicates at least as extreme as `realized`; `None` without replicates.
pub fn o_value(realized: f64, replicates: &[f64], tail: Tail) -> Option<f64> {
    if replicates.is_empty() {
        return None;
    }
    let hits = match tail {
        Tail::Upper => replicates.iter().filter(|r| **r >= realized).count(),
        Tail::Lower => replicates.iter().filter(|r| **r <= realized).count(),
    };
    Some(hits as f64 / replicates.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub replicates: usize,
    pub seed: u64,
    pub statistics: BTreeSet<Statistic>,
    /// Designs to evaluate; `None` means every evaluable design.
    pub designs: Option<Vec<DesignKey>>,
    pub fit: FitOptions,
    /// Keep per-replicate values in the result (needed for dumps).
    pub keep_replicates: bool,
}

impl BootstrapPlan {
    pub fn new(replicates: usize, seed: u64) -> Self {
        BootstrapPlan {
            replicates,
            seed,
            statistics: Statistic::ALL.into_iter().collect(),
            designs: None,
            fit: FitOptions::default(),
            keep_replicates: false,
        }
    }

    pub fn with_statistics(mut self, stats: impl IntoIterator<Item = Statistic>) -> Self {
        self.statistics = stats.into_iter().collect();
        self
    }

    pub fn with_designs(mut self, designs: Vec<DesignKey>) -> Self {
        self.designs = Some(designs);
        self
    }

    pub fn keeping_replicates(mut self) -> Self {
        self.keep_replicates = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticSummary {
    pub statistic: Statistic,
    pub realized: Option<f64>,
    pub o_value: Option<f64>,
    pub failures: usize,
    pub flagged: bool,
    /// Replicate values in replicate order; `None` marks a failed replicate.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub replicates: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignBootstrap {
    pub design: DesignKey,
    pub label: String,
    pub statistics: Vec<StatisticSummary>,
}

impl DesignBootstrap {
    pub fn get(&self, s: Statistic) -> Option<&StatisticSummary> {
        self.statistics.iter().find(|x| x.statistic == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub seed: u64,
    pub designs: Vec<DesignBootstrap>,
}

impl BootstrapResult {
    pub fn design(&self, label: &str) -> Option<&DesignBootstrap> {
        self.designs.iter().find(|d| d.label == label)
    }

    pub fn o_value(&self, label: &str, s: Statistic) -> Option<f64> {
        self.design(label)?.get(s)?.o_value
    }

    /// One CSV per statistic: `replicate_index,design,value` (empty value on failure).
    pub fn write_replicates(&self, statistic: Statistic, mut out: impl Write) -> Result<()> {
        writeln!(out, "replicate_index,design,value")?;
        for d in &self.designs {
            let Some(s) = d.get(statistic) else { continue };
            for (b, v) in s.replicates.iter().enumerate() {
                match v {
                    Some(v) => writeln!(out, "{b},{},{v}", d.label)?,
                    None => writeln!(out, "{b},{},", d.label)?,
                }
            }
        }
        Ok(())
    }
}

/// Runs `f` on a dedicated pool of `workers` threads (0 uses the global pool).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| NmaError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Random stream for replicate `index` of `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `θ_i ~ N(X_i μ̂, τ̂² P)` then `Y_i ~ N(θ_i, S_i)` for every study.
pub fn resample_network(fit: &FitResult, net: &NetworkDataset, rng: &mut ChaCha8Rng) -> Result<NetworkDataset> {
    let ys = net
        .studies()
        .iter()
        .map(|s| {
            let arms = s.contrast_arms();
            let k = arms.len();
            let c = contrast_map(&fit.basis, s.reference, &arms)?;
            let mean = &c * &fit.mu_hat;
            let l_between = linalg::cholesky_factor_psd(&linalg::half_correlation(k, fit.tau2_hat))?;
            let l_within = linalg::cholesky_factor_psd(&s.s)?;
            let z1 = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
            let z2 = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
            Ok(mean + l_between * z1 + l_within * z2)
        })
        .collect::<Result<Vec<_>>>()?;
    net.with_contrasts(ys)
}

type Row = Vec<Option<f64>>;

fn ok_fit(f: Result<FitResult>) -> Option<FitResult> {
    f.ok().filter(|f| f.converged)
}

/// Statistics for each plan on one dataset, in `stats` order; `None` marks a failure.
fn statistics_on(
    net: &NetworkDataset,
    plans: &[LodoPlan],
    stats: &[Statistic],
    options: &FitOptions,
) -> Vec<Row> {
    let full = if stats.iter().any(|s| s.needs_full_fit()) {
        ok_fit(PreparedModel::new(net).and_then(|m| m.fit(options)))
    } else {
        None
    };
    plans
        .iter()
        .map(|plan| {
            let lodo = ok_fit(lodo_fit_plan(net, plan, options).map(|l| l.fit));
            let d = &plan.design;
            let subset = stats
                .contains(&Statistic::Wald)
                .then(|| subset_fit(net, d, options).ok())
                .flatten();
            stats
                .iter()
                .map(|s| {
                    let lodo = lodo.as_ref()?;
                    match s {
                        Statistic::Psi => psi(net, d, lodo).ok(),
                        Statistic::Mdffits => mdffits(full.as_ref()?, lodo, d).ok(),
                        Statistic::Phi => Some(replicate_ratio(lodo.tau2_hat, full.as_ref()?.tau2_hat)),
                        Statistic::Xi => Some(replicate_ratio(lodo.i2, full.as_ref()?.i2)),
                        Statistic::Wald => wald_statistic(d, subset.as_ref()?, lodo).ok(),
                    }
                })
                .collect()
        })
        .collect()
}

fn realized_statistics(
    net: &NetworkDataset,
    full: &FitResult,
    plans: &[LodoPlan],
    stats: &[Statistic],
    options: &FitOptions,
) -> Result<Vec<Row>> {
    plans
        .par_iter()
        .map(|plan| {
            let lodo = lodo_fit_plan(net, plan, options)?.fit;
            let d = &plan.design;
            let subset = if stats.contains(&Statistic::Wald) { Some(subset_fit(net, d, options)?) } else { None };
            stats
                .iter()
                .map(|s| {
                    Ok(match s {
                        Statistic::Psi => Some(psi(net, d, &lodo)?),
                        Statistic::Mdffits => Some(mdffits(full, &lodo, d)?),
                        Statistic::Phi => (full.tau2_hat > 0.0).then(|| lodo.tau2_hat / full.tau2_hat),
                        Statistic::Xi => (full.i2 > 0.0).then(|| lodo.i2 / full.i2),
                        Statistic::Wald => Some(wald_statistic(d, subset.as_ref().expect("subset fitted"), &lodo)?),
                    })
                })
                .collect()
        })
        .collect()
}

fn resolve_plans(net: &NetworkDataset, plan: &BootstrapPlan) -> Result<Vec<LodoPlan>> {
    match &plan.designs {
        None => Ok(evaluable_designs(net).0),
        Some(ds) => ds.iter().map(|d| lodo_plan(net, d)).collect(),
    }
}

/// Realized statistics, their bootstrap distributions and O-values (the
/// bootstrap P-value for W).
pub fn run_bootstrap(net: &NetworkDataset, plan: &BootstrapPlan) -> Result<BootstrapResult> {
    if plan.replicates == 0 {
        return Err(NmaError::Config("bootstrap needs at least one replicate".into()));
    }
    let full = PreparedModel::new(net)?.fit(&plan.fit)?;
    let plans = resolve_plans(net, plan)?;
    let stats: Vec<Statistic> = plan.statistics.iter().copied().collect();
    let realized = realized_statistics(net, &full, &plans, &stats, &plan.fit)?;
    run_bootstrap_with(net, &full, &plans, &stats, realized, plan)
}

/// Bootstrap from a supplied full fit and realized values (as produced by
/// `realized_statistics` for the same plans and statistics).
fn run_bootstrap_with(
    net: &NetworkDataset,
    full: &FitResult,
    plans: &[LodoPlan],
    stats: &[Statistic],
    realized: Vec<Row>,
    plan: &BootstrapPlan,
) -> Result<BootstrapResult> {
    let per_replicate: Vec<Vec<Row>> = (0..plan.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(plan.seed, b as u64);
            match resample_network(full, net, &mut rng) {
                Ok(rep) => statistics_on(&rep, plans, stats, &plan.fit),
                Err(e) => {
                    log::debug!("replicate {b}: resampling failed: {e}");
                    vec![vec![None; stats.len()]; plans.len()]
                }
            }
        })
        .collect();

    let designs = plans
        .iter()
        .enumerate()
        .map(|(di, p)| {
            let statistics = stats
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    let values: Vec<Option<f64>> = per_replicate.iter().map(|r| r[di][si]).collect();
                    let ok: Vec<f64> = values.iter().flatten().copied().collect();
                    let failures = values.len() - ok.len();
                    let flagged = failures as f64 >= FAILURE_FLAG_RATE * plan.replicates as f64;
                    let realized = realized[di][si];
                    if flagged {
                        log::warn!("{} on `{}`: {failures} of {} replicates failed", s, net.design_label(&p.design), plan.replicates);
                    }
                    StatisticSummary {
                        statistic: *s,
                        realized,
                        o_value: realized.and_then(|r| o_value(r, &ok, s.tail())),
                        failures,
                        flagged,
                        replicates: if plan.keep_replicates { values } else { Vec::new() },
                    }
                })
                .collect();
            DesignBootstrap { design: p.design.clone(), label: net.design_label(&p.design), statistics }
        })
        .collect();
    Ok(BootstrapResult { replicates: plan.replicates, seed: plan.seed, designs })
}
