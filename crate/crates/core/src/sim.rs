//! Operating characteristics by simulation.
//!
//! Networks copy the bundled dataset's study designs. Each study gets a
//! control risk, study-specific log odds ratios around a fixed mean, equal
//! arm sizes and binomial event counts. An additive shift `ω` on one arm of
//! one design plants the inconsistency the methods should find.
//!
//! Every study slot draws from its own generator seeded from the replicate
//! stream, and the binomial draws come last. Scenarios that share a seed and
//! differ only in `ω` therefore differ only in the target design's counts.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{replicate_rng, run_bootstrap, BootstrapPlan, Statistic};
use crate::error::{NmaError, Result};
use crate::inconsistency::bucher_loop_test;
use crate::influence::compute_influence;
use crate::ingest::{antihypertensive_records, ingest, ArmRecord, IngestOptions};
use crate::linalg;
use crate::network::{NetworkDataset, TreatmentId};
use crate::reml::FitOptions;

/// Mean log odds ratios against placebo, in label order.
pub const MU0: [(&str, f64); 7] = [
    ("AB", 0.264),
    ("ACE", -0.294),
    ("ARB", -0.210),
    ("BB", -0.072),
    ("CCB", -0.129),
    ("CT", -0.276),
    ("DD", -0.441),
];
pub const CONTROL_LABEL: &str = "Placebo";
pub const CONTROL_RISK: (f64, f64) = (0.006, 0.167);
pub const ARM_SIZE: (u64, u64) = (204, 15268);
pub const DEFAULT_INNER_REPLICATES: usize = 1000;
pub const TOP_K: usize = 3;
const ALPHA: f64 = 0.05;

/// The full 24-scenario grid.
pub const GRID_SCENARIOS: &str = include_str!("../scenarios/grid.toml");
/// Scenarios 1-3 and 13-15 at 200 replications and 200 inner resamples.
pub const DESK_SCENARIOS: &str = include_str!("../scenarios/desk.toml");
/// Second family retargeted at the three-arm ACE vs CCB vs CT design.
pub const THREE_ARM_SCENARIOS: &str = include_str!("../scenarios/grid_three_arm.toml");

fn default_reference() -> String {
    CONTROL_LABEL.to_string()
}

fn default_bootstrap() -> usize {
    DEFAULT_INNER_REPLICATES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: u32,
    /// Design label such as `"ARB vs CT"`.
    pub target_design: String,
    /// Arm of the target design that receives `ω`.
    pub target_arm: String,
    /// 26 reproduces the bundled designs once; multiples repeat each slot.
    pub n_studies: usize,
    pub tau: f64,
    pub omega: f64,
    pub replications: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    pub seed: u64,
    /// Triangles for the Bucher comparator.
    #[serde(default)]
    pub loops: Vec<[String; 3]>,
    #[serde(default = "default_reference")]
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: Vec<ScenarioConfig>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        let f: ScenarioFile = toml::from_str(text).map_err(|e| NmaError::Parse(e.to_string()))?;
        if f.scenario.is_empty() {
            return Err(NmaError::Config("scenario file lists no scenarios".into()));
        }
        for s in &f.scenario {
            s.validate()?;
        }
        Ok(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Bundled study list: `(study id, arm labels)` in file order.
fn base_designs() -> Vec<(String, Vec<String>)> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for r in antihypertensive_records() {
        match out.iter_mut().find(|(id, _)| *id == r.study_id) {
            Some((_, arms)) => arms.push(r.treatment),
            None => out.push((r.study_id, vec![r.treatment])),
        }
    }
    for (_, arms) in &mut out {
        arms.sort();
    }
    out
}

fn design_label(arms: &[String]) -> String {
    arms.join(" vs ")
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let base = base_designs();
        let err = |m: String| Err(NmaError::Config(format!("scenario {}: {m}", self.id)));
        if self.n_studies == 0 || self.n_studies % base.len() != 0 {
            return err(format!("n_studies must be a positive multiple of {}", base.len()));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) || !self.omega.is_finite() {
            return err("tau must be nonnegative and omega finite".into());
        }
        if self.replications == 0 {
            return err("replications must be positive".into());
        }
        let Some((_, arms)) = base.iter().find(|(_, a)| design_label(a) == self.target_design) else {
            return err(format!("unknown target design `{}`", self.target_design));
        };
        if !arms.contains(&self.target_arm) {
            return err(format!("`{}` is not an arm of `{}`", self.target_arm, self.target_design));
        }
        if self.target_arm == CONTROL_LABEL {
            return err("the control arm cannot carry the shift".into());
        }
        Ok(())
    }

    fn copies(&self) -> usize {
        self.n_studies / base_designs().len()
    }
}

/// One simulated dataset as arm-level records.
pub fn generate_replicate(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<ArmRecord>> {
    let base = base_designs();
    let copies = cfg.copies();
    let p = MU0.len();
    let chol = linalg::cholesky_factor_psd(&linalg::half_correlation(p, 1.0))?;
    let mu0 = DVector::from_iterator(p, MU0.iter().map(|(_, m)| *m));
    let slot_seeds: Vec<u64> = (0..base.len() * copies).map(|_| rng.next_u64()).collect();

    let mut records = Vec::new();
    let mut slot = 0;
    for c in 0..copies {
        for (id, arms) in &base {
            let mut srng = ChaCha8Rng::seed_from_u64(slot_seeds[slot]);
            slot += 1;
            let p0: f64 = srng.random_range(CONTROL_RISK.0..CONTROL_RISK.1);
            let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut srng));
            let theta: DVector<f64> = &mu0 + &chol * z * cfg.tau;
            let n: u64 = srng.random_range(ARM_SIZE.0..=ARM_SIZE.1);
            let shifted = design_label(arms) == cfg.target_design;
            let study_id = if c == 0 { id.clone() } else { format!("{id}#{}", c + 1) };
            for arm in arms {
                let mut lor = match MU0.iter().position(|(l, _)| *l == arm.as_str()) {
                    Some(j) => theta[j],
                    None if arm == CONTROL_LABEL => 0.0,
                    None => return Err(NmaError::UnknownTreatment(arm.clone())),
                };
                if shifted && *arm == cfg.target_arm {
                    lor += cfg.omega;
                }
                let odds = p0 / (1.0 - p0) * lor.exp();
                let prob = odds / (1.0 + odds);
                let d = Binomial::new(n, prob).map_err(|e| NmaError::Config(e.to_string()))?.sample(&mut srng);
                records.push(ArmRecord::new(study_id.clone(), arm.clone(), d, n));
            }
        }
    }
    Ok(records)
}

/// Detection outcomes for the target design in one simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    /// O-values for Ψ, MDFFITS, Φ, Ξ.
    pub o_values: [Option<f64>; 4],
    /// Target ranked in the top three by each influence measure.
    pub top3: [bool; 4],
    pub p_wald: Option<f64>,
    pub p_loops: Vec<Option<f64>>,
}

fn resolve(net: &NetworkDataset, label: &str) -> Result<TreatmentId> {
    net.treatment_by_label(label)
}

/// Simulates and analyses replicate `index` of `cfg`.
pub fn analyze_replicate(cfg: &ScenarioConfig, index: usize) -> Result<ReplicateOutcome> {
    let mut rng = replicate_rng(cfg.seed, index as u64);
    let records = generate_replicate(cfg, &mut rng)?;
    let inner_seed = rng.next_u64();
    let opts = IngestOptions { reference: Some(cfg.reference.clone()), augment: true };
    let net = ingest(&records, &opts)?;
    let target = net.design_by_label(&cfg.target_design)?;
    let fit = FitOptions::default();

    let report = compute_influence(&net, &fit)?;
    let row = report
        .rows
        .iter()
        .find(|r| r.measures.design == target)
        .ok_or_else(|| NmaError::NotEvaluable(cfg.target_design.clone()))?;
    let within = |r: Option<usize>| r.is_some_and(|r| r <= TOP_K);
    let top3 = [within(Some(row.rank_psi)), within(Some(row.rank_mdffits)), within(row.rank_phi), within(row.rank_xi)];

    let (o_values, p_wald) = if cfg.bootstrap > 0 {
        let plan = BootstrapPlan::new(cfg.bootstrap, inner_seed).with_designs(vec![target.clone()]);
        let boot = run_bootstrap(&net, &plan)?;
        let d = &boot.designs[0];
        let o = |s: Statistic| d.get(s).and_then(|x| x.o_value);
        (
            [o(Statistic::Psi), o(Statistic::Mdffits), o(Statistic::Phi), o(Statistic::Xi)],
            o(Statistic::Wald),
        )
    } else {
        ([None; 4], None)
    };

    let p_loops = cfg
        .loops
        .iter()
        .map(|l| {
            let arms = [resolve(&net, &l[0])?, resolve(&net, &l[1])?, resolve(&net, &l[2])?];
            Ok(bucher_loop_test(&net, arms).ok().map(|r| r.p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicateOutcome { o_values, top3, p_wald, p_loops })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    /// Binomial Monte-Carlo standard error.
    pub se: f64,
    pub n: usize,
}

impl Rate {
    pub fn from_hits(hits: usize, n: usize) -> Self {
        if n == 0 {
            return Rate { rate: f64::NAN, se: f64::NAN, n };
        }
        let r = hits as f64 / n as f64;
        Rate { rate: r, se: (r * (1.0 - r) / n as f64).sqrt(), n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub config: ScenarioConfig,
    pub completed: usize,
    pub failed: usize,
    /// Share with O < 0.05 for Ψ, MDFFITS, Φ, Ξ.
    pub o_threshold: [Rate; 4],
    /// Share with the target in the top three for Ψ, MDFFITS, Φ, Ξ.
    pub top3: [Rate; 4],
    pub wald: Rate,
    pub loops: Vec<Rate>,
}

pub const METHOD_NAMES: [&str; 4] = ["psi", "mdffits", "phi", "xi"];

pub fn aggregate(cfg: &ScenarioConfig, outcomes: &[Result<ReplicateOutcome>]) -> ScenarioMetrics {
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let n = ok.len();
    let below = |v: Option<f64>| v.is_some_and(|x| x < ALPHA);
    let o_threshold = std::array::from_fn(|m| Rate::from_hits(ok.iter().filter(|o| below(o.o_values[m])).count(), n));
    let top3 = std::array::from_fn(|m| Rate::from_hits(ok.iter().filter(|o| o.top3[m]).count(), n));
    let wald = Rate::from_hits(ok.iter().filter(|o| below(o.p_wald)).count(), n);
    let loops = (0..cfg.loops.len())
        .map(|l| Rate::from_hits(ok.iter().filter(|o| below(o.p_loops[l])).count(), n))
        .collect();
    ScenarioMetrics { config: cfg.clone(), completed: n, failed: outcomes.len() - n, o_threshold, top3, wald, loops }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioMetrics> {
    cfg.validate()?;
    let outcomes: Vec<Result<ReplicateOutcome>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let out = analyze_replicate(cfg, r);
            if let Err(e) = &out {
                log::warn!("scenario {} replicate {r}: {e}", cfg.id);
            }
            out
        })
        .collect();
    Ok(aggregate(cfg, &outcomes))
}

/// Table-layout CSV: rates in percent, then Monte-Carlo standard errors.
pub fn write_metrics_csv(metrics: &[ScenarioMetrics], out: impl Write) -> Result<()> {
    let max_loops = metrics.iter().map(|m| m.loops.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> =
        ["scenario", "design", "target_arm", "n", "tau", "omega"].iter().map(|s| s.to_string()).collect();
    let mut rate_cols = Vec::new();
    for m in METHOD_NAMES {
        rate_cols.push(format!("{m}_o_lt_0.05"));
        rate_cols.push(format!("{m}_top3"));
    }
    rate_cols.push("wald_p_lt_0.05".into());
    for l in 0..max_loops {
        rate_cols.push(format!("loop{}_p_lt_0.05", l + 1));
    }
    header.extend(rate_cols.iter().cloned());
    header.extend(rate_cols.iter().map(|c| format!("{c}_se")));
    header.push("completed".into());
    header.push("failed".into());
    w.write_record(&header)?;
    for m in metrics {
        let c = &m.config;
        let mut rates = Vec::new();
        for k in 0..4 {
            rates.push(Some(m.o_threshold[k]));
            rates.push(Some(m.top3[k]));
        }
        rates.push(Some(m.wald));
        for l in 0..max_loops {
            rates.push(m.loops.get(l).copied());
        }
        let pct = |x: f64| format!("{:.1}", 100.0 * x);
        let mut row = vec![
            c.id.to_string(),
            c.target_design.clone(),
            c.target_arm.clone(),
            c.n_studies.to_string(),
            c.tau.to_string(),
            c.omega.to_string(),
        ];
        row.extend(rates.iter().map(|r| r.map(|r| pct(r.rate)).unwrap_or_default()));
        row.extend(rates.iter().map(|r| r.map(|r| pct(r.se)).unwrap_or_default()));
        row.push(m.completed.to_string());
        row.push(m.failed.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Every design in the bundled structure, for building scenario files.
pub fn bundled_design_labels() -> Vec<String> {
    let mut v: Vec<String> = base_designs().into_iter().map(|(_, a)| design_label(&a)).collect();
    v.sort();
    v.dedup();
    v
}
