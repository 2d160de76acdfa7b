//! Analysis orchestration and result files.
//!
//! An [`AnalysisArtifact`] holds everything a report needs. Tables and charts
//! are rendered from the artifact alone, so a report rebuilt from a saved
//! result file is byte-identical to the one written at analysis time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bootstrap::{run_bootstrap, BootstrapPlan, BootstrapResult, Statistic};
use crate::error::{NmaError, Result};
use crate::inconsistency::{attach_bootstrap_p, global_interaction_test, wald_all, GlobalTestResult, WaldResult};
use crate::influence::{compute_influence, evaluable_designs, InfluenceRow, SkippedDesign};
use crate::ingest::{ingest, read_arm_records, ArmRecord, IngestOptions};
use crate::network::{DesignKey, NetworkDataset};
use crate::reml::{reml_fit_with, FitOptions, FitResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESULT_FILE: &str = "result.json";
/// O-values and P-values below this are highlighted.
pub const SIGNIFICANCE: f64 = 0.05;

/// Hex SHA-256 of the raw input bytes.
pub fn input_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Fit,
    Influence,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Requested global reference; `None` picks the most frequent treatment.
    pub reference: Option<String>,
    pub augment: bool,
    pub seed: u64,
    /// Bootstrap replicates; zero skips the bootstrap.
    pub replicates: usize,
    pub statistics: Vec<Statistic>,
    pub excluded_designs: Vec<String>,
    pub excluded_studies: Vec<String>,
    pub fit: FitOptions,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            reference: None,
            augment: true,
            seed: 0,
            replicates: crate::bootstrap::DEFAULT_REPLICATES,
            statistics: Statistic::INFLUENCE.to_vec(),
            excluded_designs: Vec::new(),
            excluded_studies: Vec::new(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    /// 1-based; evaluable designs first, in design-key order.
    pub id: usize,
    pub label: String,
    pub arms: Vec<String>,
    pub studies: Vec<String>,
    pub evaluable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledOddsRatio {
    pub treatment: String,
    pub log_or: f64,
    pub se: f64,
    pub or: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSection {
    pub rows: Vec<InfluenceRow>,
    pub skipped: Vec<SkippedDesign>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldSection {
    pub rows: Vec<WaldResult>,
    pub skipped: Vec<SkippedDesign>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisArtifact {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: Command,
    pub input_digest: String,
    pub config: AnalysisConfig,
    pub reference: String,
    pub treatments: Vec<String>,
    pub n_studies: usize,
    pub designs: Vec<DesignSummary>,
    pub fit: FitResult,
    pub odds_ratios: Vec<LabeledOddsRatio>,
    pub global_test: Option<GlobalTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_test_note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence: Option<InfluenceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wald: Option<WaldSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapResult>,
}

impl AnalysisArtifact {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        let version = probe.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(NmaError::Parse(format!(
                "unsupported result schema {version:?}, expected {SCHEMA_VERSION}"
            )));
        }
        Ok(serde_json::from_value(probe)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fails when `input` is not the data this artifact was computed from.
    pub fn check_input(&self, input: &[u8]) -> Result<()> {
        let digest = input_digest(input);
        if digest != self.input_digest {
            return Err(NmaError::Config(format!(
                "input digest {digest} does not match the result file ({})",
                self.input_digest
            )));
        }
        Ok(())
    }

    pub fn design_id(&self, label: &str) -> Option<usize> {
        self.designs.iter().find(|d| d.label == label).map(|d| d.id)
    }

    /// Treatment labels ordered by odds ratio against the reference, lowest first.
    pub fn ranking(&self) -> Vec<String> {
        let mut v: Vec<(f64, &str)> = self.odds_ratios.iter().map(|o| (o.log_or, o.treatment.as_str())).collect();
        v.push((0.0, self.reference.as_str()));
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        v.into_iter().map(|(_, t)| t.to_string()).collect()
    }
}

/// Applies study exclusions, ingests and applies design exclusions.
pub fn prepare_network(records: &[ArmRecord], config: &AnalysisConfig) -> Result<NetworkDataset> {
    let excluded: BTreeSet<&str> = config.excluded_studies.iter().map(String::as_str).collect();
    let known: BTreeSet<&str> = records.iter().map(|r| r.study_id.as_str()).collect();
    if let Some(missing) = excluded.iter().find(|s| !known.contains(*s)) {
        return Err(NmaError::Config(format!("no study `{missing}` to exclude")));
    }
    let kept: Vec<ArmRecord> = records.iter().filter(|r| !excluded.contains(r.study_id.as_str())).cloned().collect();
    let options = IngestOptions { reference: config.reference.clone(), augment: config.augment };
    let net = ingest(&kept, &options)?;
    if config.excluded_designs.is_empty() {
        return Ok(net);
    }
    let keys = config
        .excluded_designs
        .iter()
        .map(|l| net.design_by_label(l))
        .collect::<Result<Vec<DesignKey>>>()?;
    net.without_designs(&keys)
}

/// Design ids, arms, studies and evaluability.
pub fn design_summaries(net: &NetworkDataset) -> Vec<DesignSummary> {
    let (plans, _) = evaluable_designs(net);
    let evaluable: BTreeSet<&DesignKey> = plans.iter().map(|p| &p.design).collect();
    let mut keys: Vec<&DesignKey> = net.designs().keys().collect();
    keys.sort_by_key(|k| !evaluable.contains(k));
    keys.into_iter()
        .enumerate()
        .map(|(i, k)| {
            let mut arms: Vec<String> = k.arms().iter().map(|t| net.label(*t).to_string()).collect();
            arms.sort();
            DesignSummary {
                id: i + 1,
                label: net.design_label(k),
                arms,
                studies: net.study_indices(k).iter().map(|&s| net.studies()[s].study_id.clone()).collect(),
                evaluable: evaluable.contains(k),
            }
        })
        .collect()
}

/// Runs `command` on CSV input bytes.
pub fn analyze(command: Command, input: &[u8], config: &AnalysisConfig) -> Result<AnalysisArtifact> {
    let records = read_arm_records(input)?;
    let net = prepare_network(&records, config)?;
    net.basis()?;
    let fit = reml_fit_with(&net, &config.fit)?;
    if !fit.converged {
        return Err(NmaError::NotConverged(format!(
            "τ² reached the search bound {} on the full network",
            config.fit.tau2_max
        )));
    }
    let (global_test, global_test_note) = match global_interaction_test(&net, &config.fit) {
        Ok(g) => (Some(g), None),
        Err(NmaError::NotApplicable(m)) => (None, Some(m)),
        Err(e) => return Err(e),
    };
    let odds_ratios = fit
        .odds_ratios()
        .into_iter()
        .map(|o| LabeledOddsRatio {
            treatment: net.label(o.treatment).to_string(),
            log_or: o.log_or,
            se: o.se,
            or: o.or,
            lower: o.lower,
            upper: o.upper,
        })
        .collect();

    let mut artifact = AnalysisArtifact {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        command,
        input_digest: input_digest(input),
        config: config.clone(),
        reference: net.label(net.global_reference()).to_string(),
        treatments: net.treatments().iter().map(|t| t.label.clone()).collect(),
        n_studies: net.n_studies(),
        designs: design_summaries(&net),
        fit,
        odds_ratios,
        global_test,
        global_test_note,
        influence: None,
        wald: None,
        bootstrap: None,
    };

    match command {
        Command::Fit => {}
        Command::Influence => {
            let mut report = compute_influence(&net, &config.fit)?;
            let stats: Vec<Statistic> =
                config.statistics.iter().copied().filter(|s| Statistic::INFLUENCE.contains(s)).collect();
            if config.replicates > 0 && !stats.is_empty() {
                let plan = BootstrapPlan::new(config.replicates, config.seed).with_statistics(stats);
                let plan = BootstrapPlan { fit: config.fit, ..plan };
                let boot = run_bootstrap(&net, &plan)?;
                report.attach_o_values(&boot);
                artifact.bootstrap = Some(boot);
            }
            artifact.influence = Some(InfluenceSection { rows: report.rows, skipped: report.skipped });
        }
        Command::Test => {
            let (mut rows, skipped) = wald_all(&net, &config.fit)?;
            if config.replicates > 0 {
                let plan = BootstrapPlan::new(config.replicates, config.seed).with_statistics([Statistic::Wald]);
                let plan = BootstrapPlan { fit: config.fit, ..plan };
                let boot = run_bootstrap(&net, &plan)?;
                attach_bootstrap_p(&mut rows, &boot);
                artifact.bootstrap = Some(boot);
            }
            artifact.wald = Some(WaldSection { rows, skipped });
        }
    }
    Ok(artifact)
}

/// Every report file derived from `artifact`, as `(file name, contents)`.
pub fn render(artifact: &AnalysisArtifact) -> Vec<(String, String)> {
    let mut files = vec![
        ("summary.txt".to_string(), summary_text(artifact)),
        ("odds_ratios.csv".to_string(), odds_ratio_csv(artifact)),
        ("forest.svg".to_string(), forest_svg(artifact)),
        ("network.svg".to_string(), network_svg(artifact)),
    ];
    if artifact.influence.is_some() {
        files.push(("influence.csv".to_string(), influence_csv(artifact)));
        files.push(("influence.svg".to_string(), influence_svg(artifact)));
    }
    if artifact.wald.is_some() {
        files.push(("wald.csv".to_string(), wald_csv(artifact)));
    }
    files
}

/// Writes the result file and every rendered file into `dir`.
pub fn write_outputs(artifact: &AnalysisArtifact, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let result = dir.join(RESULT_FILE);
    std::fs::write(&result, artifact.to_json()?)?;
    let mut paths = vec![result];
    paths.extend(write_report(artifact, dir)?);
    Ok(paths)
}

/// Writes the rendered files only.
pub fn write_report(artifact: &AnalysisArtifact, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, body) in render(artifact) {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        paths.push(p);
    }
    Ok(paths)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

fn opt_rank(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_text(a: &AnalysisArtifact) -> String {
    let mut s = String::new();
    let evaluable = a.designs.iter().filter(|d| d.evaluable).count();
    let _ = writeln!(
        s,
        "Network: {} studies, {} treatments, {} designs ({} evaluable); reference {}",
        a.n_studies,
        a.treatments.len(),
        a.designs.len(),
        evaluable,
        a.reference
    );
    if !a.config.excluded_studies.is_empty() {
        let _ = writeln!(s, "Excluded studies: {}", a.config.excluded_studies.join(", "));
    }
    if !a.config.excluded_designs.is_empty() {
        let _ = writeln!(s, "Excluded designs: {}", a.config.excluded_designs.join(", "));
    }
    let _ = writeln!(
        s,
        "tau = {:.4} (tau^2 = {:.5}), I^2 = {:.1}%, restricted log-likelihood = {:.4}",
        a.fit.tau(),
        a.fit.tau2_hat,
        100.0 * a.fit.i2,
        a.fit.loglik_restricted
    );
    match (&a.global_test, &a.global_test_note) {
        (Some(g), _) => {
            let _ = writeln!(s, "Global inconsistency test: W = {:.3}, df = {}, p = {:.3}", g.statistic, g.df, g.p);
        }
        (None, Some(note)) => {
            let _ = writeln!(s, "Global inconsistency test: not applicable ({note})");
        }
        (None, None) => {}
    }
    let _ = writeln!(s, "Odds ratios vs {} (95% CI):", a.reference);
    for o in &a.odds_ratios {
        let _ = writeln!(s, "  {:<10} {:.3} ({:.3}, {:.3})", o.treatment, o.or, o.lower, o.upper);
    }
    let _ = writeln!(s, "Ranking by odds ratio, lowest first: {}", a.ranking().join(", "));

    if let Some(inf) = &a.influence {
        let _ = writeln!(s, "Influence diagnostics ({}):", bootstrap_note(a));
        let _ = writeln!(
            s,
            "  {:>3}  {:<22} {:>8} {:>7} {:>8} {:>7} {:>8} {:>7} {:>8} {:>7}",
            "id", "design", "psi", "O", "mdffits", "O", "phi", "O", "xi", "O"
        );
        for r in &inf.rows {
            let m = &r.measures;
            let _ = writeln!(
                s,
                "  {:>3}  {:<22} {:>8.3} {:>7} {:>8.3} {:>7} {:>8} {:>7} {:>8} {:>7}",
                a.design_id(&m.label).unwrap_or(0),
                m.label,
                m.psi,
                opt(r.o_psi, 3),
                m.mdffits,
                opt(r.o_mdffits, 3),
                opt(m.phi, 3),
                opt(r.o_phi, 3),
                opt(m.xi, 3),
                opt(r.o_xi, 3)
            );
        }
        for sk in &inf.skipped {
            let _ = writeln!(s, "  not evaluable: {} ({})", sk.design, sk.reason);
        }
    }
    if let Some(w) = &a.wald {
        let _ = writeln!(s, "Leave-one-design-out Wald tests ({}):", bootstrap_note(a));
        for r in sorted_wald(&w.rows) {
            let _ = writeln!(
                s,
                "  {:>3}  {:<22} W = {:>7.3}  df = {}  P = {}",
                a.design_id(&r.label).unwrap_or(0),
                r.label,
                r.w,
                r.df,
                format_p(r)
            );
        }
        for sk in &w.skipped {
            let _ = writeln!(s, "  not evaluable: {} ({})", sk.design, sk.reason);
        }
    }
    if let Some(b) = &a.bootstrap {
        for d in &b.designs {
            for st in d.statistics.iter().filter(|x| x.flagged) {
                let _ = writeln!(
                    s,
                    "Warning: {} on {}: {} of {} replicates failed",
                    st.statistic, d.label, st.failures, b.replicates
                );
            }
        }
    }
    s
}

fn bootstrap_note(a: &AnalysisArtifact) -> String {
    match &a.bootstrap {
        Some(b) => format!("bootstrap B = {}, seed {}", b.replicates, b.seed),
        None => "bootstrap skipped".to_string(),
    }
}

fn wald_p(r: &WaldResult) -> f64 {
    r.p_boot.unwrap_or(r.p_chi2)
}

fn format_p(r: &WaldResult) -> String {
    match r.p_boot {
        Some(p) => format!("{p:.3} (bootstrap), {:.3} (chi-square)", r.p_chi2),
        None => format!("{:.3} (chi-square)", r.p_chi2),
    }
}

fn sorted_wald(rows: &[WaldResult]) -> Vec<&WaldResult> {
    let mut v: Vec<&WaldResult> = rows.iter().collect();
    v.sort_by(|a, b| wald_p(a).total_cmp(&wald_p(b)).then(b.w.total_cmp(&a.w)).then(a.label.cmp(&b.label)));
    v
}

pub fn odds_ratio_csv(a: &AnalysisArtifact) -> String {
    let mut s = String::from("treatment,reference,log_or,se,or,lower,upper\n");
    for o in &a.odds_ratios {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            o.treatment, a.reference, o.log_or, o.se, o.or, o.lower, o.upper
        );
    }
    s
}

/// One row per evaluable design in id order, then the non-evaluable designs.
pub fn influence_csv(a: &AnalysisArtifact) -> String {
    let mut s = String::from(
        "design_id,design,n_studies,psi,o_psi,rank_psi,mdffits,o_mdffits,rank_mdffits,\
         phi,o_phi,rank_phi,xi,o_xi,rank_xi,tau2_held_out,i2_held_out,status\n",
    );
    let Some(inf) = &a.influence else { return s };
    let mut rows: Vec<&InfluenceRow> = inf.rows.iter().collect();
    rows.sort_by_key(|r| a.design_id(&r.measures.label));
    for r in rows {
        let m = &r.measures;
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{},{:.6},{},{},{},{},{},{},{},{},{:.6},{:.6},{}",
            a.design_id(&m.label).unwrap_or(0),
            m.label,
            m.n_studies,
            m.psi,
            opt(r.o_psi, 4),
            r.rank_psi,
            m.mdffits,
            opt(r.o_mdffits, 4),
            r.rank_mdffits,
            opt(m.phi, 6),
            opt(r.o_phi, 4),
            opt_rank(r.rank_phi),
            opt(m.xi, 6),
            opt(r.o_xi, 4),
            opt_rank(r.rank_xi),
            m.tau2_held_out,
            m.i2_held_out,
            if m.held_out_converged { "ok" } else { "held-out fit not converged" }
        );
    }
    for sk in &inf.skipped {
        let _ = writeln!(s, "{},{},,,,,,,,,,,,,,,,not evaluable", a.design_id(&sk.design).unwrap_or(0), sk.design);
    }
    s
}

/// Sorted by P ascending. Multi-arm designs continue on extra rows holding
/// only the per-arm odds ratios; non-evaluable designs get a dash row.
pub fn wald_csv(a: &AnalysisArtifact) -> String {
    let mut s = String::from("design_id,design,w,df,p,p_chi2,treatment,reference,or_subset,or_rest\n");
    let Some(w) = &a.wald else { return s };
    for r in sorted_wald(&w.rows) {
        let (ors, orr) = (r.or_subset(), r.or_rest());
        for (k, arm) in r.arms.iter().enumerate() {
            if k == 0 {
                let _ = write!(
                    s,
                    "{},{},{:.4},{},{:.4},{:.4},",
                    a.design_id(&r.label).unwrap_or(0),
                    r.label,
                    r.w,
                    r.df,
                    wald_p(r),
                    r.p_chi2
                );
            } else {
                s.push_str(",,,,,,");
            }
            let _ = writeln!(s, "{},{},{:.4},{:.4}", arm, r.reference, ors[k], orr[k]);
        }
    }
    for sk in &w.skipped {
        let _ = writeln!(s, "{},{},-,-,-,-,-,-,-,-", a.design_id(&sk.design).unwrap_or(0), sk.design);
    }
    s
}

/// Minimal SVG document builder.
struct Svg {
    body: String,
    width: f64,
    height: f64,
}

fn esc(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Svg { body: String::new(), width, height }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64, dashed: bool) {
        let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
        let _ = writeln!(
            self.body,
            "<line x1=\"{x1:.1}\" y1=\"{y1:.1}\" x2=\"{x2:.1}\" y2=\"{y2:.1}\" stroke=\"{stroke}\" stroke-width=\"{width:.1}\"{dash}/>"
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(self.body, "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" fill=\"{fill}\"/>");
    }

    fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"{r:.1}\" fill=\"{fill}\" stroke=\"#333\" stroke-width=\"1\"/>"
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, fill: &str, t: &str) {
        let _ = writeln!(
            self.body,
            "<text x=\"{x:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"{size:.0}\" text-anchor=\"{anchor}\" fill=\"{fill}\">{}</text>",
            esc(t)
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

const HIGHLIGHT: &str = "#c0392b";
const NEUTRAL: &str = "#5d7ea8";

/// Odds ratios with 95% intervals on a log axis.
pub fn forest_svg(a: &AnalysisArtifact) -> String {
    let rows = a.odds_ratios.len().max(1) as f64;
    let (left, plot_w, right, top, row_h) = (110.0, 360.0, 190.0, 50.0, 26.0);
    let height = top + rows * row_h + 50.0;
    let mut svg = Svg::new(left + plot_w + right, height);
    svg.text(left + plot_w / 2.0, 22.0, 14.0, "middle", "#000", &format!("Odds ratios vs {} (95% CI)", a.reference));

    let lo = a.odds_ratios.iter().map(|o| o.lower).fold(1.0_f64, f64::min).ln();
    let hi = a.odds_ratios.iter().map(|o| o.upper).fold(1.0_f64, f64::max).ln();
    let pad = 0.05 * (hi - lo).max(0.1);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |or: f64| left + (or.ln() - lo) / (hi - lo) * plot_w;
    let bottom = top + rows * row_h;

    svg.line(x(1.0), top - 8.0, x(1.0), bottom, "#888", 1.0, true);
    svg.line(left, bottom, left + plot_w, bottom, "#333", 1.0, false);
    for tick in [0.125_f64, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
        if tick.ln() < lo || tick.ln() > hi {
            continue;
        }
        svg.line(x(tick), bottom, x(tick), bottom + 5.0, "#333", 1.0, false);
        svg.text(x(tick), bottom + 18.0, 11.0, "middle", "#333", &format!("{tick}"));
    }
    for (i, o) in a.odds_ratios.iter().enumerate() {
        let y = top + (i as f64 + 0.5) * row_h;
        svg.text(left - 10.0, y + 4.0, 12.0, "end", "#000", &o.treatment);
        svg.line(x(o.lower), y, x(o.upper), y, "#333", 1.5, false);
        svg.rect(x(o.or) - 4.0, y - 4.0, 8.0, 8.0, NEUTRAL);
        svg.text(
            left + plot_w + 12.0,
            y + 4.0,
            12.0,
            "start",
            "#000",
            &format!("{:.3} ({:.3}, {:.3})", o.or, o.lower, o.upper),
        );
    }
    svg.text(
        left + plot_w / 2.0,
        height - 8.0,
        11.0,
        "middle",
        "#333",
        &format!("tau = {:.3}, I^2 = {:.1}%", a.fit.tau(), 100.0 * a.fit.i2),
    );
    svg.finish()
}

/// Treatments on a circle; edge width grows with the number of studies
/// making the direct comparison.
pub fn network_svg(a: &AnalysisArtifact) -> String {
    let size = 520.0;
    let (cx, cy, radius) = (size / 2.0, size / 2.0 + 10.0, size / 2.0 - 80.0);
    let mut svg = Svg::new(size, size + 20.0);
    svg.text(cx, 24.0, 14.0, "middle", "#000", "Treatment network");

    let labels = &a.treatments;
    let n = labels.len().max(1) as f64;
    let pos: BTreeMap<&str, (f64, f64)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let ang = -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * i as f64 / n;
            (l.as_str(), (cx + radius * ang.cos(), cy + radius * ang.sin()))
        })
        .collect();

    let mut edges: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut node_studies: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &a.designs {
        for (i, x) in d.arms.iter().enumerate() {
            *node_studies.entry(x.as_str()).or_default() += d.studies.len();
            for y in &d.arms[i + 1..] {
                *edges.entry((x.as_str(), y.as_str())).or_default() += d.studies.len();
            }
        }
    }
    for ((x, y), k) in &edges {
        let (p, q) = (pos[x], pos[y]);
        svg.line(p.0, p.1, q.0, q.1, "#7f8c8d", 1.0 + 1.5 * (*k as f64).sqrt(), false);
        svg.text((p.0 + q.0) / 2.0, (p.1 + q.1) / 2.0 - 3.0, 10.0, "middle", "#555", &k.to_string());
    }
    for l in labels {
        let (x, y) = pos[l.as_str()];
        let k = node_studies.get(l.as_str()).copied().unwrap_or(0) as f64;
        let fill = if *l == a.reference { "#f5b041" } else { "#aed6f1" };
        svg.circle(x, y, 8.0 + 2.0 * k.sqrt(), fill);
        let (dx, dy) = ((x - cx) / radius, (y - cy) / radius);
        let r = 8.0 + 2.0 * k.sqrt() + 14.0;
        svg.text(x + dx * r, y + dy * r + 4.0, 12.0, "middle", "#000", l);
    }
    svg.finish()
}

/// Bar panels per selected measure: the value, and the O-value when a
/// bootstrap was run. Designs with O-value below 0.05 are highlighted.
pub fn influence_svg(a: &AnalysisArtifact) -> String {
    let Some(inf) = &a.influence else { return Svg::new(10.0, 10.0).finish() };
    let stats: Vec<Statistic> = Statistic::INFLUENCE
        .iter()
        .copied()
        .filter(|s| a.config.statistics.contains(s) || a.config.statistics.is_empty())
        .collect();
    let with_o = a.bootstrap.is_some();
    let mut rows: Vec<&InfluenceRow> = inf.rows.iter().collect();
    rows.sort_by_key(|r| a.design_id(&r.measures.label));

    let (label_w, bar_w, row_h, panel_gap) = (170.0, 220.0, 16.0, 30.0);
    let panel_w = label_w + bar_w + 20.0;
    let panel_h = 40.0 + rows.len() as f64 * row_h + 20.0;
    let cols = if with_o { 2.0 } else { 1.0 };
    let footer = 20.0 + 16.0 * inf.skipped.len() as f64;
    let mut svg = Svg::new(cols * panel_w + panel_gap, 40.0 + stats.len() as f64 * (panel_h + panel_gap) + footer);
    svg.text(
        cols * panel_w / 2.0,
        22.0,
        14.0,
        "middle",
        "#000",
        &format!("Design influence ({})", bootstrap_note(a)),
    );

    for (si, s) in stats.iter().enumerate() {
        let top = 40.0 + si as f64 * (panel_h + panel_gap);
        let flagged = |r: &InfluenceRow| r.o_value(*s).is_some_and(|o| o < SIGNIFICANCE);
        let mut panels = vec![(format!("{s}"), false)];
        if with_o {
            panels.push((format!("O-value of {s}"), true));
        }
        for (pi, (title, is_o)) in panels.iter().enumerate() {
            let left = pi as f64 * (panel_w + panel_gap);
            svg.text(left + label_w + bar_w / 2.0, top + 14.0, 13.0, "middle", "#000", title);
            let vals: Vec<Option<f64>> =
                rows.iter().map(|r| if *is_o { r.o_value(*s) } else { r.value(*s) }).collect();
            let max = if *is_o {
                1.0
            } else {
                vals.iter().flatten().filter(|v| v.is_finite()).fold(0.0_f64, |m, v| m.max(*v)).max(1e-12)
            };
            let x0 = left + label_w;
            let y0 = top + 26.0;
            svg.line(x0, y0, x0, y0 + rows.len() as f64 * row_h, "#333", 1.0, false);
            let reference = if *is_o {
                Some(SIGNIFICANCE)
            } else if matches!(s, Statistic::Phi | Statistic::Xi) {
                Some(1.0)
            } else {
                None
            };
            if let Some(r) = reference.filter(|r| *r <= max) {
                let xr = x0 + r / max * bar_w;
                svg.line(xr, y0 - 4.0, xr, y0 + rows.len() as f64 * row_h, "#888", 1.0, true);
            }
            for (ri, r) in rows.iter().enumerate() {
                let y = y0 + ri as f64 * row_h;
                let label = format!("{} {}", a.design_id(&r.measures.label).unwrap_or(0), r.measures.label);
                let colour = if flagged(r) { HIGHLIGHT } else { NEUTRAL };
                svg.text(x0 - 6.0, y + row_h * 0.72, 10.0, "end", if flagged(r) { HIGHLIGHT } else { "#000" }, &label);
                match vals[ri] {
                    Some(v) if v.is_finite() => {
                        svg.rect(x0, y + 2.0, (v / max).clamp(0.0, 1.0) * bar_w, row_h - 4.0, colour);
                        svg.text(
                            x0 + (v / max).clamp(0.0, 1.0) * bar_w + 3.0,
                            y + row_h * 0.72,
                            9.0,
                            "start",
                            "#333",
                            &format!("{v:.3}"),
                        );
                    }
                    _ => svg.text(x0 + 3.0, y + row_h * 0.72, 9.0, "start", "#888", "n/a"),
                }
            }
        }
    }
    let mut y = 40.0 + stats.len() as f64 * (panel_h + panel_gap);
    for sk in &inf.skipped {
        svg.text(10.0, y, 11.0, "start", "#555", &format!("Not evaluable: {} ({})", sk.design, sk.reason));
        y += 16.0;
    }
    svg.finish()
}
