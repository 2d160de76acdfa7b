//! Leave-one-design-out refits and the four design-level influence measures.
//!
//! * `Ψ_d`: mean studentized residual of the design's studies, each
//!   predicted from the fit that excludes the design.
//! * `MDFFITS_d`: shift of the pooled mean when the design is removed,
//!   scaled by the covariance of the reduced fit and by `p_d`.
//! * `Φ_d`, `Ξ_d`: ratios of `τ²` and `I²` without and with the design.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{BootstrapResult, Statistic};
use crate::error::{NmaError, Result};
use crate::linalg;
use crate::network::{ContrastStudy, DesignKey, NetworkDataset, TreatmentId};
use crate::reml::{contrast_map, FitOptions, FitResult, PreparedModel};

/// Which studies survive when one design is held out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LodoPlan {
    pub design: DesignKey,
    /// Designs that lose their connection to the reference once `design` is gone.
    pub dropped: Vec<DesignKey>,
    pub kept_studies: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LodoFit {
    pub plan: LodoPlan,
    pub fit: FitResult,
}

/// Plans the refit without `design`. A design is evaluable only when every
/// one of its arms remains reachable from the reference without it.
pub fn lodo_plan(net: &NetworkDataset, design: &DesignKey) -> Result<LodoPlan> {
    if !net.designs().contains_key(design) {
        return Err(NmaError::UnknownDesign(net.design_label(design)));
    }
    let label = net.design_label(design);
    let comp = match net.connected_component(Some(design)) {
        Ok(c) => c,
        Err(NmaError::ReferenceDisconnected) => return Err(NmaError::NotEvaluable(label)),
        Err(e) => return Err(e),
    };
    if let Some(t) = design.arms().iter().find(|t| !comp.kept.contains(t)) {
        return Err(NmaError::UnreachableArm { design: label, treatment: net.label(*t).to_string() });
    }
    if !comp.dropped.is_empty() {
        let names: Vec<String> = comp.dropped.iter().map(|d| net.design_label(d)).collect();
        log::warn!("excluding `{label}` disconnects {}; those designs are dropped from the refit", names.join(", "));
    }
    let removed: BTreeSet<&DesignKey> = comp.dropped.iter().chain(std::iter::once(design)).collect();
    let kept_studies = (0..net.n_studies()).filter(|i| !removed.contains(&net.studies()[*i].design())).collect();
    Ok(LodoPlan { design: design.clone(), dropped: comp.dropped, kept_studies })
}

/// Evaluable plans in design order, plus the designs that were skipped and why.
pub fn evaluable_designs(net: &NetworkDataset) -> (Vec<LodoPlan>, Vec<(DesignKey, NmaError)>) {
    let mut plans = Vec::new();
    let mut skipped = Vec::new();
    for d in net.designs().keys() {
        match lodo_plan(net, d) {
            Ok(p) => plans.push(p),
            Err(e) => skipped.push((d.clone(), e)),
        }
    }
    (plans, skipped)
}

pub fn lodo_fit_plan(net: &NetworkDataset, plan: &LodoPlan, options: &FitOptions) -> Result<LodoFit> {
    let keep: BTreeSet<usize> = plan.kept_studies.iter().copied().collect();
    let reduced = net.subset(|i, _| keep.contains(&i))?;
    let fit = PreparedModel::new(&reduced)?.fit(options)?;
    Ok(LodoFit { plan: plan.clone(), fit })
}

pub fn lodo_fit(net: &NetworkDataset, design: &DesignKey, options: &FitOptions) -> Result<LodoFit> {
    lodo_fit_plan(net, &lodo_plan(net, design)?, options)
}

/// `ξ_i = rᵀ V⁻¹ r / p_i` for a study expressed against `base`, one of its arms.
///
/// `V = S_i + τ² P + C V_μ Cᵀ` uses the held-out fit's `τ²` and `V_μ`.
pub fn studentized_residual(study: &ContrastStudy, base: TreatmentId, held_out: &FitResult) -> Result<f64> {
    let s = study.rebased(base)?;
    let arms = s.contrast_arms();
    let c = contrast_map(&held_out.basis, base, &arms)?;
    let r = &s.y - &c * &held_out.mu_hat;
    let v = &s.s + linalg::half_correlation(arms.len(), held_out.tau2_hat) + &c * &held_out.cov_mu * c.transpose();
    let q = linalg::quadratic_form_inv(&r, &v, &study.study_id)?;
    Ok(q / arms.len() as f64)
}

pub fn psi(net: &NetworkDataset, design: &DesignKey, held_out: &FitResult) -> Result<f64> {
    let idx = net.study_indices(design);
    if idx.is_empty() {
        return Err(NmaError::UnknownDesign(net.design_label(design)));
    }
    let mut total = 0.0;
    for i in idx {
        total += studentized_residual(&net.studies()[*i], design.base(), held_out)?;
    }
    Ok(total / idx.len() as f64)
}

/// `(μ̂ - μ̂₍₋d₎)ᵀ V̂₍₋d₎⁻¹ (μ̂ - μ̂₍₋d₎) / p_d` over the treatments of the reduced fit.
pub fn mdffits(full: &FitResult, held_out: &FitResult, design: &DesignKey) -> Result<f64> {
    let basis = &held_out.basis;
    if basis.reference != full.basis.reference {
        return Err(NmaError::DimensionMismatch("fits use different references".into()));
    }
    let (mu_full, _) = full.contrasts(basis.reference, &basis.treatments)?;
    let diff = mu_full - &held_out.mu_hat;
    let q = linalg::quadratic_form_inv(&diff, &held_out.cov_mu, "held-out covariance")?;
    Ok(q / design.n_contrasts() as f64)
}

/// `(Φ_d, Ξ_d)`; a ratio is `None` when the full-data value is zero.
pub fn heterogeneity_ratios(full: &FitResult, held_out: &FitResult) -> (Option<f64>, Option<f64>) {
    let ratio = |a: f64, b: f64| (b > 0.0).then(|| a / b);
    (ratio(held_out.tau2_hat, full.tau2_hat), ratio(held_out.i2, full.i2))
}

/// Ratio for bootstrap replicates: `0/0` is 1 and `x/0` is `+∞`.
pub fn replicate_ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignInfluence {
    pub design: DesignKey,
    pub label: String,
    pub n_studies: usize,
    pub psi: f64,
    pub mdffits: f64,
    pub phi: Option<f64>,
    pub xi: Option<f64>,
    pub tau2_held_out: f64,
    pub i2_held_out: f64,
    pub held_out_converged: bool,
    pub dropped: Vec<String>,
}

pub fn design_influence(net: &NetworkDataset, full: &FitResult, lodo: &LodoFit) -> Result<DesignInfluence> {
    let d = &lodo.plan.design;
    let (phi, xi) = heterogeneity_ratios(full, &lodo.fit);
    Ok(DesignInfluence {
        design: d.clone(),
        label: net.design_label(d),
        n_studies: net.study_indices(d).len(),
        psi: psi(net, d, &lodo.fit)?,
        mdffits: mdffits(full, &lodo.fit, d)?,
        phi,
        xi,
        tau2_held_out: lodo.fit.tau2_hat,
        i2_held_out: lodo.fit.i2,
        held_out_converged: lodo.fit.converged,
        dropped: lodo.plan.dropped.iter().map(|k| net.design_label(k)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    #[serde(flatten)]
    pub measures: DesignInfluence,
    pub rank_psi: usize,
    pub rank_mdffits: usize,
    pub rank_phi: Option<usize>,
    pub rank_xi: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o_psi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o_mdffits: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o_phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o_xi: Option<f64>,
}

impl InfluenceRow {
    pub fn value(&self, s: Statistic) -> Option<f64> {
        match s {
            Statistic::Psi => Some(self.measures.psi),
            Statistic::Mdffits => Some(self.measures.mdffits),
            Statistic::Phi => self.measures.phi,
            Statistic::Xi => self.measures.xi,
            Statistic::Wald => None,
        }
    }

    pub fn o_value(&self, s: Statistic) -> Option<f64> {
        match s {
            Statistic::Psi => self.o_psi,
            Statistic::Mdffits => self.o_mdffits,
            Statistic::Phi => self.o_phi,
            Statistic::Xi => self.o_xi,
            Statistic::Wald => None,
        }
    }

    pub fn rank(&self, s: Statistic) -> Option<usize> {
        match s {
            Statistic::Psi => Some(self.rank_psi),
            Statistic::Mdffits => Some(self.rank_mdffits),
            Statistic::Phi => self.rank_phi,
            Statistic::Xi => self.rank_xi,
            Statistic::Wald => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedDesign {
    pub design: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub full: FitResult,
    pub rows: Vec<InfluenceRow>,
    pub skipped: Vec<SkippedDesign>,
}

impl InfluenceReport {
    pub fn row(&self, label: &str) -> Option<&InfluenceRow> {
        self.rows.iter().find(|r| r.measures.label == label)
    }

    /// Copies O-values from a bootstrap run over the same network.
    pub fn attach_o_values(&mut self, boot: &BootstrapResult) {
        for row in &mut self.rows {
            let Some(d) = boot.designs.iter().find(|d| d.design == row.measures.design) else { continue };
            let o = |s| d.get(s).and_then(|x| x.o_value);
            row.o_psi = o(Statistic::Psi);
            row.o_mdffits = o(Statistic::Mdffits);
            row.o_phi = o(Statistic::Phi);
            row.o_xi = o(Statistic::Xi);
        }
    }
}

/// Competition ranks (1, 2, 2, 4) of the defined values; `descending` puts
/// the largest value first.
pub fn competition_ranks(values: &[Option<f64>], descending: bool) -> Vec<Option<usize>> {
    values
        .iter()
        .map(|v| {
            v.map(|x| {
                1 + values
                    .iter()
                    .flatten()
                    .filter(|y| if descending { **y > x } else { **y < x })
                    .count()
            })
        })
        .collect()
}

pub fn rank_rows(measures: Vec<DesignInfluence>) -> Vec<InfluenceRow> {
    let col = |f: &dyn Fn(&DesignInfluence) -> Option<f64>| measures.iter().map(f).collect::<Vec<_>>();
    let psi = competition_ranks(&col(&|m| Some(m.psi)), true);
    let md = competition_ranks(&col(&|m| Some(m.mdffits)), true);
    let phi = competition_ranks(&col(&|m| m.phi), false);
    let xi = competition_ranks(&col(&|m| m.xi), false);
    measures
        .into_iter()
        .enumerate()
        .map(|(i, m)| InfluenceRow {
            measures: m,
            rank_psi: psi[i].unwrap_or(0),
            rank_mdffits: md[i].unwrap_or(0),
            rank_phi: phi[i],
            rank_xi: xi[i],
            o_psi: None,
            o_mdffits: None,
            o_phi: None,
            o_xi: None,
        })
        .collect()
}

/// Full fit, every evaluable leave-one-design-out refit and the ranked measures.
pub fn compute_influence(net: &NetworkDataset, options: &FitOptions) -> Result<InfluenceReport> {
    let full = PreparedModel::new(net)?.fit(options)?;
    let (plans, skipped) = evaluable_designs(net);
    let measures = plans
        .par_iter()
        .map(|p| {
            let lodo = lodo_fit_plan(net, p, options)?;
            design_influence(net, &full, &lodo)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InfluenceReport {
        full,
        rows: rank_rows(measures),
        skipped: skipped
            .into_iter()
            .map(|(d, e)| SkippedDesign { design: net.design_label(&d), reason: e.to_string() })
            .collect(),
    })
}


#[cfg(test)]
mod fixture_tests {
    use super::*;
    use crate::ingest::{antihypertensive_records, ingest, IngestOptions};

    #[test]
    fn fixture_influence_measures() {
        let opts = IngestOptions { reference: Some("Placebo".into()), augment: true };
        let net = ingest(&antihypertensive_records(), &opts).unwrap();
        let rep = compute_influence(&net, &FitOptions::default()).unwrap();
        assert_eq!(rep.rows.len(), 17);
        assert_eq!(rep.skipped.len(), 1);
        assert_eq!(rep.skipped[0].design, "AB vs DD");
        let check = |label: &str, psi: f64, md: f64, phi: f64, xi: f64| {
            let r = &rep.row(label).unwrap().measures;
            assert!((r.psi - psi).abs() < 2e-3, "{label} psi {}", r.psi);
            assert!((r.mdffits - md).abs() < 2e-3, "{label} mdffits {}", r.mdffits);
            assert!((r.phi.unwrap() - phi).abs() < 2e-3, "{label} phi {:?}", r.phi);
            assert!((r.xi.unwrap() - xi).abs() < 2e-3, "{label} xi {:?}", r.xi);
        };
        check("ARB vs CT", 3.441, 1.201, 0.784, 0.917);
        check("DD vs Placebo", 3.998, 0.834, 0.402, 0.659);
        check("ACE vs CCB vs CT", 0.237, 0.087, 1.819, 1.207);
        assert_eq!(rep.row("DD vs Placebo").unwrap().rank_psi, 1);
        assert_eq!(rep.row("ARB vs CT").unwrap().rank_mdffits, 1);
        assert_eq!(rep.row("DD vs Placebo").unwrap().rank_phi, Some(1));
    }
}
