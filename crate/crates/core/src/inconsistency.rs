//! Inconsistency tests: the leave-one-design-out Wald test, the global
//! design-by-treatment interaction test and the loop-wise Bucher test.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::bootstrap::{BootstrapResult, Statistic};
use crate::error::{NmaError, Result};
use crate::influence::{evaluable_designs, lodo_fit_plan, lodo_plan, SkippedDesign};
use crate::linalg;
use crate::network::{DesignKey, NetworkDataset, TreatmentId};
use crate::reml::{FitOptions, FitResult, LinearModel, PreparedModel};

/// Upper tail of `χ²_df` at `x`.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if df == 0 {
        return f64::NAN;
    }
    let d = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    d.sf(x.max(0.0)).clamp(0.0, 1.0)
}

/// Two-sided standard normal P-value.
pub fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.sf(z.abs())).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub design: DesignKey,
    pub label: String,
    /// Arm both estimates are expressed against.
    pub reference: String,
    /// Non-reference arms of the design, in the order of the estimate vectors.
    pub arms: Vec<String>,
    pub w: f64,
    pub df: usize,
    pub p_chi2: f64,
    pub p_boot: Option<f64>,
    /// Log odds ratios from the design's own studies.
    pub mu_subset: Vec<f64>,
    /// Log odds ratios from every other study.
    pub mu_rest: Vec<f64>,
    pub tau2_subset: f64,
    pub subset_degenerate: bool,
}

impl WaldResult {
    pub fn or_subset(&self) -> Vec<f64> {
        self.mu_subset.iter().map(|m| m.exp()).collect()
    }

    pub fn or_rest(&self) -> Vec<f64> {
        self.mu_rest.iter().map(|m| m.exp()).collect()
    }
}

/// REML fit on the studies of `design` alone, against the design's base arm.
pub fn subset_fit(net: &NetworkDataset, design: &DesignKey, options: &FitOptions) -> Result<FitResult> {
    if !net.designs().contains_key(design) {
        return Err(NmaError::UnknownDesign(net.design_label(design)));
    }
    let sub = net.subset(|_, s| s.design() == *design)?.in_study_form(design.base())?;
    PreparedModel::new(&sub)?.fit(options)
}

/// Contrast difference and covariance sum for the design's basis contrasts.
fn wald_parts(
    design: &DesignKey,
    subset: &FitResult,
    held_out: &FitResult,
) -> Result<(Vec<TreatmentId>, DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    let base = design.base();
    let arms: Vec<TreatmentId> = design.arms().iter().copied().filter(|t| *t != base).collect();
    let (ms, vs) = subset.contrasts(base, &arms)?;
    let (mr, vr) = held_out.contrasts(base, &arms)?;
    Ok((arms, ms, mr, vs + vr))
}

/// `W_d = Δᵀ (V_sub + V_rest)⁻¹ Δ` from already-fitted pieces.
pub fn wald_statistic(design: &DesignKey, subset: &FitResult, held_out: &FitResult) -> Result<f64> {
    let (_, ms, mr, v) = wald_parts(design, subset, held_out)?;
    linalg::quadratic_form_inv(&(ms - mr), &v, "Wald covariance")
}

pub fn wald_from_fits(
    net: &NetworkDataset,
    design: &DesignKey,
    subset: &FitResult,
    held_out: &FitResult,
) -> Result<WaldResult> {
    let (arms, ms, mr, v) = wald_parts(design, subset, held_out)?;
    let w = linalg::quadratic_form_inv(&(&ms - &mr), &v, "Wald covariance")?;
    let df = design.n_contrasts();
    Ok(WaldResult {
        design: design.clone(),
        label: net.design_label(design),
        reference: net.label(design.base()).to_string(),
        arms: arms.iter().map(|t| net.label(*t).to_string()).collect(),
        w,
        df,
        p_chi2: chi2_sf(w, df),
        p_boot: None,
        mu_subset: ms.iter().copied().collect(),
        mu_rest: mr.iter().copied().collect(),
        tau2_subset: subset.tau2_hat,
        subset_degenerate: subset.degenerate,
    })
}

pub fn wald_lodo(net: &NetworkDataset, design: &DesignKey, options: &FitOptions) -> Result<WaldResult> {
    let plan = lodo_plan(net, design)?;
    let held_out = lodo_fit_plan(net, &plan, options)?;
    let subset = subset_fit(net, design, options)?;
    wald_from_fits(net, design, &subset, &held_out.fit)
}

/// Wald tests for every evaluable design, plus the skipped designs.
pub fn wald_all(net: &NetworkDataset, options: &FitOptions) -> Result<(Vec<WaldResult>, Vec<SkippedDesign>)> {
    let (plans, skipped) = evaluable_designs(net);
    let results = plans
        .par_iter()
        .map(|p| {
            let held_out = lodo_fit_plan(net, p, options)?;
            let subset = subset_fit(net, &p.design, options)?;
            wald_from_fits(net, &p.design, &subset, &held_out.fit)
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = skipped
        .into_iter()
        .map(|(d, e)| SkippedDesign { design: net.design_label(&d), reason: e.to_string() })
        .collect();
    Ok((results, skipped))
}

/// Copies bootstrap P-values for `W` onto matching results.
pub fn attach_bootstrap_p(results: &mut [WaldResult], boot: &BootstrapResult) {
    for r in results {
        r.p_boot = boot
            .designs
            .iter()
            .find(|d| d.design == r.design)
            .and_then(|d| d.get(Statistic::Wald))
            .and_then(|s| s.o_value);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalTestResult {
    pub statistic: f64,
    pub df: usize,
    pub p: f64,
    /// `τ²` estimated under the interaction model.
    pub tau2: f64,
}

/// Design-by-treatment interaction test.
///
/// Every design gets its own effects against its base arm, fitted by REML
/// with a common `τ²`. The statistic is the GLS distance of those effects
/// from the consistency subspace; `df` is the number of design-specific
/// effects minus the rank of the consistency map.
pub fn global_interaction_test(net: &NetworkDataset, options: &FitOptions) -> Result<GlobalTestResult> {
    let basis = net.basis()?;
    let mut index: BTreeMap<(DesignKey, TreatmentId), usize> = BTreeMap::new();
    for d in net.designs().keys() {
        for t in d.arms().iter().skip(1) {
            let next = index.len();
            index.insert((d.clone(), *t), next);
        }
    }
    let q = index.len();
    let mut model = LinearModel::new(q);
    for s in net.studies() {
        let d = s.design();
        let r = s.rebased(d.base())?;
        let plus = r.contrast_arms().iter().map(|t| index.get(&(d.clone(), *t)).copied()).collect();
        model.push(&r.y, &r.s, plus, None);
    }
    let est = model.estimate(options)?;

    let mut z = DMatrix::zeros(q, basis.dim());
    for ((d, t), row) in &index {
        if let Some(c) = basis.index_of(*t) {
            z[(*row, c)] += 1.0;
        }
        if let Some(c) = basis.index_of(d.base()) {
            z[(*row, c)] -= 1.0;
        }
    }
    let rank = z.clone().svd(false, false).rank(1e-9);
    if q <= rank {
        return Err(NmaError::NotApplicable("no identifiable interaction contrasts".into()));
    }
    let df = q - rank;
    let v_inv = linalg::spd_inverse(&est.cov, "interaction model covariance")?;
    let zt_vi = z.transpose() * &v_inv;
    let gram = linalg::symmetrize(&(&zt_vi * &z));
    let gamma = gram
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| NmaError::NotPositiveDefinite(e.to_string()))?
        * (&zt_vi * &est.mu);
    let resid = &est.mu - &z * gamma;
    let statistic = (resid.transpose() * &v_inv * &resid)[(0, 0)].max(0.0);
    Ok(GlobalTestResult { statistic, df, p: chi2_sf(statistic, df), tau2: est.tau2 })
}

/// Pooled direct estimate on one edge of a loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeEstimate {
    pub from: String,
    pub to: String,
    pub estimate: f64,
    pub variance: f64,
    pub tau2: f64,
    pub studies: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopTestResult {
    pub loop_arms: [String; 3],
    /// Direct effects on the edges `(a, b)`, `(a, c)` and `(b, c)`.
    pub edges: [EdgeEstimate; 3],
    pub direct: f64,
    pub indirect: f64,
    pub inconsistency: f64,
    pub variance: f64,
    pub z: f64,
    pub p: f64,
}

/// DerSimonian–Laird pooling of scalar estimates: `(estimate, variance, τ²)`.
pub fn dersimonian_laird(y: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let k = y.len();
    let w: Vec<f64> = v.iter().map(|x| 1.0 / x).collect();
    let sw: f64 = w.iter().sum();
    let fixed = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let tau2 = if k > 1 {
        let q: f64 = w.iter().zip(y).map(|(w, y)| w * (y - fixed).powi(2)).sum();
        let c = sw - w.iter().map(|w| w * w).sum::<f64>() / sw;
        ((q - (k as f64 - 1.0)) / c).max(0.0)
    } else {
        0.0
    };
    let wr: Vec<f64> = v.iter().map(|x| 1.0 / (x + tau2)).collect();
    let swr: f64 = wr.iter().sum();
    let est = wr.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / swr;
    (est, 1.0 / swr, tau2)
}

/// Bucher test on the triangle `(a, b, c)`: direct `b` vs `a` against the
/// indirect route through `c`.
///
/// Two-arm studies go to their own edge. A study holding all three arms is
/// used on one edge only: whichever currently has the fewest studies, ties
/// broken in the order `ab`, `ac`, `bc`.
pub fn bucher_loop_test(net: &NetworkDataset, arms: [TreatmentId; 3]) -> Result<LoopTestResult> {
    let [a, b, c] = arms;
    if a == b || b == c || a == c {
        return Err(NmaError::Config("loop arms must be distinct".into()));
    }
    let edges = [(a, b), (a, c), (b, c)];
    let mut members: [Vec<usize>; 3] = Default::default();
    let mut multi = Vec::new();
    for (i, s) in net.studies().iter().enumerate() {
        let has: Vec<bool> = arms.iter().map(|t| s.arms.contains(t)).collect();
        match has.iter().filter(|h| **h).count() {
            3 => multi.push(i),
            2 => {
                let e = edges.iter().position(|(x, y)| s.arms.contains(x) && s.arms.contains(y)).expect("two arms present");
                members[e].push(i);
            }
            _ => {}
        }
    }
    for i in multi {
        let e = (0..3).min_by_key(|e| members[*e].len()).expect("three edges");
        members[e].push(i);
    }
    let mut pooled = Vec::with_capacity(3);
    for (e, (from, to)) in edges.iter().enumerate() {
        if members[e].is_empty() {
            return Err(NmaError::MissingEdge(net.label(*from).to_string(), net.label(*to).to_string()));
        }
        let mut ys = Vec::new();
        let mut vs = Vec::new();
        for i in &members[e] {
            let s = net.studies()[*i].rebased(*from)?;
            let k = s.contrast_arms().iter().position(|t| t == to).expect("edge arm present");
            ys.push(s.y[k]);
            vs.push(s.s[(k, k)]);
        }
        let (estimate, variance, tau2) = dersimonian_laird(&ys, &vs);
        pooled.push(EdgeEstimate {
            from: net.label(*from).to_string(),
            to: net.label(*to).to_string(),
            estimate,
            variance,
            tau2,
            studies: members[e].iter().map(|i| net.studies()[*i].study_id.clone()).collect(),
        });
    }
    let direct = pooled[0].estimate;
    let indirect = pooled[1].estimate - pooled[2].estimate;
    let inconsistency = direct - indirect;
    let variance: f64 = pooled.iter().map(|e| e.variance).sum();
    let z = inconsistency / variance.sqrt();
    let edges: [EdgeEstimate; 3] = pooled.try_into().expect("three edges");
    Ok(LoopTestResult {
        loop_arms: arms.map(|t| net.label(t).to_string()),
        edges,
        direct,
        indirect,
        inconsistency,
        variance,
        z,
        p: normal_two_sided(z),
    })
}
