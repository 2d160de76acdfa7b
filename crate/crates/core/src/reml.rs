//! REML fitting of the contrast-based random-effects model.
//!
//! The between-study covariance is `τ² P` with unit diagonal and 0.5
//! correlations, so once the mean is profiled out in closed form the
//! restricted log-likelihood is a function of `τ²` alone:
//!
//! ```text
//! ℓ(τ²) = -½ [ Σ log det V_i + Σ r_iᵀ V_i⁻¹ r_i + log det Σ X_iᵀ V_i⁻¹ X_i ]
//! V_i   = S_i + τ² P_i,   r_i = y_i - X_i μ̂(τ²)
//! ```
//!
//! `X_i` maps the study's contrasts (against its own, possibly pseudo,
//! reference arm) onto the global parameter basis, which handles studies
//! that observe only a subset of the treatments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NmaError, Result};
use crate::linalg;
use crate::network::{BasisTransform, NetworkDataset, ParameterBasis, TreatmentId};
use crate::optimize;

pub const DEFAULT_TAU2_MAX: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetweenStudyStructure {
    pub tau2: f64,
    pub dim: usize,
}

impl BetweenStudyStructure {
    pub fn matrix(&self) -> DMatrix<f64> {
        linalg::half_correlation(self.dim, self.tau2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tau2_max: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { tau2_max: DEFAULT_TAU2_MAX, tolerance: 1e-8, max_iter: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub basis: ParameterBasis,
    /// Log odds ratios of `basis.treatments` against `basis.reference`.
    pub mu_hat: DVector<f64>,
    pub tau2_hat: f64,
    pub cov_mu: DMatrix<f64>,
    pub loglik_restricted: f64,
    pub i2: f64,
    pub r_stat: f64,
    pub converged: bool,
    /// Too few contrasts to identify `τ²`; it was fixed at zero.
    pub degenerate: bool,
    pub n_used: usize,
    pub evaluations: usize,
}

/// Estimate with a symmetric Wald interval, on the odds-ratio scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OddsRatio {
    pub treatment: TreatmentId,
    pub log_or: f64,
    pub se: f64,
    pub or: f64,
    pub lower: f64,
    pub upper: f64,
}

pub(crate) const Z_975: f64 = 1.959_963_984_540_054;

impl FitResult {
    pub fn tau(&self) -> f64 {
        self.tau2_hat.sqrt()
    }

    /// Mean and covariance of `θ_t - θ_base` for each `t` in `targets`.
    pub fn contrasts(&self, base: TreatmentId, targets: &[TreatmentId]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let l = contrast_map(&self.basis, base, targets)?;
        let m = &l * &self.mu_hat;
        let v = linalg::symmetrize(&(&l * &self.cov_mu * l.transpose()));
        Ok((m, v))
    }

    /// The full mean vector re-expressed against `to`.
    pub fn rebased(&self, to: TreatmentId) -> Result<(ParameterBasis, DVector<f64>, DMatrix<f64>)> {
        let t = BasisTransform::new(&self.basis.all_treatments(), self.basis.reference, to)?;
        let (m, v) = crate::network::rebase(&self.mu_hat, &self.cov_mu, &t)?;
        Ok((t.target_basis(), m, v))
    }

    pub fn odds_ratios(&self) -> Vec<OddsRatio> {
        self.basis
            .treatments
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let log_or = self.mu_hat[i];
                let se = self.cov_mu[(i, i)].max(0.0).sqrt();
                OddsRatio {
                    treatment: *t,
                    log_or,
                    se,
                    or: log_or.exp(),
                    lower: (log_or - Z_975 * se).exp(),
                    upper: (log_or + Z_975 * se).exp(),
                }
            })
            .collect()
    }
}

/// Rows `e_t - e_base` over `basis` (reference column omitted).
pub fn contrast_map(basis: &ParameterBasis, base: TreatmentId, targets: &[TreatmentId]) -> Result<DMatrix<f64>> {
    let col = |t: TreatmentId| -> Result<Option<usize>> {
        if t == basis.reference {
            Ok(None)
        } else {
            basis.index_of(t).map(Some).ok_or_else(|| NmaError::UnknownTreatment(t.to_string()))
        }
    };
    let base_col = col(base)?;
    let mut l = DMatrix::zeros(targets.len(), basis.dim());
    for (r, t) in targets.iter().enumerate() {
        if let Some(c) = col(*t)? {
            l[(r, c)] += 1.0;
        }
        if let Some(c) = base_col {
            l[(r, c)] -= 1.0;
        }
    }
    Ok(l)
}

struct StudyTerm {
    k: usize,
    y: Vec<f64>,
    s: Vec<f64>,
    plus: Vec<Option<usize>>,
    minus: Option<usize>,
}

/// Design matrix, data and sampling covariances of a contrast-level model
/// with between-study covariance `τ² P`. Rows of `X_i` are
/// `e[plus] - e[minus]`, where `None` marks an omitted column.
pub(crate) struct LinearModel {
    dim: usize,
    terms: Vec<StudyTerm>,
    n_obs: usize,
    k_max: usize,
}

struct Workspace {
    v: Vec<f64>,
    w: Vec<f64>,
    col: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

struct Evaluation {
    loglik: f64,
    mu: Vec<f64>,
    chol_a: Vec<f64>,
}

/// Adds the `X_iᵀ M X_i` contribution of one study to the row-major `p x p` matrix `a`.
fn scatter(t: &StudyTerm, m: &[f64], a: &mut [f64], p: usize) {
    let k = t.k;
    for i in 0..k {
        let mut row_sum = 0.0;
        for j in 0..k {
            let mij = m[i * k + j];
            row_sum += mij;
            if let (Some(ci), Some(cj)) = (t.plus[i], t.plus[j]) {
                a[ci * p + cj] += mij;
            }
        }
        if let Some(mc) = t.minus {
            if let Some(ci) = t.plus[i] {
                a[ci * p + mc] -= row_sum;
                a[mc * p + ci] -= row_sum;
            }
        }
    }
    if let Some(mc) = t.minus {
        let total: f64 = m.iter().sum();
        a[mc * p + mc] += total;
    }
}

/// `τ²` estimate and the mean at that value.
pub(crate) struct Estimate {
    pub tau2: f64,
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub degenerate: bool,
    pub evaluations: usize,
}

impl LinearModel {
    pub(crate) fn new(dim: usize) -> Self {
        LinearModel { dim, terms: Vec::new(), n_obs: 0, k_max: 1 }
    }

    pub(crate) fn push(&mut self, y: &DVector<f64>, s: &DMatrix<f64>, plus: Vec<Option<usize>>, minus: Option<usize>) {
        let k = y.len();
        debug_assert_eq!(plus.len(), k);
        self.terms.push(StudyTerm { k, y: y.iter().copied().collect(), s: linalg::to_row_major(s), plus, minus });
        self.n_obs += k;
        self.k_max = self.k_max.max(k);
    }

    fn residual_df(&self) -> isize {
        self.n_obs as isize - self.dim as isize
    }

    fn workspace(&self) -> Workspace {
        let k = self.k_max;
        let p = self.dim;
        Workspace {
            v: vec![0.0; k * k],
            w: vec![0.0; k * k],
            col: vec![0.0; k.max(p)],
            u: vec![0.0; k],
            a: vec![0.0; p * p],
            b: vec![0.0; p],
        }
    }

    fn evaluate(&self, tau2: f64, ws: &mut Workspace) -> Option<Evaluation> {
        let p = self.dim;
        ws.a.fill(0.0);
        ws.b.fill(0.0);
        let mut logdet_v = 0.0;
        let mut ywy = 0.0;
        for t in &self.terms {
            let k = t.k;
            let v = &mut ws.v[..k * k];
            for i in 0..k {
                for j in 0..k {
                    v[i * k + j] = t.s[i * k + j] + if i == j { tau2 } else { 0.5 * tau2 };
                }
            }
            if !linalg::cholesky_in_place(v, k) {
                return None;
            }
            logdet_v += linalg::chol_logdet(v, k);
            let w = &mut ws.w[..k * k];
            linalg::chol_inverse(v, k, w, &mut ws.col);
            let u = &mut ws.u[..k];
            for i in 0..k {
                u[i] = (0..k).map(|j| w[i * k + j] * t.y[j]).sum();
            }
            ywy += (0..k).map(|i| u[i] * t.y[i]).sum::<f64>();
            let mut u_sum = 0.0;
            for i in 0..k {
                u_sum += u[i];
                if let Some(ci) = t.plus[i] {
                    ws.b[ci] += u[i];
                }
            }
            if let Some(m) = t.minus {
                ws.b[m] -= u_sum;
            }
            scatter(t, w, &mut ws.a, p);
        }
        let mut chol_a = ws.a.clone();
        if !linalg::cholesky_in_place(&mut chol_a, p) {
            return None;
        }
        let mut mu = ws.b.clone();
        linalg::chol_solve_in_place(&chol_a, p, &mut mu);
        let bmu: f64 = mu.iter().zip(&ws.b).map(|(m, b)| m * b).sum();
        let quad = ywy - bmu;
        let loglik = -0.5 * (logdet_v + quad + linalg::chol_logdet(&chol_a, p));
        loglik.is_finite().then_some(Evaluation { loglik, mu, chol_a })
    }

    fn unpack(&self, e: &Evaluation, ws: &mut Workspace) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.dim;
        let mut inv = vec![0.0; p * p];
        linalg::chol_inverse(&e.chol_a, p, &mut inv, &mut ws.col);
        let cov = linalg::symmetrize(&linalg::from_row_major(p, &inv));
        (DVector::from_vec(e.mu.clone()), cov)
    }

    /// Derivative of the profiled restricted log-likelihood in `τ²`.
    fn score(&self, tau2: f64, ws: &mut Workspace) -> Option<f64> {
        let e = self.evaluate(tau2, ws)?;
        let p = self.dim;
        let mut d_a = vec![0.0; p * p];
        let mut wpw = vec![0.0; self.k_max * self.k_max];
        let mut trace_wp = 0.0;
        let mut quad = 0.0;
        for t in &self.terms {
            let k = t.k;
            let v = &mut ws.v[..k * k];
            for i in 0..k {
                for j in 0..k {
                    v[i * k + j] = t.s[i * k + j] + if i == j { tau2 } else { 0.5 * tau2 };
                }
            }
            if !linalg::cholesky_in_place(v, k) {
                return None;
            }
            let w = &mut ws.w[..k * k];
            linalg::chol_inverse(v, k, w, &mut ws.col);
            // W P W with P = (I + J) / 2, so P W = (W + 1 colsum(W)) / 2.
            let colsum: Vec<f64> = (0..k).map(|j| (0..k).map(|i| w[i * k + j]).sum()).collect();
            let rowsum: Vec<f64> = (0..k).map(|i| (0..k).map(|j| w[i * k + j]).sum()).collect();
            let wpw = &mut wpw[..k * k];
            for i in 0..k {
                for j in 0..k {
                    let ww: f64 = (0..k).map(|l| w[i * k + l] * w[l * k + j]).sum();
                    wpw[i * k + j] = 0.5 * (ww + rowsum[i] * colsum[j]);
                }
                trace_wp += 0.5 * (w[i * k + i] + rowsum[i]);
            }
            scatter(t, wpw, &mut d_a, p);
            let r: Vec<f64> = (0..k)
                .map(|i| {
                    let mut fit = t.plus[i].map_or(0.0, |c| e.mu[c]);
                    if let Some(m) = t.minus {
                        fit -= e.mu[m];
                    }
                    t.y[i] - fit
                })
                .collect();
            for i in 0..k {
                for j in 0..k {
                    quad += r[i] * wpw[i * k + j] * r[j];
                }
            }
        }
        let mut a_inv = vec![0.0; p * p];
        linalg::chol_inverse(&e.chol_a, p, &mut a_inv, &mut ws.col);
        let trace_ad: f64 = a_inv.iter().zip(&d_a).map(|(x, y)| x * y).sum();
        let s = -0.5 * (trace_wp - trace_ad - quad);
        s.is_finite().then_some(s)
    }

    /// Refines an interior maximiser by locating the sign change of the
    /// score, which is far better conditioned than the flat likelihood.
    fn polish(&self, x0: f64, options: &FitOptions, ws: &mut Workspace) -> f64 {
        let Some(s0) = self.score(x0, ws) else { return x0 };
        if s0 == 0.0 {
            return x0;
        }
        let mut step = (1e3 * options.tolerance).max(1e-9 * x0);
        let (mut lo, mut hi) = (x0, x0);
        let (mut s_lo, mut s_hi) = (s0, s0);
        for _ in 0..8 {
            if s_lo > 0.0 && s_hi < 0.0 {
                break;
            }
            if s0 > 0.0 {
                hi = (x0 + step).min(options.tau2_max);
                match self.score(hi, ws) {
                    Some(s) => s_hi = s,
                    None => return x0,
                }
            } else {
                lo = (x0 - step).max(0.0);
                match self.score(lo, ws) {
                    Some(s) => s_lo = s,
                    None => return x0,
                }
            }
            step *= 4.0;
        }
        if !(s_lo > 0.0 && s_hi < 0.0) {
            return x0;
        }
        // Illinois variant of regula falsi.
        let mut side = 0;
        let mut prev = x0;
        for _ in 0..60 {
            let x = (lo * s_hi - hi * s_lo) / (s_hi - s_lo);
            if !(x > lo && x < hi) || (x - prev).abs() <= 1e-10 * x {
                break;
            }
            prev = x;
            let Some(s) = self.score(x, ws) else { break };
            if s == 0.0 {
                return x;
            }
            if s > 0.0 {
                lo = x;
                s_lo = s;
                if side == 1 {
                    s_hi *= 0.5;
                }
                side = 1;
            } else {
                hi = x;
                s_hi = s;
                if side == -1 {
                    s_lo *= 0.5;
                }
                side = -1;
            }
        }
        let x = (lo * s_hi - hi * s_lo) / (s_hi - s_lo);
        if x.is_finite() && x >= lo && x <= hi {
            x
        } else {
            0.5 * (lo + hi)
        }
    }

    fn profile_loglik(&self, tau2: f64) -> Result<f64> {
        let mut ws = self.workspace();
        self.evaluate(tau2, &mut ws).map(|e| e.loglik).ok_or(NmaError::UnderIdentified)
    }

    pub(crate) fn gls(&self, tau2: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut ws = self.workspace();
        let e = self.evaluate(tau2, &mut ws).ok_or(NmaError::UnderIdentified)?;
        Ok(self.unpack(&e, &mut ws))
    }

    pub(crate) fn estimate(&self, options: &FitOptions) -> Result<Estimate> {
        let mut ws = self.workspace();
        let degenerate = self.residual_df() <= 0;
        let (tau2, evaluations, converged) = if degenerate {
            (0.0, 0, true)
        } else {
            let opt = optimize::maximize_nonnegative(
                |t| self.evaluate(t, &mut ws).map(|e| e.loglik).unwrap_or(f64::NEG_INFINITY),
                options.tau2_max,
                options.tolerance,
                options.max_iter,
            );
            if !opt.value.is_finite() {
                return Err(NmaError::UnderIdentified);
            }
            let at_bound = opt.x >= options.tau2_max - options.tolerance;
            let x = if opt.converged && !at_bound && opt.x > 0.0 { self.polish(opt.x, options, &mut ws) } else { opt.x };
            (x, opt.evaluations, opt.converged && !at_bound)
        };
        let e = self.evaluate(tau2, &mut ws).ok_or(NmaError::UnderIdentified)?;
        let (mu, cov) = self.unpack(&e, &mut ws);
        Ok(Estimate { tau2, mu, cov, loglik: e.loglik, converged, degenerate, evaluations })
    }
}

/// Precomputed per-study pieces of the restricted likelihood over a treatment basis.
pub struct PreparedModel {
    basis: ParameterBasis,
    model: LinearModel,
}

impl PreparedModel {
    pub fn new(net: &NetworkDataset) -> Result<Self> {
        let basis = net.basis()?;
        Self::with_basis(net, basis)
    }

    pub fn with_basis(net: &NetworkDataset, basis: ParameterBasis) -> Result<Self> {
        let col = |t: TreatmentId| -> Result<Option<usize>> {
            if t == basis.reference {
                Ok(None)
            } else {
                basis.index_of(t).map(Some).ok_or_else(|| NmaError::UnknownTreatment(net.label(t).to_string()))
            }
        };
        let mut model = LinearModel::new(basis.dim());
        for s in net.studies() {
            let plus = s.contrast_arms().into_iter().map(col).collect::<Result<Vec<_>>>()?;
            model.push(&s.y, &s.s, plus, col(s.reference)?);
        }
        Ok(PreparedModel { basis, model })
    }

    pub fn basis(&self) -> &ParameterBasis {
        &self.basis
    }

    /// Number of contrasts minus number of mean parameters.
    pub fn residual_df(&self) -> isize {
        self.model.residual_df()
    }

    /// Restricted log-likelihood with `μ` profiled out.
    pub fn profile_loglik(&self, tau2: f64) -> Result<f64> {
        self.model.profile_loglik(tau2)
    }

    /// Generalised least squares mean and its covariance at fixed `τ²`.
    pub fn gls(&self, tau2: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.model.gls(tau2)
    }

    pub fn fit(&self, options: &FitOptions) -> Result<FitResult> {
        let est = self.model.estimate(options)?;
        let (i2, r_stat) = if est.tau2 == 0.0 {
            (0.0, 1.0)
        } else {
            let (_, cov_f) = self.model.gls(0.0)?;
            i_squared_from_covariances(&est.cov, &cov_f)?
        };
        Ok(FitResult {
            basis: self.basis.clone(),
            mu_hat: est.mu,
            tau2_hat: est.tau2,
            cov_mu: est.cov,
            loglik_restricted: est.loglik,
            i2,
            r_stat,
            converged: est.converged,
            degenerate: est.degenerate,
            n_used: self.model.terms.len(),
            evaluations: est.evaluations,
        })
    }
}

pub fn gls_mean(net: &NetworkDataset, tau2: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(tau2 >= 0.0) {
        return Err(NmaError::Config(format!("tau2 must be nonnegative, got {tau2}")));
    }
    PreparedModel::new(net)?.gls(tau2)
}

pub fn reml_fit(net: &NetworkDataset) -> Result<FitResult> {
    reml_fit_with(net, &FitOptions::default())
}

pub fn reml_fit_with(net: &NetworkDataset, options: &FitOptions) -> Result<FitResult> {
    PreparedModel::new(net)?.fit(options)
}

/// `R = det(V_R V_F⁻¹)^(1/2p)` and `I² = max(0, (R² - 1)/R²)`.
pub fn i_squared_from_covariances(v_random: &DMatrix<f64>, v_fixed: &DMatrix<f64>) -> Result<(f64, f64)> {
    let p = v_random.nrows();
    if p == 0 || v_random.shape() != v_fixed.shape() || !v_random.is_square() {
        return Err(NmaError::DimensionMismatch("I² needs two p x p covariance matrices".into()));
    }
    let ld = |m: &DMatrix<f64>| -> Result<f64> {
        let c = linalg::symmetrize(m)
            .cholesky()
            .ok_or_else(|| NmaError::NotPositiveDefinite("pooled covariance".into()))?;
        Ok(c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0)
    };
    let log_r = (ld(v_random)? - ld(v_fixed)?) / (2.0 * p as f64);
    let r = log_r.exp();
    let r2 = r * r;
    Ok(((r2 - 1.0) / r2).max(0.0)).map(|i2| (i2, r))
}

/// `(I², R)` for a random-effects fit against the fixed-effect fit of the same network.
pub fn i_squared(net: &NetworkDataset, fit_random: &FitResult) -> Result<(f64, f64)> {
    let model = PreparedModel::with_basis(net, fit_random.basis.clone())?;
    let (_, v_fixed) = model.gls(0.0)?;
    i_squared_from_covariances(&fit_random.cov_mu, &v_fixed)
}


#[cfg(test)]
mod fixture_tests {
    use super::*;
    use crate::ingest::{antihypertensive_records, ingest, IngestOptions};

    #[test]
    fn fixture_fit_and_rebase() {
        let opts = IngestOptions { reference: Some("Placebo".into()), augment: true };
        let net = ingest(&antihypertensive_records(), &opts).unwrap();
        let fit = reml_fit(&net).unwrap();
        assert!(fit.converged && !fit.degenerate);
        assert!((0.0985..0.0990).contains(&fit.tau()));
        assert!((0.565..0.573).contains(&fit.i2));
        let (i2, _) = i_squared(&net, &fit).unwrap();
        assert!((i2 - fit.i2).abs() < 1e-12);

        let ccb = net.treatment_by_label("CCB").unwrap();
        let (basis, m, _) = fit.rebased(ccb).unwrap();
        let (c, _) = fit.contrasts(ccb, &basis.treatments).unwrap();
        assert!((m - c).amax() < 1e-12);
    }

    #[test]
    fn score_matches_finite_difference() {
        let opts = IngestOptions { reference: Some("Placebo".into()), augment: true };
        let net = ingest(&antihypertensive_records(), &opts).unwrap();
        let model = PreparedModel::new(&net).unwrap();
        let mut ws = model.model.workspace();
        for tau2 in [0.001, 0.00975, 0.05] {
            // Near the maximum the difference quotient is dominated by rounding.
            let h = 1e-5;
            let fd = (model.profile_loglik(tau2 + h).unwrap() - model.profile_loglik(tau2 - h).unwrap()) / (2.0 * h);
            let s = model.model.score(tau2, &mut ws).unwrap();
            assert!((s - fd).abs() < 1e-4 + 1e-5 * fd.abs(), "{tau2}: {s} vs {fd}");
        }
        let fit = reml_fit(&net).unwrap();
        assert!(model.model.score(fit.tau2_hat, &mut ws).unwrap().abs() < 1e-6);
    }
}
