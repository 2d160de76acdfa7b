//! Treatments, designs, contrast-level studies and network connectivity.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NmaError, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TreatmentId(pub usize);

impl fmt::Display for TreatmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Treatment {
    pub id: TreatmentId,
    pub label: String,
}

/// The set of treatments compared in a study. Order-insensitive by construction.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DesignKey(Vec<TreatmentId>);

impl DesignKey {
    pub fn new(arms: impl IntoIterator<Item = TreatmentId>) -> Result<Self> {
        let set: BTreeSet<TreatmentId> = arms.into_iter().collect();
        if set.len() < 2 {
            return Err(NmaError::Config("a design needs at least two distinct arms".into()));
        }
        Ok(DesignKey(set.into_iter().collect()))
    }

    pub fn arms(&self) -> &[TreatmentId] {
        &self.0
    }

    /// Lowest-id arm; used as the in-design reference.
    pub fn base(&self) -> TreatmentId {
        self.0[0]
    }

    pub fn contains(&self, t: TreatmentId) -> bool {
        self.0.binary_search(&t).is_ok()
    }

    /// Number of basis contrasts, `|arms| - 1`.
    pub fn n_contrasts(&self) -> usize {
        self.0.len() - 1
    }

    /// Alphabetically sorted labels joined by " vs ".
    pub fn label(&self, treatments: &[Treatment]) -> String {
        let mut labels: Vec<&str> = self.0.iter().map(|t| treatments[t.0].label.as_str()).collect();
        labels.sort_unstable();
        labels.join(" vs ")
    }
}

/// One study reduced to contrasts against an in-study (or pseudo) reference arm.
///
/// `y[k]` estimates `θ_{arms_k} - θ_reference` for the k-th entry of
/// [`ContrastStudy::contrast_arms`]. For augmented studies the reference is a
/// pseudo arm that is not listed in `arms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastStudy {
    pub study_id: String,
    pub arms: Vec<TreatmentId>,
    pub reference: TreatmentId,
    pub y: DVector<f64>,
    pub s: DMatrix<f64>,
    pub augmented: bool,
}

impl ContrastStudy {
    pub fn new(
        study_id: impl Into<String>,
        arms: Vec<TreatmentId>,
        reference: TreatmentId,
        y: DVector<f64>,
        s: DMatrix<f64>,
        augmented: bool,
    ) -> Result<Self> {
        let study_id = study_id.into();
        let mut sorted = arms.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() < 2 {
            return Err(NmaError::TooFewArms(study_id));
        }
        if sorted.len() != arms.len() {
            return Err(NmaError::InvalidArm { study: study_id, reason: "repeated treatment".into() });
        }
        let has_ref = sorted.contains(&reference);
        if has_ref == augmented {
            return Err(NmaError::InvalidArm {
                study: study_id,
                reason: if augmented {
                    "augmented study already contains its reference".into()
                } else {
                    "reference is not one of the study's arms".into()
                },
            });
        }
        let k = if augmented { sorted.len() } else { sorted.len() - 1 };
        if y.len() != k || s.nrows() != k || s.ncols() != k {
            return Err(NmaError::DimensionMismatch(format!(
                "study `{study_id}` expects {k} contrasts, got y={} s={}x{}",
                y.len(),
                s.nrows(),
                s.ncols()
            )));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(NmaError::InvalidArm { study: study_id, reason: "non-finite contrast".into() });
        }
        if !linalg::is_positive_definite(&s) {
            return Err(NmaError::NotPositiveDefinite(format!("within-study covariance of `{study_id}`")));
        }
        Ok(ContrastStudy { study_id, arms: sorted, reference, y, s: linalg::symmetrize(&s), augmented })
    }

    /// Arms indexed by the entries of `y`.
    pub fn contrast_arms(&self) -> Vec<TreatmentId> {
        self.arms.iter().copied().filter(|t| *t != self.reference).collect()
    }

    pub fn n_contrasts(&self) -> usize {
        self.y.len()
    }

    pub fn design(&self) -> DesignKey {
        DesignKey(self.arms.clone())
    }

    /// Re-expresses the study against one of its real arms. A pseudo reference
    /// arm, if present, is marginalised out.
    pub fn rebased(&self, new_reference: TreatmentId) -> Result<ContrastStudy> {
        if !self.arms.contains(&new_reference) {
            return Err(NmaError::InvalidArm {
                study: self.study_id.clone(),
                reason: format!("{new_reference} is not an arm of the study"),
            });
        }
        if new_reference == self.reference && !self.augmented {
            return Ok(self.clone());
        }
        let old_cols = self.contrast_arms();
        let new_rows: Vec<TreatmentId> = self.arms.iter().copied().filter(|t| *t != new_reference).collect();
        let col_of = |t: TreatmentId| old_cols.iter().position(|c| *c == t);
        let mut c = DMatrix::zeros(new_rows.len(), old_cols.len());
        let minus = col_of(new_reference);
        for (r, t) in new_rows.iter().enumerate() {
            if let Some(j) = col_of(*t) {
                c[(r, j)] += 1.0;
            }
            if let Some(j) = minus {
                c[(r, j)] -= 1.0;
            }
        }
        let y = &c * &self.y;
        let s = linalg::symmetrize(&(&c * &self.s * c.transpose()));
        Ok(ContrastStudy {
            study_id: self.study_id.clone(),
            arms: self.arms.clone(),
            reference: new_reference,
            y,
            s,
            augmented: false,
        })
    }

    /// The study against its lowest-id real arm when augmented, unchanged otherwise.
    pub fn without_pseudo_arm(&self) -> Result<ContrastStudy> {
        if self.augmented {
            self.rebased(self.arms[0])
        } else {
            Ok(self.clone())
        }
    }
}

/// Non-reference treatments that index a mean vector, in ascending id order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBasis {
    pub reference: TreatmentId,
    pub treatments: Vec<TreatmentId>,
}

impl ParameterBasis {
    pub fn new(reference: TreatmentId, set: impl IntoIterator<Item = TreatmentId>) -> Self {
        let treatments: BTreeSet<TreatmentId> = set.into_iter().filter(|t| *t != reference).collect();
        ParameterBasis { reference, treatments: treatments.into_iter().collect() }
    }

    pub fn dim(&self) -> usize {
        self.treatments.len()
    }

    pub fn index_of(&self, t: TreatmentId) -> Option<usize> {
        self.treatments.binary_search(&t).ok()
    }

    pub fn contains(&self, t: TreatmentId) -> bool {
        t == self.reference || self.index_of(t).is_some()
    }

    /// All treatments including the reference, ascending.
    pub fn all_treatments(&self) -> Vec<TreatmentId> {
        let mut v = self.treatments.clone();
        v.push(self.reference);
        v.sort_unstable();
        v
    }
}

/// Integer contrast map switching a mean vector from one reference to another.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisTransform {
    pub from_reference: TreatmentId,
    pub to_reference: TreatmentId,
    treatments: Vec<TreatmentId>,
    pub matrix: DMatrix<i32>,
}

impl BasisTransform {
    /// `treatments` is the full treatment set (including both references).
    pub fn new(treatments: &[TreatmentId], from: TreatmentId, to: TreatmentId) -> Result<Self> {
        let set: BTreeSet<TreatmentId> = treatments.iter().copied().collect();
        if !set.contains(&from) {
            return Err(NmaError::UnknownTreatment(from.to_string()));
        }
        if !set.contains(&to) {
            return Err(NmaError::UnknownTreatment(to.to_string()));
        }
        let all: Vec<TreatmentId> = set.into_iter().collect();
        let src: Vec<TreatmentId> = all.iter().copied().filter(|t| *t != from).collect();
        let dst: Vec<TreatmentId> = all.iter().copied().filter(|t| *t != to).collect();
        let p = src.len();
        let mut matrix = DMatrix::<i32>::zeros(p, p);
        let to_col = src.iter().position(|t| *t == to);
        for (r, t) in dst.iter().enumerate() {
            if let Some(c) = src.iter().position(|s| s == t) {
                matrix[(r, c)] += 1;
            }
            if let Some(c) = to_col {
                matrix[(r, c)] -= 1;
            }
        }
        Ok(BasisTransform { from_reference: from, to_reference: to, treatments: all, matrix })
    }

    pub fn inverse(&self) -> BasisTransform {
        BasisTransform::new(&self.treatments, self.to_reference, self.from_reference)
            .expect("both references belong to the treatment set")
    }

    pub fn source_basis(&self) -> ParameterBasis {
        ParameterBasis::new(self.from_reference, self.treatments.iter().copied())
    }

    pub fn target_basis(&self) -> ParameterBasis {
        ParameterBasis::new(self.to_reference, self.treatments.iter().copied())
    }

    pub fn matrix_f64(&self) -> DMatrix<f64> {
        self.matrix.map(|v| v as f64)
    }
}

/// Maps a mean vector and its covariance through `t`.
pub fn rebase(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    t: &BasisTransform,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = t.matrix.nrows();
    if mean.len() != p || cov.nrows() != p || cov.ncols() != p {
        return Err(NmaError::DimensionMismatch(format!(
            "transform is {p}-dimensional, mean has {} entries",
            mean.len()
        )));
    }
    let c = t.matrix_f64();
    let m = &c * mean;
    let v = linalg::symmetrize(&(&c * cov * c.transpose()));
    Ok((m, v))
}

/// Reachable treatments and the designs that fall outside the reachable set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub kept: BTreeSet<TreatmentId>,
    pub dropped: Vec<DesignKey>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDataset {
    treatments: Vec<Treatment>,
    studies: Vec<ContrastStudy>,
    designs: BTreeMap<DesignKey, Vec<usize>>,
    global_reference: TreatmentId,
}

/// Builds the design partition. The global reference defaults to the
/// treatment present in the most studies (ties resolve to the lowest id).
pub fn build_network(treatments: Vec<Treatment>, studies: Vec<ContrastStudy>) -> Result<NetworkDataset> {
    NetworkDataset::new(treatments, studies, None)
}

impl NetworkDataset {
    pub fn new(
        treatments: Vec<Treatment>,
        studies: Vec<ContrastStudy>,
        reference: Option<TreatmentId>,
    ) -> Result<Self> {
        if studies.is_empty() {
            return Err(NmaError::EmptyInput);
        }
        let mut labels = BTreeSet::new();
        for (i, t) in treatments.iter().enumerate() {
            if t.id.0 != i {
                return Err(NmaError::Config(format!("treatment ids must be dense; `{}` has id {}", t.label, t.id.0)));
            }
            if !labels.insert(t.label.as_str()) {
                return Err(NmaError::Config(format!("duplicate treatment label `{}`", t.label)));
            }
        }
        let mut ids = BTreeSet::new();
        let mut designs: BTreeMap<DesignKey, Vec<usize>> = BTreeMap::new();
        let mut counts = vec![0usize; treatments.len()];
        for (i, s) in studies.iter().enumerate() {
            if !ids.insert(s.study_id.as_str()) {
                return Err(NmaError::DuplicateStudy(s.study_id.clone()));
            }
            if s.arms.len() < 2 {
                return Err(NmaError::TooFewArms(s.study_id.clone()));
            }
            for a in s.arms.iter().chain(std::iter::once(&s.reference)) {
                if a.0 >= treatments.len() {
                    return Err(NmaError::UnknownTreatment(a.to_string()));
                }
            }
            for a in &s.arms {
                counts[a.0] += 1;
            }
            designs.entry(s.design()).or_default().push(i);
        }
        let global_reference = match reference {
            Some(r) if r.0 < treatments.len() => r,
            Some(r) => return Err(NmaError::UnknownTreatment(r.to_string())),
            None => {
                let best = counts.iter().copied().max().unwrap_or(0);
                TreatmentId(counts.iter().position(|c| *c == best).unwrap_or(0))
            }
        };
        Ok(NetworkDataset { treatments, studies, designs, global_reference })
    }

    pub fn treatments(&self) -> &[Treatment] {
        &self.treatments
    }

    pub fn studies(&self) -> &[ContrastStudy] {
        &self.studies
    }

    pub fn designs(&self) -> &BTreeMap<DesignKey, Vec<usize>> {
        &self.designs
    }

    pub fn design_keys(&self) -> Vec<DesignKey> {
        self.designs.keys().cloned().collect()
    }

    pub fn global_reference(&self) -> TreatmentId {
        self.global_reference
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    pub fn n_designs(&self) -> usize {
        self.designs.len()
    }

    pub fn with_reference(&self, reference: TreatmentId) -> Result<NetworkDataset> {
        NetworkDataset::new(self.treatments.clone(), self.studies.clone(), Some(reference))
    }

    pub fn label(&self, t: TreatmentId) -> &str {
        &self.treatments[t.0].label
    }

    pub fn treatment_by_label(&self, label: &str) -> Result<TreatmentId> {
        self.treatments
            .iter()
            .find(|t| t.label == label)
            .map(|t| t.id)
            .ok_or_else(|| NmaError::UnknownTreatment(label.to_string()))
    }

    pub fn design_label(&self, d: &DesignKey) -> String {
        d.label(&self.treatments)
    }

    /// Parses labels such as `"ARB vs CT"` (arm order irrelevant).
    pub fn design_by_label(&self, label: &str) -> Result<DesignKey> {
        let arms = label
            .split(" vs ")
            .map(|s| self.treatment_by_label(s.trim()))
            .collect::<Result<Vec<_>>>()?;
        let key = DesignKey::new(arms).map_err(|_| NmaError::UnknownDesign(label.to_string()))?;
        if self.designs.contains_key(&key) {
            Ok(key)
        } else {
            Err(NmaError::UnknownDesign(label.to_string()))
        }
    }

    pub fn study_indices(&self, d: &DesignKey) -> &[usize] {
        self.designs.get(d).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Keeps the studies selected by `keep`, preserving order, reference and
    /// treatment dictionary.
    pub fn subset(&self, keep: impl Fn(usize, &ContrastStudy) -> bool) -> Result<NetworkDataset> {
        let studies: Vec<ContrastStudy> = self
            .studies
            .iter()
            .enumerate()
            .filter(|(i, s)| keep(*i, s))
            .map(|(_, s)| s.clone())
            .collect();
        NetworkDataset::new(self.treatments.clone(), studies, Some(self.global_reference))
    }

    pub fn without_designs(&self, excluded: &[DesignKey]) -> Result<NetworkDataset> {
        let excluded: BTreeSet<&DesignKey> = excluded.iter().collect();
        self.subset(|_, s| !excluded.contains(&s.design()))
    }

    /// Replaces every study's contrasts while keeping its arms, reference and
    /// covariance. Used to build bootstrap and simulated replicates.
    pub fn with_contrasts(&self, ys: Vec<DVector<f64>>) -> Result<NetworkDataset> {
        if ys.len() != self.studies.len() {
            return Err(NmaError::DimensionMismatch("one contrast vector per study".into()));
        }
        let mut out = self.clone();
        for (s, y) in out.studies.iter_mut().zip(ys) {
            if y.len() != s.y.len() {
                return Err(NmaError::DimensionMismatch(format!("study `{}`", s.study_id)));
            }
            s.y = y;
        }
        Ok(out)
    }

    /// Converts every study to real-arm contrasts against `reference` when it
    /// is an arm, else against the study's lowest-id arm.
    pub fn in_study_form(&self, reference: TreatmentId) -> Result<NetworkDataset> {
        let studies = self
            .studies
            .iter()
            .map(|s| if s.arms.contains(&reference) { s.rebased(reference) } else { s.without_pseudo_arm() })
            .collect::<Result<Vec<_>>>()?;
        NetworkDataset::new(self.treatments.clone(), studies, Some(reference))
    }

    /// Treatments reachable from the global reference through shared-arm
    /// edges once `exclude` is removed.
    pub fn connected_component(&self, exclude: Option<&DesignKey>) -> Result<Component> {
        let n = self.treatments.len();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        let mut ref_seen = false;
        for d in self.designs.keys() {
            if Some(d) == exclude {
                continue;
            }
            for a in d.arms() {
                if *a == self.global_reference {
                    ref_seen = true;
                }
                for b in d.arms() {
                    if a != b {
                        adj[a.0].insert(b.0);
                    }
                }
            }
        }
        if !ref_seen {
            return Err(NmaError::ReferenceDisconnected);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.global_reference.0]);
        seen[self.global_reference.0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        let kept: BTreeSet<TreatmentId> = (0..n).filter(|i| seen[*i]).map(TreatmentId).collect();
        let dropped = self
            .designs
            .keys()
            .filter(|d| Some(*d) != exclude)
            .filter(|d| d.arms().iter().any(|a| !kept.contains(a)))
            .cloned()
            .collect();
        Ok(Component { kept, dropped })
    }

    /// Parameter basis of a connected network; fails when some design cannot
    /// reach the reference.
    pub fn basis(&self) -> Result<ParameterBasis> {
        let comp = self.connected_component(None)?;
        if !comp.dropped.is_empty() {
            let names: Vec<String> = comp.dropped.iter().map(|d| self.design_label(d)).collect();
            return Err(NmaError::Disconnected(names.join(", ")));
        }
        let mut present: BTreeSet<TreatmentId> = BTreeSet::new();
        for s in &self.studies {
            present.extend(s.arms.iter().copied());
            present.insert(s.reference);
        }
        Ok(ParameterBasis::new(self.global_reference, present))
    }
}
