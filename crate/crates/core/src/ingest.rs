//! Arm-level binary outcomes to log-odds-ratio contrasts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NmaError, Result};
use crate::network::{ContrastStudy, NetworkDataset, Treatment, TreatmentId};

/// Events and sample size of the reference arm added to studies lacking it.
pub const PSEUDO_EVENTS: f64 = 0.001;
pub const PSEUDO_TOTAL: f64 = 0.01;
pub const CONTINUITY_CORRECTION: f64 = 0.5;

const ANTIHYPERTENSIVE_CSV: &str = include_str!("../fixtures/antihypertensive.csv");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub study_id: String,
    pub treatment: String,
    pub events: u64,
    pub total: u64,
}

impl ArmRecord {
    pub fn new(study_id: impl Into<String>, treatment: impl Into<String>, events: u64, total: u64) -> Self {
        ArmRecord { study_id: study_id.into(), treatment: treatment.into(), events, total }
    }

    fn validate(&self) -> Result<()> {
        if self.total == 0 || self.events > self.total {
            return Err(NmaError::InvalidArm {
                study: self.study_id.clone(),
                reason: format!("{} has {} events out of {}", self.treatment, self.events, self.total),
            });
        }
        Ok(())
    }
}

/// Reads `study_id,treatment,events,total` rows.
pub fn read_arm_records<R: Read>(reader: R) -> Result<Vec<ArmRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["study_id", "treatment", "events", "total"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(NmaError::Parse(format!("expected header `{}`", expected.join(","))));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: ArmRecord = row?;
        rec.validate()?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(NmaError::Parse("no data rows".into()));
    }
    Ok(out)
}

pub fn read_arm_records_path(path: impl AsRef<Path>) -> Result<Vec<ArmRecord>> {
    let f = std::fs::File::open(path)?;
    read_arm_records(f)
}

/// The 26-study heart-failure network bundled with the crate.
pub fn antihypertensive_records() -> Vec<ArmRecord> {
    read_arm_records(ANTIHYPERTENSIVE_CSV.as_bytes()).expect("bundled fixture parses")
}

pub fn antihypertensive_csv() -> &'static str {
    ANTIHYPERTENSIVE_CSV
}

struct Cell {
    treatment: TreatmentId,
    events: f64,
    non_events: f64,
}

impl Cell {
    fn log_odds(&self) -> f64 {
        (self.events / self.non_events).ln()
    }

    fn variance(&self) -> f64 {
        1.0 / self.events + 1.0 / self.non_events
    }
}

/// Converts one study's arms to log-odds ratios against `reference`.
///
/// Any zero cell triggers a 0.5 correction on every real cell of the study.
/// With `augment`, a study lacking the reference receives a pseudo reference
/// arm carrying [`PSEUDO_EVENTS`] events in [`PSEUDO_TOTAL`] patients.
pub fn arms_to_contrasts(
    arms: &[ArmRecord],
    reference: &str,
    augment: bool,
    treatments: &[Treatment],
) -> Result<ContrastStudy> {
    let study_id = arms.first().map(|a| a.study_id.clone()).ok_or(NmaError::EmptyInput)?;
    if arms.len() < 2 {
        return Err(NmaError::TooFewArms(study_id));
    }
    let lookup = |label: &str| {
        treatments
            .iter()
            .find(|t| t.label == label)
            .map(|t| t.id)
            .ok_or_else(|| NmaError::UnknownTreatment(label.to_string()))
    };
    let reference_id = lookup(reference)?;
    let mut seen = BTreeSet::new();
    for a in arms {
        a.validate()?;
        if a.study_id != study_id {
            return Err(NmaError::InvalidArm { study: study_id, reason: "mixed study ids".into() });
        }
        if !seen.insert(a.treatment.as_str()) {
            return Err(NmaError::InvalidArm { study: study_id, reason: format!("{} listed twice", a.treatment) });
        }
    }
    let correct = arms.iter().any(|a| a.events == 0 || a.events == a.total);
    let shift = if correct { CONTINUITY_CORRECTION } else { 0.0 };
    let mut cells = arms
        .iter()
        .map(|a| {
            Ok(Cell {
                treatment: lookup(&a.treatment)?,
                events: a.events as f64 + shift,
                non_events: (a.total - a.events) as f64 + shift,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    cells.sort_by_key(|c| c.treatment);

    let (ref_cell, augmented) = match cells.iter().position(|c| c.treatment == reference_id) {
        Some(i) => (cells.remove(i), false),
        None if augment => (
            Cell { treatment: reference_id, events: PSEUDO_EVENTS, non_events: PSEUDO_TOTAL - PSEUDO_EVENTS },
            true,
        ),
        None => return Err(NmaError::MissingReference { study: study_id, reference: reference.to_string() }),
    };

    let k = cells.len();
    let ref_lo = ref_cell.log_odds();
    let ref_var = ref_cell.variance();
    let y = DVector::from_iterator(k, cells.iter().map(|c| c.log_odds() - ref_lo));
    let s = DMatrix::from_fn(k, k, |i, j| if i == j { ref_var + cells[i].variance() } else { ref_var });
    let mut arm_ids: Vec<TreatmentId> = cells.iter().map(|c| c.treatment).collect();
    if !augmented {
        arm_ids.push(reference_id);
    }
    ContrastStudy::new(study_id, arm_ids, reference_id, y, s, augmented)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Global reference label; defaults to the treatment in the most studies.
    pub reference: Option<String>,
    /// Add pseudo reference arms; otherwise studies lacking the reference use
    /// their alphabetically first arm.
    pub augment: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { reference: None, augment: true }
    }
}

/// Groups arm rows into studies (first-appearance order) and builds the network.
pub fn ingest(records: &[ArmRecord], options: &IngestOptions) -> Result<NetworkDataset> {
    if records.is_empty() {
        return Err(NmaError::EmptyInput);
    }
    let labels: BTreeSet<&str> = records.iter().map(|r| r.treatment.as_str()).collect();
    let treatments: Vec<Treatment> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| Treatment { id: TreatmentId(i), label: l.to_string() })
        .collect();

    let mut order: Vec<&str> = Vec::new();
    let mut grouped: BTreeMap<&str, Vec<ArmRecord>> = BTreeMap::new();
    for r in records {
        let entry = grouped.entry(r.study_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(r.study_id.as_str());
        }
        entry.push(r.clone());
    }

    let reference = match &options.reference {
        Some(label) => {
            if !labels.contains(label.as_str()) {
                return Err(NmaError::UnknownTreatment(label.clone()));
            }
            label.clone()
        }
        None => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for arms in grouped.values() {
                for a in arms {
                    *counts.entry(a.treatment.as_str()).or_default() += 1;
                }
            }
            let best = counts.values().copied().max().unwrap_or(0);
            counts.iter().find(|(_, c)| **c == best).map(|(l, _)| l.to_string()).unwrap_or_default()
        }
    };

    let mut studies = Vec::with_capacity(order.len());
    for id in order {
        let arms = &grouped[id];
        let has_ref = arms.iter().any(|a| a.treatment == reference);
        let study_ref = if has_ref || options.augment {
            reference.clone()
        } else {
            arms.iter().map(|a| a.treatment.clone()).min().unwrap_or_default()
        };
        studies.push(arms_to_contrasts(arms, &study_ref, options.augment, &treatments)?);
    }
    let ref_id = treatments.iter().find(|t| t.label == reference).map(|t| t.id);
    NetworkDataset::new(treatments, studies, ref_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dict(labels: &[&str]) -> Vec<Treatment> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| Treatment { id: TreatmentId(i), label: l.to_string() })
            .collect()
    }

    #[test]
    fn hyvet_contrast() {
        let t = dict(&["DD", "Placebo"]);
        let arms = [ArmRecord::new("HYVET", "DD", 22, 1933), ArmRecord::new("HYVET", "Placebo", 57, 1912)];
        let s = arms_to_contrasts(&arms, "DD", false, &t).unwrap();
        assert_relative_eq!(s.y[0], 0.9817, epsilon = 1e-4);
        assert_relative_eq!(s.s[(0, 0)], 0.06406, epsilon = 5e-6);
        assert!(!s.augmented);
    }

    #[test]
    fn identical_arms_give_zero() {
        let t = dict(&["A", "B"]);
        let arms = [ArmRecord::new("s", "A", 10, 100), ArmRecord::new("s", "B", 10, 100)];
        let s = arms_to_contrasts(&arms, "A", false, &t).unwrap();
        assert_eq!(s.y[0], 0.0);
    }

    #[test]
    fn stop2_shared_arm_covariance() {
        let t = dict(&["ACE", "CCB", "CT"]);
        let arms = [
            ArmRecord::new("STOP-2", "ACE", 149, 2205),
            ArmRecord::new("STOP-2", "CCB", 186, 2196),
            ArmRecord::new("STOP-2", "CT", 177, 2213),
        ];
        let s = arms_to_contrasts(&arms, "ACE", false, &t).unwrap();
        let ace = 1.0 / 149.0 + 1.0 / 2056.0;
        assert_relative_eq!(s.s[(0, 1)], ace, epsilon = 1e-15);
        assert_relative_eq!(s.s[(1, 0)], ace, epsilon = 1e-15);
        assert_relative_eq!(s.s[(0, 0)], ace + 1.0 / 186.0 + 1.0 / 2010.0, epsilon = 1e-15);
        assert_relative_eq!(s.s[(1, 1)], ace + 1.0 / 177.0 + 1.0 / 2036.0, epsilon = 1e-15);
        let lo = |d: f64, n: f64| (d / (n - d)).ln();
        assert_relative_eq!(s.y[0], lo(186.0, 2196.0) - lo(149.0, 2205.0), epsilon = 1e-14);
        assert_eq!(s.contrast_arms(), vec![TreatmentId(1), TreatmentId(2)]);
    }

    #[test]
    fn zero_cell_correction_is_all_or_nothing() {
        let t = dict(&["CCB", "DD"]);
        let arms = [ArmRecord::new("VHAS", "CCB", 2, 707), ArmRecord::new("VHAS", "DD", 0, 707)];
        let s = arms_to_contrasts(&arms, "CCB", false, &t).unwrap();
        let expected = (0.5f64 / 707.5).ln() - (2.5f64 / 705.5).ln();
        assert_relative_eq!(s.y[0], expected, epsilon = 1e-14);
        let var = 1.0 / 2.5 + 1.0 / 705.5 + 1.0 / 0.5 + 1.0 / 707.5;
        assert_relative_eq!(s.s[(0, 0)], var, epsilon = 1e-14);
    }

    #[test]
    fn augmentation_adds_pseudo_reference() {
        let t = dict(&["ARB", "CT", "Placebo"]);
        let arms = [ArmRecord::new("E-COST", "ARB", 35, 1053), ArmRecord::new("E-COST", "CT", 41, 995)];
        let s = arms_to_contrasts(&arms, "Placebo", true, &t).unwrap();
        assert!(s.augmented);
        assert_eq!(s.n_contrasts(), 2);
        let pseudo = 1.0 / 0.001 + 1.0 / 0.009;
        assert_relative_eq!(s.s[(0, 1)], pseudo, epsilon = 1e-9);
        // the pseudo arm drops out when rebased onto a real arm
        let real = s.rebased(TreatmentId(0)).unwrap();
        let direct = arms_to_contrasts(&arms, "ARB", false, &t).unwrap();
        assert_relative_eq!(real.y[0], direct.y[0], epsilon = 1e-12);
        assert_relative_eq!(real.s[(0, 0)], direct.s[(0, 0)], epsilon = 1e-9);

        assert!(matches!(
            arms_to_contrasts(&arms, "Placebo", false, &t),
            Err(NmaError::MissingReference { .. })
        ));
    }

    #[test]
    fn rejects_single_arm_and_bad_counts() {
        let t = dict(&["A", "B"]);
        assert!(matches!(
            arms_to_contrasts(&[ArmRecord::new("s", "A", 1, 10)], "A", false, &t),
            Err(NmaError::TooFewArms(_))
        ));
        let bad = [ArmRecord::new("s", "A", 11, 10), ArmRecord::new("s", "B", 1, 10)];
        assert!(arms_to_contrasts(&bad, "A", false, &t).is_err());
    }

    #[test]
    fn reference_swap_negates_two_arm_contrast() {
        let t = dict(&["A", "B"]);
        let arms = [ArmRecord::new("s", "A", 13, 200), ArmRecord::new("s", "B", 27, 190)];
        let ab = arms_to_contrasts(&arms, "A", false, &t).unwrap();
        let ba = arms_to_contrasts(&arms, "B", false, &t).unwrap();
        assert_relative_eq!(ab.y[0], -ba.y[0], epsilon = 1e-15);
        assert_relative_eq!(ab.s[(0, 0)], ba.s[(0, 0)], epsilon = 1e-15);
    }

    #[test]
    fn default_reference_is_most_frequent_label() {
        let net = ingest(&antihypertensive_records(), &IngestOptions::default()).unwrap();
        // CCB appears in 14 of the 26 studies
        assert_eq!(net.label(net.global_reference()), "CCB");
    }

    #[test]
    fn csv_parsing() {
        let good = "study_id,treatment,events,total\ns1,A,1,10\ns1,B,2,10\n";
        assert_eq!(read_arm_records(good.as_bytes()).unwrap().len(), 2);
        assert!(read_arm_records("".as_bytes()).is_err());
        assert!(read_arm_records("a,b\n1,2\n".as_bytes()).is_err());
        assert!(read_arm_records("study_id,treatment,events,total\ns1,A,x,10\n".as_bytes()).is_err());
    }

    #[test]
    fn fixture_ingests_with_placebo_reference() {
        let opts = IngestOptions { reference: Some("Placebo".into()), augment: true };
        let net = ingest(&antihypertensive_records(), &opts).unwrap();
        assert_eq!(net.n_studies(), 26);
        assert_eq!(net.label(net.global_reference()), "Placebo");
        assert_eq!(net.studies().iter().filter(|s| s.augmented).count(), 19);
        for s in net.studies() {
            assert!(s.s.clone().cholesky().is_some(), "{}", s.study_id);
        }
    }
}
