use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::QaRecord;
use crate::error::{Error, Result};
use crate::seed::component_rng;
use crate::severity::SeverityLabel;

/// Nested training subsets: mild, mild + moderate, everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePartition {
    pub d1: BTreeSet<u64>,
    pub d2: BTreeSet<u64>,
    pub d3: BTreeSet<u64>,
}

impl StagePartition {
    /// Ids trained on at 1-based stage `k`.
    pub fn stage(&self, k: usize) -> &BTreeSet<u64> {
        match k {
            1 => &self.d1,
            2 => &self.d2,
            3 => &self.d3,
            _ => panic!("curriculum stages are numbered 1..=3, got {k}"),
        }
    }

    pub fn is_nested(&self) -> bool {
        self.d1.is_subset(&self.d2) && self.d2.is_subset(&self.d3)
    }
}

pub fn stage_split(records: &[QaRecord]) -> Result<StagePartition> {
    let mut p = StagePartition::default();
    for r in records {
        let label = r.severity.ok_or(Error::MissingLabel(r.id))?;
        if label <= SeverityLabel::Mild {
            p.d1.insert(r.id);
        }
        if label <= SeverityLabel::Moderate {
            p.d2.insert(r.id);
        }
        p.d3.insert(r.id);
    }
    Ok(p)
}

/// Stratified split: per severity stratum (unlabeled records form their own),
/// shuffle with the seeded stream and put `floor(n * train_fraction)` records
/// in train. Strata with fewer than two records go to train entirely.
/// Both halves keep the input order.
pub fn train_eval_split(
    records: &[QaRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<QaRecord>, Vec<QaRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let mut rng = component_rng(seed, "train-eval-split");
    let strata: [Option<SeverityLabel>; 4] = [
        Some(SeverityLabel::Mild),
        Some(SeverityLabel::Moderate),
        Some(SeverityLabel::Critical),
        None,
    ];
    let mut in_train = vec![false; records.len()];
    for stratum in strata {
        let mut members: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.severity == stratum)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            let name = stratum.map_or("unlabeled", SeverityLabel::as_str);
            log::warn!("stratum {name} has {} record(s); all placed in train", members.len());
            for i in members {
                in_train[i] = true;
            }
            continue;
        }
        members.shuffle(&mut rng);
        let n_train = (members.len() as f64 * train_fraction).floor() as usize;
        for &i in &members[..n_train] {
            in_train[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (r, t) in records.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            eval.push(r.clone());
        }
    }
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(mild: usize, moderate: usize, critical: usize) -> Vec<QaRecord> {
        let mut out = Vec::new();
        for (label, n) in [
            (SeverityLabel::Mild, mild),
            (SeverityLabel::Moderate, moderate),
            (SeverityLabel::Critical, critical),
        ] {
            for _ in 0..n {
                let id = out.len() as u64;
                out.push(QaRecord::new(id, "q", "a").with_severity(label));
            }
        }
        out
    }

    #[test]
    fn nested_sizes() {
        let p = stage_split(&corpus(5, 3, 2)).unwrap();
        assert_eq!((p.d1.len(), p.d2.len(), p.d3.len()), (5, 8, 10));
        assert!(p.is_nested());
    }

    #[test]
    fn all_mild_degenerates() {
        let p = stage_split(&corpus(4, 0, 0)).unwrap();
        assert_eq!(p.d1, p.d2);
        assert_eq!(p.d2, p.d3);
    }

    #[test]
    fn unlabeled_is_an_error() {
        let mut recs = corpus(1, 1, 0);
        recs[1].severity = None;
        assert!(matches!(stage_split(&recs), Err(Error::MissingLabel(1))));
    }

    #[test]
    fn exact_stratified_counts() {
        let recs = corpus(10, 10, 10);
        let (train, eval) = train_eval_split(&recs, 0.8, 3).unwrap();
        for label in SeverityLabel::ALL {
            assert_eq!(train.iter().filter(|r| r.severity == Some(label)).count(), 8);
            assert_eq!(eval.iter().filter(|r| r.severity == Some(label)).count(), 2);
        }
    }

    #[test]
    fn split_is_seeded() {
        let recs = corpus(20, 7, 5);
        let a = train_eval_split(&recs, 0.7, 11).unwrap();
        let b = train_eval_split(&recs, 0.7, 11).unwrap();
        assert_eq!(a, b);
        let c = train_eval_split(&recs, 0.7, 12).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn tiny_tier_goes_to_train() {
        let recs = corpus(10, 1, 0);
        let (train, eval) = train_eval_split(&recs, 0.5, 0).unwrap();
        assert!(train.iter().any(|r| r.severity == Some(SeverityLabel::Moderate)));
        assert_eq!(eval.len(), 5);
    }

    #[test]
    fn fraction_bounds_checked() {
        assert!(train_eval_split(&[], 1.0, 0).is_err());
        assert!(train_eval_split(&[], 0.0, 0).is_err());
    }
}
