//! OOD detection and calibration metrics.
//!
//! Scores are oriented so that higher means more ID-like. Every FPR95 is
//! reported with its positive class spelled out: `fpr95_id` treats the ID
//! population as positive, `fpr95_ood` the OOD population.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPopulations {
    id: Vec<f64>,
    ood: Vec<f64>,
}

impl ScoredPopulations {
    pub fn new(id: Vec<f64>, ood: Vec<f64>) -> Result<Self> {
        if id.is_empty() {
            return Err(Error::EmptyPopulation("id"));
        }
        if ood.is_empty() {
            return Err(Error::EmptyPopulation("ood"));
        }
        if id.iter().chain(&ood).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(ScoredPopulations { id, ood })
    }

    pub fn id(&self) -> &[f64] {
        &self.id
    }

    pub fn ood(&self) -> &[f64] {
        &self.ood
    }

    /// Populations as (positive, negative) with positive scores oriented
    /// upward.
    fn oriented(&self, positive: Positive) -> (Vec<f64>, Vec<f64>) {
        match positive {
            Positive::Id => (self.id.clone(), self.ood.clone()),
            Positive::Ood => (
                self.ood.iter().map(|v| -v).collect(),
                self.id.iter().map(|v| -v).collect(),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positive {
    Id,
    Ood,
}

/// Mann-Whitney statistic: `P(id > ood) + 0.5·P(id = ood)`.
pub fn auroc(p: &ScoredPopulations) -> f64 {
    let mut all: Vec<(f64, bool)> =
        p.id.iter()
            .map(|&s| (s, true))
            .chain(p.ood.iter().map(|&s| (s, false)))
            .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the pair credit, kept integral so the result is exact
    let mut credit2: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut ids, mut oods) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                ids += 1;
            } else {
                oods += 1;
            }
            j += 1;
        }
        credit2 += 2 * ids * ood_below + ids * oods;
        ood_below += oods;
        i = j;
    }
    credit2 as f64 / (2 * p.id.len() * p.ood.len()) as f64
}

/// Average precision with step-wise interpolation over every distinct
/// threshold: `Σ (R_k − R_{k−1})·P_k`.
pub fn aupr(p: &ScoredPopulations, positive: Positive) -> f64 {
    let (pos, neg) = p.oriented(positive);
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = pos.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    area
}

/// False positive rate at the first operating point whose true positive
/// rate reaches `level`.
///
/// With ID positive a sample is called positive when `score ≥ threshold`;
/// with OOD positive when `score ≤ threshold`. The threshold is the
/// `⌈level·n_pos⌉`-th most positive score, no interpolation.
pub fn fpr_at_tpr(p: &ScoredPopulations, positive: Positive, level: f64) -> Result<f64> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "TPR level must be in (0, 1], got {level}"
        )));
    }
    let (mut pos, neg) = p.oriented(positive);
    pos.sort_by(|a, b| b.total_cmp(a));
    let needed = ((level * pos.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = pos[needed.min(pos.len()) - 1];
    let false_pos = neg.iter().filter(|&&s| s >= threshold).count();
    Ok(false_pos as f64 / neg.len() as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn calibration_error(predictions: &[(f64, bool)], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if let Some(&(c, _)) = predictions.iter().find(|(c, _)| !(0.0..=1.0).contains(c)) {
        return Err(Error::InvalidArgument(format!(
            "confidence {c} outside [0, 1]"
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for &(c, ok) in predictions {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        conf[b] += c;
        hits[b] += usize::from(ok);
        counts[b] += 1;
    }
    let n = predictions.len() as f64;
    Ok((0..bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| {
            let m = counts[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf[b] / m).abs()
        })
        .sum())
}

/// Linear-interpolated empirical quantile (`h = (n−1)·q`).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyPopulation("quantile input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Shared-range histograms of both populations with the 5% ID and 95% OOD
/// quantile markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub id_counts: Vec<usize>,
    pub ood_counts: Vec<usize>,
    pub id_q05: f64,
    pub ood_q95: f64,
}

pub fn histogram_report(p: &ScoredPopulations, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let all = p.id.iter().chain(&p.ood);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let bin_of = |v: f64| -> usize {
        if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let count = |vals: &[f64]| {
        let mut c = vec![0usize; bins];
        for &v in vals {
            c[bin_of(v)] += 1;
        }
        c
    };
    Ok(Histogram {
        edges,
        id_counts: count(&p.id),
        ood_counts: count(&p.ood),
        id_q05: quantile(&p.id, 0.05)?,
        ood_q95: quantile(&p.ood, 0.95)?,
    })
}

/// Ratios of mean mutual information between groups of inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiRatios {
    /// misclassified ID / correctly classified ID
    pub false_over_true: f64,
    /// OOD / all ID
    pub ood_over_id: f64,
}

pub fn mi_ratio_report(correct: &[f64], incorrect: &[f64], ood: &[f64]) -> Result<MiRatios> {
    let mean = |v: &[f64], name: &'static str| {
        if v.is_empty() {
            Err(Error::EmptyGroup(name))
        } else {
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let c = mean(correct, "id-correct")?;
    let f = mean(incorrect, "id-incorrect")?;
    let o = mean(ood, "ood")?;
    let all_id = (c * correct.len() as f64 + f * incorrect.len() as f64)
        / (correct.len() + incorrect.len()) as f64;
    Ok(MiRatios {
        false_over_true: f / c,
        ood_over_id: o / all_id,
    })
}

/// One row of the OOD comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub dataset: String,
    pub score: String,
    pub id_accuracy: f64,
    pub fpr95_id: f64,
    pub aupr_id: f64,
    pub auroc: f64,
    pub fpr95_ood: f64,
    pub aupr_ood: f64,
    pub ece: f64,
    pub histogram: Histogram,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "dataset,score,id_acc,fpr95_id,aupr_id,auroc,fpr95_ood,aupr_ood,ece,id_q05,ood_q95";

    pub fn evaluate(
        dataset: &str,
        score: &str,
        p: &ScoredPopulations,
        id_accuracy: f64,
        ece: f64,
        bins: usize,
    ) -> Result<Self> {
        Ok(MetricReport {
            dataset: dataset.to_string(),
            score: score.to_string(),
            id_accuracy,
            fpr95_id: fpr_at_tpr(p, Positive::Id, 0.95)?,
            aupr_id: aupr(p, Positive::Id),
            auroc: auroc(p),
            fpr95_ood: fpr_at_tpr(p, Positive::Ood, 0.95)?,
            aupr_ood: aupr(p, Positive::Ood),
            ece,
            histogram: histogram_report(p, bins)?,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.score,
            self.id_accuracy,
            self.fpr95_id,
            self.aupr_id,
            self.auroc,
            self.fpr95_ood,
            self.aupr_ood,
            self.ece,
            self.histogram.id_q05,
            self.histogram.ood_q95
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} [{} score]", self.dataset, self.score)?;
        writeln!(f, "  ID accuracy     {:>8.2}%", 100.0 * self.id_accuracy)?;
        writeln!(f, "  FPR95 (ID pos)  {:>8.2}%", 100.0 * self.fpr95_id)?;
        writeln!(f, "  AUPR  (ID pos)  {:>8.2}%", 100.0 * self.aupr_id)?;
        writeln!(f, "  AUROC           {:>8.2}%", 100.0 * self.auroc)?;
        writeln!(f, "  FPR95 (OOD pos) {:>8.2}%", 100.0 * self.fpr95_ood)?;
        writeln!(f, "  AUPR  (OOD pos) {:>8.2}%", 100.0 * self.aupr_ood)?;
        writeln!(f, "  ECE             {:>8.4}", self.ece)?;
        write!(
            f,
            "  5% ID quantile {:.6}, 95% OOD quantile {:.6}",
            self.histogram.id_q05, self.histogram.ood_q95
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pops(id: &[f64], ood: &[f64]) -> ScoredPopulations {
        ScoredPopulations::new(id.to_vec(), ood.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&pops(&[2.0, 3.0], &[0.0, 1.0])), 1.0);
        assert_eq!(auroc(&pops(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])), 0.5);
        assert_eq!(auroc(&pops(&[0.0], &[1.0])), 0.0);
        assert!(matches!(
            ScoredPopulations::new(vec![], vec![1.0]),
            Err(Error::EmptyPopulation("id"))
        ));
    }

    #[test]
    fn aupr_examples() {
        let sep = pops(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(aupr(&sep, Positive::Id), 1.0);
        assert_eq!(aupr(&sep, Positive::Ood), 1.0);
        let flat = pops(&[1.0; 3], &[1.0; 7]);
        assert!((aupr(&flat, Positive::Id) - 0.3).abs() < 1e-15);
        assert!((aupr(&flat, Positive::Ood) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn fpr_examples() {
        let sep = pops(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(fpr_at_tpr(&sep, Positive::Id, 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&sep, Positive::Ood, 0.95).unwrap(), 0.0);
        let same: Vec<f64> = (1..=100).map(f64::from).collect();
        let p = pops(&same, &same);
        assert!((fpr_at_tpr(&p, Positive::Id, 0.95).unwrap() - 0.95).abs() < 0.011);
        assert!((fpr_at_tpr(&p, Positive::Ood, 0.95).unwrap() - 0.95).abs() < 0.011);
        assert!(fpr_at_tpr(&p, Positive::Id, 0.0).is_err());
    }

    #[test]
    fn fpr_on_grid_against_hand_enumeration() {
        // 95 of 100 ID scores must be >= threshold: threshold = 6
        let id: Vec<f64> = (1..=100).map(f64::from).collect();
        let p = pops(&id, &[0.5, 5.5, 50.5, 200.0]);
        assert_eq!(fpr_at_tpr(&p, Positive::Id, 0.95).unwrap(), 0.5);
        // OOD positive: need 4 of 4 OOD called positive (score <= 200), all ID cross
        assert_eq!(fpr_at_tpr(&p, Positive::Ood, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn ece_examples() {
        let half: Vec<(f64, bool)> = (0..10).map(|i| (1.0, i % 2 == 0)).collect();
        assert!((calibration_error(&half, 15).unwrap() - 0.5).abs() < 1e-15);
        // confidence 0.25 with a quarter correct and 0.75 with three quarters
        let mut cal = Vec::new();
        for i in 0..4 {
            cal.push((0.25, i == 0));
            cal.push((0.75, i != 0));
        }
        assert!(calibration_error(&cal, 10).unwrap() < 1e-15);
        assert!(calibration_error(&[(1.5, true)], 10).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = histogram_report(&pops(&[2.0; 5], &[2.0; 3]), 4).unwrap();
        assert_eq!(h.id_counts, vec![5, 0, 0, 0]);
        assert_eq!(h.ood_counts, vec![3, 0, 0, 0]);
        assert_eq!((h.id_q05, h.ood_q95), (2.0, 2.0));

        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let h = histogram_report(&pops(&grid, &[0.5]), 10).unwrap();
        assert!((h.id_q05 - 0.05).abs() < 1e-12);
        assert_eq!(h.id_counts.iter().sum::<usize>(), 101);
    }

    #[test]
    fn mi_ratio_examples() {
        let r = mi_ratio_report(&[0.2, 0.2], &[0.2], &[0.2]).unwrap();
        assert!((r.false_over_true - 1.0).abs() < 1e-15);
        assert!((r.ood_over_id - 1.0).abs() < 1e-15);
        let r = mi_ratio_report(&[0.1, 0.3], &[0.4], &[0.3]).unwrap();
        assert!((r.false_over_true - 2.0).abs() < 1e-15);
        assert!(matches!(
            mi_ratio_report(&[0.1], &[], &[0.2]),
            Err(Error::EmptyGroup("id-incorrect"))
        ));
    }
}
