use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: Real,
    /// Macro averages over all classes; classes without support or without
    /// predictions contribute 0.
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    /// Per-class recall.
    pub class_accuracy: Vec<Real>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> Real {
    if den == 0 {
        0.0
    } else {
        num as Real / den as Real
    }
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Contract("metrics of an empty prediction set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!("class {bad} out of range for {num_classes}")));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut precision = Vec::with_capacity(num_classes);
    let mut recall = Vec::with_capacity(num_classes);
    let mut f1 = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let predicted: usize = (0..num_classes).map(|r| confusion[r][c]).sum();
        let support: usize = confusion[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, support);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    let macro_avg = |v: &[Real]| v.iter().sum::<Real>() / num_classes as Real;
    Ok(MetricsReport {
        accuracy: ratio(correct, predictions.len()),
        precision: macro_avg(&precision),
        recall: macro_avg(&recall),
        f1: macro_avg(&f1),
        class_accuracy: recall,
        confusion,
    })
}

impl MetricsReport {
    /// Named scalar metrics in a fixed order: accuracy, precision, recall,
    /// f1, then `class_acc_<i>`.
    pub fn named(&self) -> Vec<(String, Real)> {
        let mut v = vec![
            ("accuracy".to_string(), self.accuracy),
            ("precision".to_string(), self.precision),
            ("recall".to_string(), self.recall),
            ("f1".to_string(), self.f1),
        ];
        for (i, &a) in self.class_accuracy.iter().enumerate() {
            v.push((format!("class_acc_{i}"), a));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldSummary {
    pub reports: Vec<MetricsReport>,
    /// (metric name, mean, sample std) in [`MetricsReport::named`] order.
    pub stats: Vec<(String, Real, Real)>,
}

impl FoldSummary {
    pub fn get(&self, metric: &str) -> Option<(Real, Real)> {
        self.stats
            .iter()
            .find(|(n, _, _)| n == metric)
            .map(|&(_, m, s)| (m, s))
    }
}

/// Mean and sample (n−1) standard deviation of a sequence; std is 0 for a
/// single value.
pub fn mean_std(values: &[Real]) -> (Real, Real) {
    let n = values.len() as Real;
    let mean = values.iter().sum::<Real>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("aggregate of zero folds".into()))?;
    let names = first.named();
    let per_fold: Vec<Vec<(String, Real)>> = reports.iter().map(MetricsReport::named).collect();
    if per_fold.iter().any(|r| r.len() != names.len()) {
        return Err(Error::Contract("fold reports disagree on class count".into()));
    }
    let stats = names
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let vals: Vec<Real> = per_fold.iter().map(|r| r[i].1).collect();
            let (m, s) = mean_std(&vals);
            (name.clone(), m, s)
        })
        .collect();
    Ok(FoldSummary {
        reports: reports.to_vec(),
        stats,
    })
}

/// CSV with one row per fold and trailing `mean` and `std` rows.
pub fn folds_csv(summary: &FoldSummary) -> String {
    let mut out = String::from("fold");
    for (name, _, _) in &summary.stats {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, r) in summary.reports.iter().enumerate() {
        out.push_str(&i.to_string());
        for (_, v) in r.named() {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        out.push_str(label);
        for &(_, m, s) in &summary.stats {
            let _ = write!(out, ",{:.6}", if pick == 0 { m } else { s });
        }
        out.push('\n');
    }
    out
}

/// One-line-per-metric `name  mean ± std` table.
pub fn summary_table(summary: &FoldSummary) -> String {
    let mut out = String::new();
    for (name, m, s) in &summary.stats {
        let _ = writeln!(out, "{name:<12} {m:.4} ± {s:.4}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_rejected() {
        assert!(compute_metrics(&[], &[], 2).is_err());
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn single_fold_std_zero() {
        let r = compute_metrics(&[0, 1], &[0, 0], 2).unwrap();
        let s = aggregate_folds(&[r]).unwrap();
        assert_eq!(s.get("accuracy"), Some((0.5, 0.0)));
    }
}
