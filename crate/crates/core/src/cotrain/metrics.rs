use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub support: Vec<u64>,
    /// Classes that were neither present nor predicted; their F1 is 0.
    pub absent_classes: Vec<usize>,
}

impl MetricsReport {
    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate_metrics(predictions: &[usize], labels: &[usize], m: usize) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "evaluate_metrics",
            format!("{} predictions, {} labels", predictions.len(), labels.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut confusion = vec![vec![0u64; m]; m];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= m || p >= m {
            return Err(Error::invalid(format!("class {} out of range for {m} classes", y.max(p))));
        }
        confusion[y][p] += 1;
    }
    let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<u64> = (0..m).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
    let tp: Vec<u64> = (0..m).map(|i| confusion[i][i]).collect();
    let precision: Vec<f64> = (0..m).map(|i| ratio(tp[i], predicted[i])).collect();
    let recall: Vec<f64> = (0..m).map(|i| ratio(tp[i], support[i])).collect();
    let f1: Vec<f64> = (0..m)
        .map(|i| {
            let s = precision[i] + recall[i];
            if s == 0.0 {
                0.0
            } else {
                2.0 * precision[i] * recall[i] / s
            }
        })
        .collect();
    let accuracy = tp.iter().sum::<u64>() as f64 / predictions.len() as f64;
    Ok(MetricsReport {
        accuracy,
        macro_f1: f1.iter().sum::<f64>() / m as f64,
        precision,
        recall,
        f1,
        absent_classes: (0..m).filter(|&i| support[i] == 0 && predicted[i] == 0).collect(),
        confusion,
        support,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion() {
        // confusion [[2,1],[0,3]]
        let labels = [0, 0, 0, 1, 1, 1];
        let preds = [0, 0, 1, 1, 1, 1];
        let r = evaluate_metrics(&preds, &labels, 2).unwrap();
        assert_eq!(r.confusion, vec![vec![2, 1], vec![0, 3]]);
        assert!((r.accuracy - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.precision, vec![1.0, 0.75]);
        assert!((r.f1[1] - 6.0 / 7.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.828571).abs() < 1e-6);
    }

    #[test]
    fn absent_class_flagged() {
        let r = evaluate_metrics(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(r.f1[2], 0.0);
        assert_eq!(r.absent_classes, vec![2]);
        assert!(evaluate_metrics(&[0], &[3], 3).is_err());
    }
}
