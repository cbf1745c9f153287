//! Classification metrics: overall accuracy, average per-class accuracy and
//! Cohen's kappa from a confusion matrix (rows are true classes).

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// Row-major counts, `counts[true * classes + predicted]`.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return input("confusion matrix must be square");
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return input("label and prediction counts differ");
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return input(format!("class index out of range for {classes} classes"));
            }
            m.counts[t * classes + p] += 1;
        }
        Ok(m)
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in 0..self.classes {
            s.push_str(&format!(",{}", c + 1));
        }
        s.push('\n');
        for t in 0..self.classes {
            s.push_str(&(t + 1).to_string());
            for p in 0..self.classes {
                s.push_str(&format!(",{}", self.get(t, p)));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let k = confusion.classes;
        let n = confusion.total();
        if n == 0 {
            return input("cannot compute metrics on an empty set");
        }
        let nf = n as f64;
        let trace: u64 = (0..k).map(|c| confusion.get(c, c)).sum();
        let oa = trace as f64 / nf;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|t| {
                let support: u64 = (0..k).map(|p| confusion.get(t, p)).sum();
                (support > 0).then(|| confusion.get(t, t) as f64 / support as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let aa = present.iter().sum::<f64>() / present.len() as f64;
        let pe: f64 = (0..k)
            .map(|c| {
                let row: u64 = (0..k).map(|p| confusion.get(c, p)).sum();
                let col: u64 = (0..k).map(|t| confusion.get(t, c)).sum();
                (row as f64 / nf) * (col as f64 / nf)
            })
            .sum();
        let kappa = if (1.0 - pe).abs() < 1e-15 {
            if trace == n {
                1.0
            } else {
                0.0
            }
        } else {
            (oa - pe) / (1.0 - pe)
        };
        Ok(Self {
            oa,
            aa,
            kappa,
            per_class,
            confusion,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return input("cannot compute metrics on an empty set");
        }
        Self::from_confusion(ConfusionMatrix::from_predictions(truth, predicted, classes)?)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_case() {
        let m = Metrics::from_confusion(ConfusionMatrix::from_rows(&[vec![50, 10], vec![5, 35]]).unwrap()).unwrap();
        assert!((m.oa - 0.85).abs() < 1e-12);
        assert!((m.aa - (50.0 / 60.0 + 35.0 / 40.0) / 2.0).abs() < 1e-12);
        assert!((m.kappa - 0.34 / 0.49).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_chance() {
        let m = Metrics::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
        let m = Metrics::from_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(m.kappa, 0.0);
        // single-class perfect agreement: p_e = 1
        let m = Metrics::from_predictions(&[1, 1], &[1, 1], 2).unwrap();
        assert_eq!(m.kappa, 1.0);
    }

    #[test]
    fn aa_skips_classes_without_support() {
        let m = Metrics::from_predictions(&[0, 0, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m.per_class[1], None);
        assert!((m.aa - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_set_is_an_input_error() {
        assert_eq!(Metrics::from_predictions(&[], &[], 2).unwrap_err().kind(), "input");
    }

    #[test]
    fn csv_layout() {
        let c = ConfusionMatrix::from_rows(&[vec![1, 2], vec![3, 4]]).unwrap();
        assert_eq!(c.to_csv(), "true\\pred,1,2\n1,1,2\n2,3,4\n");
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
