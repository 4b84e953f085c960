use crate::error::{Error, Result};
use crate::graph::IGNORE_LABEL;

/// `counts[i][j]`: pixels of true class `i` predicted as class `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape {
                op: "confusion matrix",
                left: vec![classes, classes],
                right: rows.iter().map(Vec::len).collect(),
            });
        }
        Ok(Self {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// `t_i = Σ_j n_ij`
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts
            .chunks(self.classes.max(1))
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: u8, predicted: u8) -> Result<()> {
        if truth == IGNORE_LABEL {
            return Ok(());
        }
        for l in [truth, predicted] {
            if l as usize >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth as usize * self.classes + predicted as usize] += 1;
        Ok(())
    }

    /// Counts every pixel whose true label is not ignored.
    pub fn accumulate(&mut self, truth: &[u8], predicted: &[u8]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape {
                op: "confusion accumulate",
                left: vec![truth.len()],
                right: vec![predicted.len()],
            });
        }
        truth.iter().zip(predicted).try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape {
                op: "confusion merge",
                left: vec![self.classes],
                right: vec![other.classes],
            });
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Accuracy `n_ii / t_i` for every class present in the ground truth.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(i, &t)| (t > 0).then(|| self.count(i, i) as f64 / t as f64))
            .collect()
    }

    /// `(PA, CA)`: pixel accuracy `Σ n_ii / Σ t_i` and the mean of per-class
    /// accuracies over the classes that occur in the ground truth.
    pub fn metrics(&self) -> Result<(f64, f64)> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyConfusion);
        }
        let correct: u64 = (0..self.classes).map(|i| self.count(i, i)).sum();
        let present: Vec<f64> = self.per_class_accuracy().into_iter().flatten().collect();
        let ca = present.iter().sum::<f64>() / present.len() as f64;
        Ok((correct as f64 / total as f64, ca))
    }
}
