//! Evaluation metrics: RMSE for the simulation study, weighted and
//! unweighted accuracy for emotion classification.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label out of range: {0}")]
    LabelRange(String),
}

/// Root mean squared error between predictions and targets.
pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    if preds.len() != targets.len() {
        return Err(MetricError::LengthMismatch(preds.len(), targets.len()));
    }
    let ss: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(libm::sqrt(ss / preds.len() as f64))
}

/// Confusion counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Result<Self, MetricError> {
        if n_classes == 0 {
            return Err(MetricError::Empty);
        }
        Ok(Self {
            counts: vec![vec![0; n_classes]; n_classes],
        })
    }

    /// Builds counts from paired label sequences.
    pub fn from_pairs(
        truth: &[usize],
        preds: &[usize],
        n_classes: usize,
    ) -> Result<Self, MetricError> {
        if truth.len() != preds.len() {
            return Err(MetricError::LengthMismatch(truth.len(), preds.len()));
        }
        let mut c = Self::new(n_classes)?;
        for (&t, &p) in truth.iter().zip(preds) {
            c.record(t, p)?;
        }
        Ok(c)
    }

    pub fn from_counts(counts: Vec<Vec<usize>>) -> Result<Self, MetricError> {
        let n = counts.len();
        if n == 0 {
            return Err(MetricError::Empty);
        }
        for row in &counts {
            if row.len() != n {
                return Err(MetricError::LengthMismatch(row.len(), n));
            }
        }
        Ok(Self { counts })
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<(), MetricError> {
        let n = self.counts.len();
        if truth >= n || pred >= n {
            return Err(MetricError::LabelRange(alloc::format!(
                "({truth}, {pred}) with {n} classes"
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|r| r.iter().sum::<usize>()).sum()
    }

    /// Weighted accuracy: correct over total.
    pub fn wa(&self) -> Result<f64, MetricError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricError::Empty);
        }
        let correct: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        Ok(correct as f64 / total as f64)
    }

    /// Unweighted accuracy: per-class recall averaged over the classes
    /// that actually occur. Classes absent from the truth labels do not
    /// enter the average.
    pub fn ua(&self) -> Result<f64, MetricError> {
        let mut acc = 0.0;
        let mut present = 0usize;
        for (i, row) in self.counts.iter().enumerate() {
            let row_total: usize = row.iter().sum();
            if row_total > 0 {
                acc += row[i] as f64 / row_total as f64;
                present += 1;
            }
        }
        if present == 0 {
            return Err(MetricError::Empty);
        }
        Ok(acc / present as f64)
    }
}

/// Both accuracies at once.
pub fn wa_ua(confusion: &Confusion) -> Result<(f64, f64), MetricError> {
    Ok((confusion.wa()?, confusion.ua()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rmse_hand_values() {
        assert_abs_diff_eq!(
            rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            0.0,
            epsilon = 0.0
        );
        // errors 3 and 4: sqrt((9+16)/2) = sqrt(12.5)
        assert_abs_diff_eq!(
            rmse(&[4.0, 0.0], &[1.0, 4.0]).unwrap(),
            libm::sqrt(12.5),
            epsilon = 1e-15
        );
        assert_eq!(rmse(&[], &[]), Err(MetricError::Empty));
        assert_eq!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(MetricError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn perfect_diagonal_gives_unit_accuracies() {
        let c = Confusion::from_counts(vec![
            vec![10, 0, 0, 0],
            vec![0, 10, 0, 0],
            vec![0, 0, 10, 0],
            vec![0, 0, 0, 10],
        ])
        .unwrap();
        let (wa, ua) = wa_ua(&c).unwrap();
        assert_abs_diff_eq!(wa, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ua, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn balanced_sizes_make_wa_equal_ua() {
        // 90 of 100 correct in class 0, 10 of 100 in class 1.
        let c = Confusion::from_counts(vec![vec![90, 10], vec![90, 10]]).unwrap();
        let (wa, ua) = wa_ua(&c).unwrap();
        assert_abs_diff_eq!(wa, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ua, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn imbalanced_sizes_split_wa_from_ua() {
        // 9 of 10 correct in class 0, 50 of 100 in class 1.
        let c = Confusion::from_counts(vec![vec![9, 1], vec![50, 50]]).unwrap();
        let (wa, ua) = wa_ua(&c).unwrap();
        assert_abs_diff_eq!(wa, 59.0 / 110.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ua, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn absent_classes_leave_ua_average() {
        // Class 2 never occurs; UA averages classes 0 and 1 only.
        let c = Confusion::from_counts(vec![
            vec![8, 2, 0],
            vec![0, 5, 5],
            vec![0, 0, 0],
        ])
        .unwrap();
        let (wa, ua) = wa_ua(&c).unwrap();
        assert_abs_diff_eq!(wa, 13.0 / 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ua, (0.8 + 0.5) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn from_pairs_counts_and_checks_ranges() {
        let c = Confusion::from_pairs(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(c.counts()[0], vec![1, 1]);
        assert_eq!(c.counts()[1], vec![0, 2]);
        assert_eq!(c.total(), 4);
        assert!(Confusion::from_pairs(&[0, 2], &[0, 0], 2).is_err());
        assert!(Confusion::from_pairs(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn ragged_counts_rejected() {
        assert!(Confusion::from_counts(vec![vec![1, 2], vec![3]]).is_err());
        assert!(Confusion::from_counts(vec![]).is_err());
        assert!(wa_ua(&Confusion::new(2).unwrap()).is_err());
    }
}
