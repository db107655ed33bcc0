//! Per-class and aggregate classification metrics from confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{ratio_or_zero, Scalar};

/// Square count matrix indexed `[true_class][predicted_class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidConfusion("no rows".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::InvalidConfusion(format!(
                "not square: {n} rows but a row of length {}",
                r.len()
            )));
        }
        Ok(Self {
            num_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn from_flat(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if num_classes == 0 || counts.len() != num_classes * num_classes {
            return Err(Error::InvalidConfusion(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.num_classes + pred] += 1;
    }

    pub fn flat(&self) -> &[u64] {
        &self.counts
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, class)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct MetricsReport<T: Scalar = f64> {
    pub precision: Vec<T>,
    pub recall: Vec<T>,
    pub f1: Vec<T>,
    pub support: Vec<u64>,
    pub accuracy: T,
    pub micro_f1: T,
    pub macro_f1: T,
    pub weighted_f1: T,
}

/// Undefined ratios (0/0) are reported as 0.
pub fn compute<T: Scalar>(confusion: &ConfusionMatrix) -> Result<MetricsReport<T>> {
    let total = confusion.total();
    if total == 0 {
        return Err(Error::InvalidConfusion("matrix is all zeros".into()));
    }
    let n = confusion.num_classes();
    let count = |c: u64| T::from_u64(c).expect("count conversion");
    let two = T::one() + T::one();

    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut f1 = Vec::with_capacity(n);
    let mut support = Vec::with_capacity(n);
    for c in 0..n {
        let tp = count(confusion.get(c, c));
        let p = ratio_or_zero(tp, count(confusion.predicted(c)));
        let r = ratio_or_zero(tp, count(confusion.support(c)));
        precision.push(p);
        recall.push(r);
        f1.push(ratio_or_zero(two * p * r, p + r));
        support.push(confusion.support(c));
    }

    let total_t = count(total);
    let accuracy = count(confusion.correct()) / total_t;
    // Both averages are sums of f1 * share with identical summation order,
    // so equal supports give bit-identical macro and weighted values.
    let uniform = T::one() / T::from_count(n);
    let macro_f1 = f1.iter().map(|f| *f * uniform).sum::<T>().min(T::one());
    let weighted_f1 = f1
        .iter()
        .zip(&support)
        .map(|(f, s)| *f * (count(*s) / total_t))
        .sum::<T>()
        .min(T::one());

    // Single-label multiclass: pooled TP = trace, pooled FP = pooled FN =
    // total - trace, so micro precision = micro recall = micro F1 = accuracy.
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        support,
        accuracy,
        micro_f1: accuracy,
        macro_f1,
        weighted_f1,
    })
}
