//! Scalar/vector kernels shared by every other module: numerically stable
//! softmax, median, median absolute deviation, and elementwise positive
//! difference.
//!
//! All computation is in `f64` even when traces store narrower floats, so
//! reference comparisons in tests stay tight. Every function here is pure.

use std::ops::Deref;

use crate::error::{Error, Result};

/// A row of pre-softmax attention logits for one query position.
///
/// Invariants (enforced at construction): non-empty, every element finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow(Vec<f64>);

impl LogitRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("logit row must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "logit row contains non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Deref for LogitRow {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A post-softmax attention row: elements in [0, 1] summing to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow(Vec<f64>);

impl ProbRow {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("probability row must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!(
                "probability row element {} at index {i} outside [0, 1]",
                values[i]
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probability row sums to {sum}, expected 1 within {}",
                Self::SUM_TOLERANCE
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Deref for ProbRow {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Numerically stable softmax: subtracts the row maximum before
/// exponentiating, so arbitrarily large logits cannot overflow.
///
/// Order-preserving and shift-invariant. The input invariants (non-empty,
/// finite) are carried by [`LogitRow`], so this cannot fail.
pub fn softmax(row: &LogitRow) -> ProbRow {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    ProbRow(exp.into_iter().map(|e| e / sum).collect())
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidInput(format!("{what} of empty input")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{what}: non-finite value {} at index {i}",
            values[i]
        )));
    }
    Ok(())
}

/// Median: middle order statistic for odd n, mean of the two central order
/// statistics for even n.
pub fn median(values: &[f64]) -> Result<f64> {
    check_finite(values, "median")?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

/// Median absolute deviation: `median(|x - median(x)|)`.
///
/// Raw MAD with no consistency factor; it is used only as a relative scale.
pub fn mad(values: &[f64]) -> Result<f64> {
    let m = median(values)?;
    let deviations: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&deviations)
}

/// Elementwise `max(0, curr[i] - prev[i])`.
pub fn positive_diff(curr: &[f64], prev: &[f64]) -> Result<Vec<f64>> {
    if curr.len() != prev.len() {
        return Err(Error::ShapeMismatch {
            context: "positive_diff",
            expected: curr.len(),
            actual: prev.len(),
        });
    }
    Ok(curr
        .iter()
        .zip(prev)
        .map(|(c, p)| (c - p).max(0.0))
        .collect())
}
