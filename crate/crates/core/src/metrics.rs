//! Accuracy matrix and the averaged accuracy / forgetting measures.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `a[t][i]`: test accuracy on task `i` after finishing task `t`, stored
/// lower-triangular (row `t` has `t + 1` entries, zero-based).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the row for the next finished task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::State(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.rows.get(after).and_then(|r| r.get(task)).copied()
    }

    /// `A_t = (1/t) sum_{i<=t} a[t][i]` for one-based `t`.
    pub fn avg_accuracy(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.rows.len() {
            return Err(Error::State(format!(
                "row {t} not recorded ({} rows)",
                self.rows.len()
            )));
        }
        let row = &self.rows[t - 1];
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// `F = 1/(T-1) sum_{i<T} max_{t<T} (a[t][i] - a[T][i])` for one-based `T >= 2`.
    pub fn forgetting(&self, t: usize) -> Result<f64> {
        if t < 2 {
            return Err(Error::Validation(format!("forgetting needs at least two tasks, got {t}")));
        }
        if t > self.rows.len() {
            return Err(Error::State(format!("row {t} not recorded")));
        }
        let last = &self.rows[t - 1];
        let mut total = 0.0;
        for i in 0..t - 1 {
            let peak = (i..t - 1)
                .map(|s| self.rows[s][i] - last[i])
                .fold(f64::NEG_INFINITY, f64::max);
            total += peak;
        }
        Ok(total / (t - 1) as f64)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    libm::sqrt(ss / (values.len() - 1) as f64)
}
