use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs (N×D, one row per observation) with their responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::input(format!(
                "{} input rows but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::input("ragged input rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Dataset::new(DMatrix::from_row_slice(rows.len(), d, &flat), DVector::from_vec(targets))
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.inputs.row(i).iter().copied().collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row(i)).collect()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let inputs = self.inputs.select_rows(idx);
        let targets = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.targets[i]));
        Dataset { inputs, targets }
    }

    /// Per-column mean.
    pub fn input_mean(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.dim()).map(|c| self.inputs.column(c).sum() / n).collect()
    }

    /// Per-column population standard deviation.
    pub fn input_std(&self) -> Vec<f64> {
        let mean = self.input_mean();
        let n = self.len().max(1) as f64;
        (0..self.dim())
            .map(|c| {
                let m = mean[c];
                (self.inputs.column(c).iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect()
    }
}

/// Sample mean and population variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v)
}
