//! Observed data with provenance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n × d_X` observations; `contaminated[i]` marks rows replaced by an
/// outlier process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub values: DMatrix<f64>,
    pub contaminated: Vec<bool>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(values: DMatrix<f64>) -> Self {
        let n = values.nrows();
        Self {
            values,
            contaminated: vec![false; n],
            seed: None,
        }
    }

    pub fn with_flags(
        values: DMatrix<f64>,
        contaminated: Vec<bool>,
        seed: Option<u64>,
    ) -> Result<Self> {
        if contaminated.len() != values.nrows() {
            return Err(Error::dim(
                "dataset flags",
                values.nrows(),
                contaminated.len(),
            ));
        }
        Ok(Self {
            values,
            contaminated,
            seed,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::dim("dataset row", d, bad.len()));
        }
        Ok(Self::new(DMatrix::from_fn(rows.len(), d, |i, j| {
            rows[i][j]
        })))
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn contamination_count(&self) -> usize {
        self.contaminated.iter().filter(|c| **c).count()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(Error::dim("dataset concat", self.dim(), other.dim()));
        }
        let values = DMatrix::from_fn(self.len() + other.len(), self.dim(), |i, j| {
            if i < self.len() {
                self.values[(i, j)]
            } else {
                other.values[(i - self.len(), j)]
            }
        });
        let mut flags = self.contaminated.clone();
        flags.extend(&other.contaminated);
        Dataset::with_flags(values, flags, self.seed)
    }

    /// Rows whose `contaminated` flag is false.
    pub fn clean_part(&self) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !self.contaminated[i]).collect();
        let values = DMatrix::from_fn(keep.len(), self.dim(), |i, j| self.values[(keep[i], j)]);
        Dataset {
            contaminated: vec![false; keep.len()],
            values,
            seed: self.seed,
        }
    }
}
