//! Datasets, synthetic generators, delimited-file ingestion and splits.

mod delimited;
mod spiral;
mod split;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::estimator::Task;

pub use delimited::{load_delimited, HeaderMode, LoadOptions};
pub use spiral::{generate_spiral_arms, generate_spirals, SPIRAL_RADIUS};
pub use split::{holdout, kfold, Fold, Standardizer};

/// Plain row-major matrix used for datasets and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(
                "matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::invalid("matrix", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.clone()).expect("consistent matrix")
    }

    /// Per-column minimum and maximum.
    pub fn column_range(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.cols];
        let mut hi = vec![f64::NEG_INFINITY; self.cols];
        for i in 0..self.rows {
            for (c, &v) in self.row(i).iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        (lo, hi)
    }
}

/// Inputs and labels. Classification labels are one-hot rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Matrix,
    pub task: Task,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Matrix, task: Task) -> Result<Self> {
        if inputs.rows() != labels.rows() {
            return Err(Error::invalid(
                "dataset",
                format!("{} input rows but {} label rows", inputs.rows(), labels.rows()),
            ));
        }
        if inputs.data().iter().chain(labels.data()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "dataset value",
                context: "dataset construction".into(),
            });
        }
        Ok(Dataset {
            inputs,
            labels,
            task,
        })
    }

    /// One-hot labels from class indices.
    pub fn from_classes(inputs: Matrix, classes: &[usize], n_classes: usize) -> Result<Self> {
        let mut labels = Matrix::zeros(classes.len(), n_classes);
        for (i, &c) in classes.iter().enumerate() {
            if c >= n_classes {
                return Err(Error::invalid("dataset", format!("class {c} >= {n_classes}")));
            }
            labels.row_mut(i)[c] = 1.0;
        }
        Dataset::new(inputs, labels, Task::Classification)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.select_rows(idx),
            task: self.task,
        }
    }

    /// Class index of row `i` (argmax of its label row, lowest index on ties).
    pub fn class_of(&self, i: usize) -> usize {
        argmax(self.labels.row(i))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
