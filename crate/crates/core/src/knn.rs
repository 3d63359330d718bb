//! Exact k-nearest-neighbor baselines and the constant-estimator view of kNN.
//!
//! Fitting a constant `C` to a query's neighborhood under squared error gives
//! `C = mean(labels)`, which is exactly the kNN average. Both routes are
//! provided so the equivalence can be checked directly.

use std::cmp::Ordering;

use crate::data::{argmax, Dataset, Matrix};
use crate::dictionary::{cosine, Metric};
use crate::error::{Error, Result};
use crate::estimator::Task;

/// The `k` training pairs retrieved for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub indices: Vec<usize>,
    pub inputs: Matrix,
    pub labels: Matrix,
}

impl Neighborhood {
    pub fn new(inputs: Matrix, labels: Matrix) -> Result<Self> {
        if inputs.rows() == 0 || inputs.rows() != labels.rows() {
            return Err(Error::invalid("neighborhood", "needs k >= 1 matching input/label rows"));
        }
        Ok(Neighborhood {
            indices: (0..inputs.rows()).collect(),
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => 1.0 - cosine(a, b),
    }
}

/// Brute-force search for the `k` training rows closest to `query`, nearest
/// first, ties broken by lower index. `exclude` removes the query's own row
/// when it belongs to the training set.
pub fn knn_search(
    query: &[f64],
    train: &Dataset,
    k: usize,
    metric: Metric,
    exclude: Option<usize>,
) -> Result<Neighborhood> {
    if query.len() != train.input_dim() {
        return Err(Error::shape("knn_search", &[query.len()], &[train.input_dim()]));
    }
    let available = train.len() - usize::from(exclude.is_some_and(|e| e < train.len()));
    if k == 0 || k > available {
        return Err(Error::invalid(
            "knn_search",
            format!("k = {k} but only {available} candidate rows"),
        ));
    }
    let mut scored: Vec<(usize, f64)> = (0..train.len())
        .filter(|&i| Some(i) != exclude)
        .map(|i| (i, distance(metric, query, train.inputs.row(i))))
        .collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let indices: Vec<usize> = scored.into_iter().take(k).map(|(i, _)| i).collect();
    Ok(Neighborhood {
        inputs: train.inputs.select_rows(&indices),
        labels: train.labels.select_rows(&indices),
        indices,
    })
}

/// Average of the neighbors' label rows. For one-hot classification labels
/// this is the neighborhood's class distribution; see [`predicted_class`].
pub fn knn_predict(neighborhood: &Neighborhood, _task: Task) -> Vec<f64> {
    let k = neighborhood.len();
    let mut avg = vec![0.0; neighborhood.labels.cols()];
    for j in 0..k {
        for (a, v) in avg.iter_mut().zip(neighborhood.labels.row(j)) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= k as f64);
    avg
}

pub fn predicted_class(distribution: &[f64]) -> usize {
    argmax(distribution)
}

/// Minimizer of `(1/k) sum_j ||C - zeta_j||^2` over constant predictions `C`.
///
/// Setting the gradient `(2/k) sum_j (C - zeta_j)` to zero gives
/// `C = (sum_j zeta_j) / k`.
pub fn constant_estimator_solution(neighborhood: &Neighborhood) -> Vec<f64> {
    let k = neighborhood.len() as f64;
    (0..neighborhood.labels.cols())
        .map(|c| {
            let mut total = 0.0;
            for j in 0..neighborhood.len() {
                total += neighborhood.labels.row(j)[c];
            }
            total / k
        })
        .collect()
}

/// kNN predictions for every row of `test`, `[n_test, n_o]`.
pub fn predict_all(train: &Dataset, test: &Dataset, k: usize, metric: Metric) -> Result<Matrix> {
    let mut out = Vec::with_capacity(test.len() * train.label_dim());
    for i in 0..test.len() {
        let n = knn_search(test.inputs.row(i), train, k, metric, None)?;
        out.extend(knn_predict(&n, train.task));
    }
    Matrix::new(test.len(), train.label_dim(), out)
}
