//! The learnable neighbor dictionary and soft-attention retrieval.

use std::cmp::Ordering;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::diff::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian used for freshly initialized entries.
pub const INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

/// How stored values become loss targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// Values are free logits; the target is their softmax.
    SoftLabel,
    /// Values are used as-is (regression).
    Raw,
}

/// `S` key/value pairs plus the attention metric and temperature.
///
/// Keys are `[S, m]`, values `[S, n_o]`. Both are ordinary tensors, so they
/// can be made differentiable leaves and trained.
#[derive(Clone, Debug)]
pub struct NeighborDictionary {
    pub keys: Tensor,
    pub values: Tensor,
    pub metric: Metric,
    pub gamma: f64,
    pub value_mode: ValueMode,
}

/// Keys with whatever per-dictionary preprocessing the metric needs, so a
/// batch of queries can share it.
pub struct PreparedKeys {
    keys: Tensor,
    metric: Metric,
    gamma: f64,
}

impl NeighborDictionary {
    pub fn new(
        keys: Tensor,
        values: Tensor,
        metric: Metric,
        gamma: f64,
        value_mode: ValueMode,
    ) -> Result<Self> {
        let (s, _) = keys.dims2("dictionary")?;
        let (sv, _) = values.dims2("dictionary")?;
        if s == 0 {
            return Err(Error::invalid("dictionary", "needs at least one entry"));
        }
        if s != sv {
            return Err(Error::shape("dictionary", keys.shape(), values.shape()));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(
                "dictionary",
                format!("temperature must be positive, got {gamma}"),
            ));
        }
        Ok(NeighborDictionary {
            keys,
            values,
            metric,
            gamma,
            value_mode,
        })
    }

    /// `entries` keys of width `key_dim` and values of width `value_dim`, all
    /// drawn i.i.d. from `N(0, 0.1^2)`.
    pub fn init(
        entries: usize,
        key_dim: usize,
        value_dim: usize,
        metric: Metric,
        gamma: f64,
        value_mode: ValueMode,
        rng: &mut crate::Rng,
    ) -> Result<Self> {
        if entries == 0 || key_dim == 0 || value_dim == 0 {
            return Err(Error::invalid("dictionary", "dimensions must be at least 1"));
        }
        let keys = Tensor::matrix(entries, key_dim, gaussian(entries * key_dim, rng))?;
        let values = Tensor::matrix(entries, value_dim, gaussian(entries * value_dim, rng))?;
        NeighborDictionary::new(keys, values, metric, gamma, value_mode)
    }

    /// Replace the values with draws uniform over `[lo[c], hi[c]]` per column.
    pub fn with_uniform_values(mut self, lo: &[f64], hi: &[f64], rng: &mut crate::Rng) -> Result<Self> {
        let n_o = self.value_dim();
        if lo.len() != n_o || hi.len() != n_o {
            return Err(Error::shape("dictionary values", &[lo.len(), hi.len()], &[n_o]));
        }
        let mut data = Vec::with_capacity(self.len() * n_o);
        for _ in 0..self.len() {
            for c in 0..n_o {
                data.push(if hi[c] > lo[c] {
                    rng.random_range(lo[c]..=hi[c])
                } else {
                    lo[c]
                });
            }
        }
        self.values = Tensor::matrix(self.len(), n_o, data)?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key_dim(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn value_dim(&self) -> usize {
        self.values.shape()[1]
    }

    /// Loss targets for every entry, `[S, n_o]`.
    pub fn targets(&self) -> Result<Tensor> {
        match self.value_mode {
            ValueMode::SoftLabel => self.values.softmax_rows(),
            ValueMode::Raw => Ok(self.values.clone()),
        }
    }

    pub fn prepare(&self) -> Result<PreparedKeys> {
        let keys = match self.metric {
            Metric::Euclidean => self.keys.clone(),
            Metric::Cosine => {
                if self.keys.norm_rows()?.data().contains(&0.0) {
                    return Err(Error::ZeroNorm("dictionary key"));
                }
                self.keys.normalize_rows()?
            }
        };
        Ok(PreparedKeys {
            keys,
            metric: self.metric,
            gamma: self.gamma,
        })
    }

    /// Attention weights of a length-`m` query over all entries, shape `[S]`.
    pub fn attend(&self, query: &Tensor) -> Result<Tensor> {
        self.prepare()?.attend(query)
    }

    /// Attention weights as plain values, without recording a graph.
    pub fn attention_weights(&self, query: &[f64]) -> Result<Vec<f64>> {
        let _g = no_grad();
        Ok(self.attend(&Tensor::vector(query.to_vec()))?.to_vec())
    }

    /// Indices of the `k` rows of `features` most cosine-similar to key
    /// `entry`, most similar first, ties broken by lower index. Rows with zero
    /// norm score a similarity of 0.
    pub fn nearest_dataset_points(&self, entry: usize, features: &Matrix, k: usize) -> Result<Vec<usize>> {
        if entry >= self.len() {
            return Err(Error::invalid(
                "nearest_dataset_points",
                format!("entry {entry} out of range for {} entries", self.len()),
            ));
        }
        nearest_by_cosine(self.keys.row(entry), features, k)
    }
}

impl PreparedKeys {
    pub fn attend(&self, query: &Tensor) -> Result<Tensor> {
        let (s, m) = self.keys.dims2("attend")?;
        if query.shape() != [m] {
            return Err(Error::shape("attend", query.shape(), &[m]));
        }
        let logits = match self.metric {
            Metric::Euclidean => {
                let diff = self.keys.sub(&query.broadcast_rows(s)?)?;
                diff.norm_rows()?.scale(-self.gamma)
            }
            Metric::Cosine => {
                let q = query.reshape(&[1, m])?;
                if q.norm_rows()?.item() == 0.0 {
                    return Err(Error::ZeroNorm("query"));
                }
                let qn = q.normalize_rows()?;
                self.keys.matmul(&qn.transpose()?)?.scale(self.gamma)
            }
        };
        logits.reshape(&[1, s])?.softmax_rows()?.reshape(&[s])
    }
}

pub(crate) fn gaussian(n: usize, rng: &mut crate::Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn nearest_by_cosine(probe: &[f64], features: &Matrix, k: usize) -> Result<Vec<usize>> {
    if features.rows() == 0 {
        return Err(Error::invalid("nearest_dataset_points", "empty dataset"));
    }
    if features.cols() != probe.len() {
        return Err(Error::shape(
            "nearest_dataset_points",
            &[probe.len()],
            &[features.rows(), features.cols()],
        ));
    }
    if k > features.rows() {
        return Err(Error::invalid(
            "nearest_dataset_points",
            format!("k = {k} exceeds dataset size {}", features.rows()),
        ));
    }
    let mut scored: Vec<(usize, f64)> = (0..features.rows())
        .map(|i| (i, cosine(probe, features.row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(i, _)| i).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng;

    fn dict(keys: Vec<f64>, m: usize, metric: Metric, gamma: f64) -> NeighborDictionary {
        let s = keys.len() / m;
        NeighborDictionary::new(
            Tensor::matrix(s, m, keys).unwrap(),
            Tensor::zeros(&[s, 2]),
            metric,
            gamma,
            ValueMode::SoftLabel,
        )
        .unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = NeighborDictionary::init(5000, 64, 10, Metric::Cosine, 5.0, ValueMode::SoftLabel, &mut rng(0)).unwrap();
        assert_eq!(a.keys.shape(), &[5000, 64]);
        assert_eq!(a.values.shape(), &[5000, 10]);
        let b = NeighborDictionary::init(5000, 64, 10, Metric::Cosine, 5.0, ValueMode::SoftLabel, &mut rng(0)).unwrap();
        assert_eq!(a.keys.data(), b.keys.data());
        assert_eq!(a.values.data(), b.values.data());
    }

    #[test]
    fn init_moments() {
        let d = NeighborDictionary::init(1000, 500, 500, Metric::Cosine, 5.0, ValueMode::SoftLabel, &mut rng(3)).unwrap();
        let xs = d.keys.data();
        assert_eq!(xs.len(), 500_000);
        let all: Vec<f64> = xs.iter().chain(d.values.data()).copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((std - 0.1).abs() < 1e-3, "std {std}");
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(NeighborDictionary::new(Tensor::zeros(&[3, 2]), Tensor::zeros(&[2, 2]), Metric::Cosine, 1.0, ValueMode::Raw).is_err());
        assert!(NeighborDictionary::new(Tensor::zeros(&[0, 2]), Tensor::zeros(&[0, 2]), Metric::Cosine, 1.0, ValueMode::Raw).is_err());
        assert!(NeighborDictionary::new(Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2]), Metric::Cosine, 0.0, ValueMode::Raw).is_err());
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let d = dict(vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0, 0.5, -1.0], 2, Metric::Euclidean, 3.0);
        let w = d.attention_weights(&[2.0, 1.0]).unwrap();
        for v in w {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn sharp_temperature_selects_matching_key() {
        let keys = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0];
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let d = dict(keys.clone(), 2, metric, 100.0);
            let w = d.attention_weights(&[1.0, 0.0]).unwrap();
            assert!(w[0] > 0.999, "{metric:?}: {w:?}");
        }
    }

    #[test]
    fn euclidean_weights_match_direct_evaluation() {
        // Distances 1 and 2 from the origin.
        let d = dict(vec![1.0, 0.0, 0.0, 2.0], 2, Metric::Euclidean, 1.0);
        let w = d.attention_weights(&[0.0, 0.0]).unwrap();
        let (a, b) = ((-1.0f64).exp(), (-2.0f64).exp());
        assert!((w[0] - a / (a + b)).abs() < 1e-15);
        assert!((w[1] - b / (a + b)).abs() < 1e-15);
        assert!((w[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let d = dict(vec![1.0, 0.0, 0.0, 1.0], 2, Metric::Cosine, 1.0);
        assert!(matches!(d.attention_weights(&[0.0, 0.0]), Err(Error::ZeroNorm(_))));
        let z = dict(vec![1.0, 0.0, 0.0, 0.0], 2, Metric::Cosine, 1.0);
        assert!(matches!(z.attention_weights(&[1.0, 0.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn soft_label_targets_are_distributions() {
        let d = NeighborDictionary::init(20, 3, 4, Metric::Cosine, 5.0, ValueMode::SoftLabel, &mut rng(1)).unwrap();
        let t = d.targets().unwrap();
        for i in 0..20 {
            let row = t.row(i);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nearest_points_ordering() {
        let d = dict(vec![1.0, 0.0], 2, Metric::Cosine, 1.0);
        // cos with (1,0): 0.6, 1.0, 0.0
        let feats = Matrix::new(3, 2, vec![3.0, 4.0, 2.0, 0.0, 0.0, 5.0]).unwrap();
        assert_eq!(d.nearest_dataset_points(0, &feats, 3).unwrap(), vec![1, 0, 2]);
        assert_eq!(d.nearest_dataset_points(0, &feats, 1).unwrap(), vec![1]);
        // ties by lower index
        let tied = Matrix::new(3, 2, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0]).unwrap();
        assert_eq!(d.nearest_dataset_points(0, &tied, 3).unwrap(), vec![0, 1, 2]);
        let empty = Matrix::new(0, 2, vec![]).unwrap();
        assert!(d.nearest_dataset_points(0, &empty, 0).is_err());
        assert!(d.nearest_dataset_points(1, &feats, 1).is_err());
    }

    #[test]
    fn key_itself_ranks_first() {
        let d = NeighborDictionary::init(4, 5, 2, Metric::Cosine, 5.0, ValueMode::SoftLabel, &mut rng(9)).unwrap();
        let mut rows: Vec<f64> = gaussian(10 * 5, &mut rng(10));
        rows[6 * 5..7 * 5].copy_from_slice(d.keys.row(2));
        let feats = Matrix::new(10, 5, rows).unwrap();
        assert_eq!(d.nearest_dataset_points(2, &feats, 1).unwrap(), vec![6]);
        let mut all = d.nearest_dataset_points(2, &feats, 10).unwrap();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>, f64)> {
        (2usize..8).prop_flat_map(|s| {
            (
                prop::collection::vec(-2.0f64..2.0, s * 3),
                prop::collection::vec(-2.0f64..2.0, 3),
                Just((0..s).collect::<Vec<usize>>()).prop_shuffle(),
                0.5f64..20.0,
            )
        })
    }

    proptest! {
        #[test]
        fn weights_are_a_permutation_equivariant_distribution((keys, q, perm, gamma) in arb_case()) {
            prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
            for metric in [Metric::Euclidean, Metric::Cosine] {
                let s = perm.len();
                let d = dict(keys.clone(), 3, metric, gamma);
                if metric == Metric::Cosine && (0..s).any(|i| d.keys.row(i).iter().all(|v| *v == 0.0)) {
                    continue;
                }
                let w = d.attention_weights(&q).unwrap();
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let permuted: Vec<f64> = perm.iter().flat_map(|&i| d.keys.row(i).to_vec()).collect();
                let wp = dict(permuted, 3, metric, gamma).attention_weights(&q).unwrap();
                for (j, &i) in perm.iter().enumerate() {
                    prop_assert!((wp[j] - w[i]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn cosine_weights_ignore_positive_rescaling(
            (keys, q, _perm, gamma) in arb_case(),
            a in 0.1f64..10.0,
            b in 0.1f64..10.0,
        ) {
            let s = keys.len() / 3;
            let d = dict(keys.clone(), 3, Metric::Cosine, gamma);
            prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
            prop_assume!((0..s).all(|i| d.keys.row(i).iter().any(|v| v.abs() > 1e-3)));
            let w = d.attention_weights(&q).unwrap();
            let mut scaled = keys.clone();
            scaled[..3].iter_mut().for_each(|v| *v *= b);
            let qs: Vec<f64> = q.iter().map(|v| v * a).collect();
            let ws = dict(scaled, 3, Metric::Cosine, gamma).attention_weights(&qs).unwrap();
            for (x, y) in w.iter().zip(&ws) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn sharper_temperature_never_lowers_peak((keys, q, _perm, gamma) in arb_case(), bump in 0.0f64..10.0) {
            prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
            let lo = dict(keys.clone(), 3, Metric::Euclidean, gamma).attention_weights(&q).unwrap();
            let hi = dict(keys, 3, Metric::Euclidean, gamma + bump).attention_weights(&q).unwrap();
            let max = |w: &[f64]| w.iter().copied().fold(0.0, f64::max);
            prop_assert!(max(&hi) >= max(&lo) - 1e-12);
        }
    }
}
