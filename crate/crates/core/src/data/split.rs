use rand::seq::SliceRandom;

use super::Matrix;
use crate::error::{Error, Result};

/// One cross-validation partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `folds` disjoint test sets covering `0..n`, sizes differing by at most one,
/// each paired with its complement as the training set.
pub fn kfold(n: usize, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::invalid("kfold", "need at least 2 folds"));
    }
    if folds > n {
        return Err(Error::invalid("kfold", format!("{folds} folds for {n} rows")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::rng(seed));
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let mut test = idx[start..start + len].to_vec();
        let mut train: Vec<usize> = idx[..start].iter().chain(&idx[start + len..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        out.push(Fold { train, test });
        start += len;
    }
    Ok(out)
}

/// Split `idx` into `(kept, held_out)` with `round(fraction * len)` rows held
/// out (at least one when `fraction > 0` and more than one row exists).
pub fn holdout(idx: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("holdout", format!("fraction {fraction} outside [0, 1)")));
    }
    let mut shuffled = idx.to_vec();
    shuffled.shuffle(&mut crate::rng(seed));
    let mut held = (fraction * idx.len() as f64).round() as usize;
    if fraction > 0.0 && held == 0 && idx.len() > 1 {
        held = 1;
    }
    let mut kept = shuffled.split_off(held);
    shuffled.sort_unstable();
    kept.sort_unstable();
    Ok((kept, shuffled))
}

/// Per-column affine standardization fitted on a set of rows.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Scale divisor per column; 1 for constant columns.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(m: &Matrix) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::invalid("standardize", "no rows to fit"));
        }
        let n = m.rows() as f64;
        let mut mean = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for (s, v) in mean.iter_mut().zip(m.row(i)) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|s| *s /= n);
        let mut var = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for ((s, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn identity(cols: usize) -> Self {
        Standardizer {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }

    pub fn invert(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        out
    }

    /// Squared-error scale factor per column: MSE in standardized units times
    /// `std^2` gives MSE in original units.
    pub fn variance(&self) -> Vec<f64> {
        self.std.iter().map(|s| s * s).collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn ten_rows_five_folds() {
        let folds = kfold(10, 5, 0).unwrap();
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 8));
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(folds, kfold(10, 5, 0).unwrap());
    }

    #[test]
    fn kfold_errors() {
        assert!(kfold(10, 1, 0).is_err());
        assert!(kfold(3, 4, 0).is_err());
    }

    #[test]
    fn holdout_fraction() {
        let idx: Vec<usize> = (0..50).collect();
        let (kept, held) = holdout(&idx, 0.1, 3).unwrap();
        assert_eq!(held.len(), 5);
        assert_eq!(kept.len(), 45);
        assert!(held.iter().all(|i| !kept.contains(i)));
    }

    #[test]
    fn constant_columns_are_centered_only() {
        let m = Matrix::new(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let s = Standardizer::fit(&m).unwrap();
        assert_eq!(s.std[1], 1.0);
        let z = s.apply(&m);
        assert!(z.row(0)[1] == 0.0 && z.row(2)[1] == 0.0);
    }

    proptest! {
        #[test]
        fn folds_partition_indices(n in 2usize..200, folds in 2usize..12, seed in 0u64..1000) {
            prop_assume!(folds <= n);
            let fs = kfold(n, folds, seed).unwrap();
            let sizes: Vec<usize> = fs.iter().map(|f| f.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut seen = vec![0u32; n];
            for f in &fs {
                prop_assert_eq!(f.train.len() + f.test.len(), n);
                for &i in &f.test { seen[i] += 1; prop_assert!(!f.train.contains(&i)); }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }

        #[test]
        fn standardization_round_trips(rows in 2usize..30, data in prop::collection::vec(-1e3f64..1e3, 90)) {
            let m = Matrix::new(rows, 3, data[..rows * 3].to_vec()).unwrap();
            let s = Standardizer::fit(&m).unwrap();
            let z = s.apply(&m);
            let back = s.invert(&z);
            for (a, b) in m.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for c in 0..3 {
                let col: Vec<f64> = (0..rows).map(|i| z.row(i)[c]).collect();
                let mean = col.iter().sum::<f64>() / rows as f64;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                if s.std[c] != 1.0 || sd > 0.0 {
                    prop_assert!((sd - 1.0).abs() < 1e-6 || sd == 0.0);
                }
            }
        }
    }
}
