//! Splits and single training runs shared by the subcommands.

use mnbr::data::{generate_spiral_arms, holdout, kfold, load_delimited, Dataset, LoadOptions, Standardizer};
use mnbr::estimator::Task;
use mnbr::meta::{evaluate, train, Evaluation, MetaModel, Normalization, TrainObserver, TrainOutcome};

use crate::config::{DataKind, RunConfig};
use crate::CliError;

/// Salt that separates the validation holdout stream from the split stream.
const VALIDATION_SALT: u64 = 0x5eed_0f_7a11;

/// One train/validation/test partition, already normalized.
#[derive(Clone, Debug)]
pub struct Split {
    /// `"main"` for a single split, `"fold<k>"` (1-based) for cross-validation.
    pub name: String,
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
    pub normalization: Option<Normalization>,
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "accuracy",
        Task::Regression => "mse",
    }
}

/// Build every split the config describes. Deterministic in `seed`.
pub fn prepare_splits(cfg: &RunConfig, seed: u64) -> Result<Vec<Split>, CliError> {
    let d = &cfg.data;
    let needs_val = cfg.train.patience.is_some();
    match d.kind {
        DataKind::Spiral => {
            let per_class = d.train_per_class + d.test_per_class;
            let all = generate_spiral_arms(d.arms, per_class, d.noise, d.turns, seed)?;
            let frac = d.test_per_class as f64 / per_class as f64;
            let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
            for c in 0..d.arms {
                let class_idx: Vec<usize> = (c * per_class..(c + 1) * per_class).collect();
                let (kept, held) = holdout(&class_idx, frac, seed.wrapping_add(c as u64))?;
                train_idx.extend(kept);
                test_idx.extend(held);
            }
            let (train_idx, val_idx) = validation_split(&train_idx, needs_val, cfg.train.validation_fraction, seed)?;
            Ok(vec![Split {
                name: "main".into(),
                train: all.subset(&train_idx),
                validation: val_idx.map(|v| all.subset(&v)),
                test: all.subset(&test_idx),
                normalization: None,
            }])
        }
        DataKind::Delimited => {
            let path = d.path.as_ref().expect("validated");
            let all = load_delimited(
                path,
                &LoadOptions {
                    label_columns: d.label_columns.clone(),
                    delimiter: d.delimiter as u8,
                    header: d.header,
                    task: cfg.task,
                },
            )?;
            kfold(all.len(), d.folds, seed)?
                .into_iter()
                .enumerate()
                .map(|(k, fold)| {
                    let (train_idx, val_idx) =
                        validation_split(&fold.train, needs_val, cfg.train.validation_fraction, seed.wrapping_add(k as u64))?;
                    let train = all.subset(&train_idx);
                    let inputs = Standardizer::fit(&train.inputs)?;
                    let labels = (cfg.task == Task::Regression && d.standardize_labels)
                        .then(|| Standardizer::fit(&train.labels))
                        .transpose()?;
                    let norm = Normalization { inputs, labels };
                    Ok(Split {
                        name: format!("fold{}", k + 1),
                        train: normalize(&train, &norm),
                        validation: val_idx.map(|v| normalize(&all.subset(&v), &norm)),
                        test: normalize(&all.subset(&fold.test), &norm),
                        normalization: Some(norm),
                    })
                })
                .collect()
        }
    }
}

fn validation_split(
    idx: &[usize],
    needed: bool,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Option<Vec<usize>>), CliError> {
    if !needed {
        return Ok((idx.to_vec(), None));
    }
    let (kept, held) = holdout(idx, fraction, seed ^ VALIDATION_SALT)?;
    Ok((kept, Some(held)))
}

pub fn normalize(data: &Dataset, norm: &Normalization) -> Dataset {
    Dataset {
        inputs: norm.inputs.apply(&data.inputs),
        labels: match &norm.labels {
            Some(l) => l.apply(&data.labels),
            None => data.labels.clone(),
        },
        task: data.task,
    }
}

/// Fresh model for a split. The plain and meta variants of one seed share
/// their extractor and head initialization.
pub fn init_model(cfg: &RunConfig, split: &Split, meta: bool, seed: u64) -> Result<MetaModel, CliError> {
    let spec = cfg.model_spec(split.train.input_dim(), split.train.label_dim(), meta);
    let (lo, hi) = split.train.labels.column_range();
    let range = (cfg.task == Task::Regression).then_some((lo.as_slice(), hi.as_slice()));
    Ok(MetaModel::init(spec, range, &mut mnbr::rng(seed))?)
}

pub struct RunResult {
    pub outcome: TrainOutcome,
    pub test: Evaluation,
}

/// Train one model on a split and evaluate it on the split's test rows.
pub fn run_split(
    cfg: &RunConfig,
    split: &Split,
    meta: bool,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<RunResult, CliError> {
    let model = init_model(cfg, split, meta, seed)?;
    let outcome = train(model, &split.train, split.validation.as_ref(), &cfg.train_config(seed), observer)?;
    let test = evaluate(&outcome.model, &split.test)?;
    Ok(RunResult { outcome, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spiral_cfg(extra: &str) -> RunConfig {
        RunConfig::from_toml(&format!(
            "task = \"classification\"\n[data]\nkind = \"spiral\"\ntrain_per_class = 20\ntest_per_class = 10\n[model]\nentries = 5\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn spiral_split_sizes_and_balance() {
        let s = &prepare_splits(&spiral_cfg(""), 3).unwrap()[0];
        assert_eq!(s.train.len(), 40);
        assert_eq!(s.test.len(), 20);
        let per_class = (0..s.test.len()).filter(|&i| s.test.class_of(i) == 1).count();
        assert_eq!(per_class, 10);
        assert!(s.validation.is_none());
    }

    #[test]
    fn validation_rows_come_out_of_training() {
        let s = &prepare_splits(&spiral_cfg("[train]\npatience = 3\n"), 3).unwrap()[0];
        assert_eq!(s.train.len() + s.validation.as_ref().unwrap().len(), 40);
        assert_eq!(s.validation.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn delimited_folds_are_standardized_on_training_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows: String = (0..20).map(|i| format!("{},{},{}\n", i, (i * 7) % 5, i as f64 * 0.5 + 1.0)).collect();
        std::fs::write(&path, rows).unwrap();
        let cfg = RunConfig::from_toml(&format!(
            "task = \"regression\"\n[data]\nkind = \"delimited\"\npath = {:?}\nfolds = 4\n[model]\noutput = \"dot\"\nentries = 3\n",
            path
        ))
        .unwrap();
        let splits = prepare_splits(&cfg, 1).unwrap();
        assert_eq!(splits.len(), 4);
        for s in &splits {
            assert_eq!(s.test.len(), 5);
            for c in 0..2 {
                let col: Vec<f64> = (0..s.train.len()).map(|i| s.train.inputs.row(i)[c]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                assert!(mean.abs() < 1e-9);
            }
        }
    }
}
