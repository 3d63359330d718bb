//! The subcommands: train, eval, sweep, trace and knn-baseline.
//!
//! Each writes its outputs under an output directory and returns the records
//! it wrote, so callers can inspect results without re-reading files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mnbr::data::Dataset;
use mnbr::dictionary::ValueMode;
use mnbr::estimator::Task;
use mnbr::knn::predict_all;
use mnbr::meta::{evaluate, similarity_shift_report, Artifact, EpochRecord, Evaluation, MetaModel, TrainObserver};

use crate::config::RunConfig;
use crate::experiment::{init_model, metric_name, prepare_splits, run_split};
use crate::output::{mean_std_median, to_jsonl, write_atomic, Record};
use crate::CliError;

/// Prints one line per epoch to stderr when enabled.
pub struct Progress {
    pub enabled: bool,
    pub label: String,
}

impl TrainObserver for Progress {
    fn on_epoch(&mut self, r: &EpochRecord, _model: &MetaModel) {
        if self.enabled {
            let val = r.val_loss.map(|v| format!(" val_loss {v:.5}")).unwrap_or_default();
            eprintln!(
                "[{}] epoch {:>4} lr {:.2e} loss {:.5} metric {:.5}{val}",
                self.label, r.epoch, r.lr, r.train_loss, r.train_metric
            );
        }
    }
}

fn artifact_name(split: &str, model: &str, single: bool) -> String {
    match (single, model) {
        (true, "meta") => "model.json".into(),
        (true, m) => format!("model_{m}.json"),
        (false, "meta") => format!("model_{split}.json"),
        (false, m) => format!("model_{m}_{split}.json"),
    }
}

fn summaries(records: &[Record], task: Task) -> Vec<Record> {
    let mut models: Vec<String> = Vec::new();
    for r in records {
        if let Record::Test { model, .. } = r {
            if !models.contains(model) {
                models.push(model.clone());
            }
        }
    }
    models
        .into_iter()
        .map(|m| {
            let vals: Vec<f64> = records
                .iter()
                .filter_map(|r| match r {
                    Record::Test { model, metric, .. } if *model == m => Some(*metric),
                    _ => None,
                })
                .collect();
            let (mean, std, median) = mean_std_median(&vals);
            Record::Summary {
                model: m,
                metric_name: metric_name(task),
                count: vals.len(),
                mean,
                std,
                median,
            }
        })
        .collect()
}

fn finish(out: &Path, file: &str, mut records: Vec<Record>, started: Instant) -> Result<Vec<Record>, CliError> {
    records.push(Record::Timing {
        wall_clock_s: started.elapsed().as_secs_f64(),
    });
    write_atomic(&out.join(file), &to_jsonl(&records)?)?;
    Ok(records)
}

/// Train the configured model (and the plain baseline when requested) on
/// every split; write one artifact per model and split plus `metrics.jsonl`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, progress: bool) -> Result<Vec<Record>, CliError> {
    let started = Instant::now();
    let splits = prepare_splits(cfg, cfg.seed)?;
    let single = splits.len() == 1;
    let mut records = vec![Record::header("train", cfg)];
    let mut variants = vec![cfg.model.meta];
    if cfg.train.baseline && cfg.model.meta {
        variants.push(false);
    }
    for split in &splits {
        for &meta in &variants {
            let model = if meta { "meta" } else { "vanilla" };
            let mut obs = Progress {
                enabled: progress,
                label: format!("{}/{model}", split.name),
            };
            let run = run_split(cfg, split, meta, cfg.seed, &mut obs)?;
            records.extend(run.outcome.history.iter().map(|e| Record::Epoch {
                split: split.name.clone(),
                model: model.into(),
                seed: cfg.seed,
                epoch: e.clone(),
            }));
            records.push(Record::Test {
                split: split.name.clone(),
                model: model.into(),
                seed: cfg.seed,
                metric_name: metric_name(cfg.task),
                loss: run.test.loss,
                metric: run.test.metric,
                best_epoch: run.outcome.best_epoch,
                stopped_early: run.outcome.stopped_early,
            });
            let artifact = Artifact::new(run.outcome.model, split.normalization.clone());
            write_atomic(&out.join(artifact_name(&split.name, model, single)), &artifact.to_bytes()?)?;
        }
    }
    let s = summaries(&records, cfg.task);
    records.extend(s);
    finish(out, "metrics.jsonl", records, started)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: EvalSplit,
    /// 1-based fold for cross-validated data.
    pub fold: usize,
    pub similarity: bool,
    /// Write the `k` nearest training points of every dictionary entry.
    pub neighbors: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: EvalSplit::Test,
            fold: 1,
            similarity: false,
            neighbors: None,
        }
    }
}

pub fn load_artifact(path: &Path) -> Result<Artifact, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Other(format!("cannot read {}: {e}", path.display())))?;
    Ok(Artifact::from_bytes(&bytes)?)
}

/// Evaluate a saved model on the config's data; optionally write the
/// similarity-shift and per-entry neighbor reports.
pub fn cmd_eval(cfg: &RunConfig, artifact: &Path, out: &Path, opts: &EvalOptions) -> Result<(Evaluation, Vec<Record>), CliError> {
    let started = Instant::now();
    let art = load_artifact(artifact)?;
    let splits = prepare_splits(cfg, cfg.seed)?;
    let split = splits
        .get(opts.fold.saturating_sub(1))
        .ok_or_else(|| CliError::Config(format!("fold {} out of range (1..={})", opts.fold, splits.len())))?;
    let data = match opts.split {
        EvalSplit::Train => &split.train,
        EvalSplit::Test => &split.test,
    };
    let model = &art.model;
    if data.input_dim() != model.spec.input_dim() || data.label_dim() != model.spec.output_dim() {
        return Err(CliError::Other(format!(
            "artifact expects {} inputs and {} outputs, data has {} and {}",
            model.spec.input_dim(),
            model.spec.output_dim(),
            data.input_dim(),
            data.label_dim()
        )));
    }
    let ev = evaluate(model, data)?;
    let mut records = vec![
        Record::header("eval", cfg),
        Record::Test {
            split: format!("{}/{}", split.name, if opts.split == EvalSplit::Train { "train" } else { "test" }),
            model: if model.is_vanilla() { "vanilla" } else { "meta" }.into(),
            seed: cfg.seed,
            metric_name: metric_name(model.task()),
            loss: ev.loss,
            metric: ev.metric,
            best_epoch: 0,
            stopped_early: false,
        },
    ];
    if opts.similarity {
        write_similarity(&out.join("similarity.csv"), model, data)?;
    }
    if let Some(k) = opts.neighbors {
        write_neighbors(&out.join("neighbors.csv"), model, &split.train, k)?;
    }
    records = finish(out, "eval.jsonl", records, started)?;
    Ok((ev, records))
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Other(e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Other(e.to_string()))
}

fn write_similarity(path: &Path, model: &MetaModel, data: &Dataset) -> Result<(), CliError> {
    let classes: Vec<usize> = (0..data.len()).map(|i| data.class_of(i)).collect();
    let report = similarity_shift_report(model, &data.inputs, &classes)?;
    let header = ["sample", "class", "before", "after"].map(String::from);
    let rows = report
        .iter()
        .enumerate()
        .map(|(i, (b, a))| vec![i.to_string(), classes[i].to_string(), b.to_string(), a.to_string()]);
    write_atomic(path, &csv_bytes(&header, rows)?)
}

fn write_neighbors(path: &Path, model: &MetaModel, train: &Dataset, k: usize) -> Result<(), CliError> {
    let dict = model
        .dict
        .as_ref()
        .ok_or_else(|| CliError::Config("neighbor report needs a model with a dictionary".into()))?;
    let features = model.embed_rows(&train.inputs)?;
    let mut rows = Vec::new();
    for entry in 0..dict.len() {
        for (rank, idx) in dict.nearest_dataset_points(entry, &features, k)?.into_iter().enumerate() {
            let label = match train.task {
                Task::Classification => train.class_of(idx).to_string(),
                Task::Regression => train.labels.row(idx)[0].to_string(),
            };
            rows.push(vec![entry.to_string(), (rank + 1).to_string(), idx.to_string(), label]);
        }
    }
    let header = ["entry", "rank", "index", "label"].map(String::from);
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// One grid point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub entries: usize,
    pub gamma: f64,
    pub seed: u64,
    /// Mean test metric over the splits; `Err` holds the failure message.
    pub metric: Result<f64, String>,
}

/// Train the meta model at every `(entries, gamma, seed)` point. A failing
/// cell is recorded and the sweep continues.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path, progress: bool) -> Result<(Vec<Cell>, Vec<Record>), CliError> {
    let started = Instant::now();
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep: missing [sweep] section".into()))?;
    let entries = or_default(sweep.entries, cfg.model.entries);
    let gammas = or_default(sweep.gamma, cfg.model.gamma);
    let seeds = or_default(sweep.seeds, cfg.seed);
    let mut cells = Vec::new();
    let mut records = vec![Record::header("sweep", cfg)];
    for &s in &entries {
        for &g in &gammas {
            for &seed in &seeds {
                let mut c = cfg.clone();
                c.model.meta = true;
                c.model.entries = s;
                c.model.gamma = g;
                c.seed = seed;
                let metric = sweep_cell(&c, seed, progress).map_err(|e| e.to_string());
                records.push(Record::Cell {
                    entries: s,
                    gamma: g,
                    seed,
                    metric_name: metric_name(cfg.task),
                    metric: metric.as_ref().ok().copied(),
                    error: metric.as_ref().err().cloned(),
                });
                cells.push(Cell { entries: s, gamma: g, seed, metric });
            }
        }
    }
    for &s in &entries {
        for &g in &gammas {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.entries == s && c.gamma == g)
                .filter_map(|c| c.metric.as_ref().ok().copied())
                .collect();
            let (mean, std, median) = mean_std_median(&vals);
            records.push(Record::Summary {
                model: format!("entries={s},gamma={g}"),
                metric_name: metric_name(cfg.task),
                count: vals.len(),
                mean,
                std,
                median,
            });
        }
    }
    let header = ["entries", "gamma", "seed", "metric", "error"].map(String::from);
    let rows = cells.iter().map(|c| {
        vec![
            c.entries.to_string(),
            c.gamma.to_string(),
            c.seed.to_string(),
            c.metric.as_ref().map(f64::to_string).unwrap_or_default(),
            c.metric.as_ref().err().cloned().unwrap_or_default(),
        ]
    });
    write_atomic(&out.join("sweep.csv"), &csv_bytes(&header, rows)?)?;
    let records = finish(out, "sweep.jsonl", records, started)?;
    Ok((cells, records))
}

fn or_default<T>(values: Vec<T>, default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values
    }
}

fn sweep_cell(cfg: &RunConfig, seed: u64, progress: bool) -> Result<f64, CliError> {
    cfg.validate()?;
    let splits = prepare_splits(cfg, seed)?;
    let mut total = 0.0;
    for split in &splits {
        let mut obs = Progress {
            enabled: progress,
            label: format!("S={} gamma={} seed={seed} {}", cfg.model.entries, cfg.model.gamma, split.name),
        };
        total += run_split(cfg, split, true, seed, &mut obs)?.test.metric;
    }
    Ok(total / splits.len() as f64)
}

struct TraceWriter {
    every: usize,
    rows: Vec<Vec<String>>,
}

impl TraceWriter {
    fn dump(&mut self, iteration: usize, model: &MetaModel) {
        let Some(d) = &model.dict else { return };
        let targets = {
            let _g = mnbr::diff::no_grad();
            d.targets().expect("valid dictionary")
        };
        for j in 0..d.len() {
            let mut row = vec![iteration.to_string(), j.to_string()];
            row.extend(d.keys.row(j).iter().map(f64::to_string));
            row.extend(d.values.row(j).iter().map(f64::to_string));
            if d.value_mode == ValueMode::SoftLabel {
                row.extend(targets.row(j).iter().map(f64::to_string));
            }
            self.rows.push(row);
        }
    }
}

impl TrainObserver for TraceWriter {
    fn on_step(&mut self, iteration: usize, model: &MetaModel) {
        if iteration.is_multiple_of(self.every) {
            self.dump(iteration, model);
        }
    }
}

/// Train on the first split and dump dictionary keys and values every
/// `trace.every` steps (and at initialization) to `trace.csv`.
pub fn cmd_trace(cfg: &RunConfig, out: &Path) -> Result<Vec<Record>, CliError> {
    let started = Instant::now();
    if !cfg.model.meta {
        return Err(CliError::Config("trace: model.meta must be true".into()));
    }
    let splits = prepare_splits(cfg, cfg.seed)?;
    let split = &splits[0];
    let model = init_model(cfg, split, true, cfg.seed)?;
    let d = model.dict.as_ref().expect("meta model");
    if d.key_dim() != 2 {
        return Err(CliError::Config(format!(
            "trace: needs a 2-dimensional dictionary, keys have {} dimensions",
            d.key_dim()
        )));
    }
    let (n_o, soft) = (d.value_dim(), d.value_mode == ValueMode::SoftLabel);
    let mut header: Vec<String> = ["iteration", "entry", "key_0", "key_1"].map(String::from).to_vec();
    header.extend((0..n_o).map(|c| format!("value_{c}")));
    if soft {
        header.extend((0..n_o).map(|c| format!("soft_{c}")));
    }
    let mut tracer = TraceWriter {
        every: cfg.trace.every,
        rows: Vec::new(),
    };
    tracer.dump(0, &model);
    let outcome = mnbr::meta::train(model, &split.train, split.validation.as_ref(), &cfg.train_config(cfg.seed), &mut tracer)?;
    write_atomic(&out.join("trace.csv"), &csv_bytes(&header, tracer.rows)?)?;
    let test = evaluate(&outcome.model, &split.test)?;
    let mut records = vec![Record::header("trace", cfg)];
    records.extend(outcome.history.iter().map(|e| Record::Epoch {
        split: split.name.clone(),
        model: "meta".into(),
        seed: cfg.seed,
        epoch: e.clone(),
    }));
    records.push(Record::Test {
        split: split.name.clone(),
        model: "meta".into(),
        seed: cfg.seed,
        metric_name: metric_name(cfg.task),
        loss: test.loss,
        metric: test.metric,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
    });
    write_atomic(&out.join("model.json"), &Artifact::new(outcome.model, None).to_bytes()?)?;
    finish(out, "metrics.jsonl", records, started)
}

/// Exact kNN on the same splits the other commands use.
pub fn cmd_knn(cfg: &RunConfig, out: &Path) -> Result<Vec<Record>, CliError> {
    let started = Instant::now();
    let mut records = vec![Record::header("knn-baseline", cfg)];
    for split in prepare_splits(cfg, cfg.seed)? {
        let pred = predict_all(&split.train, &split.test, cfg.knn.k, cfg.knn.metric)?;
        let n = split.test.len();
        // kNN has no training loss; report the zero-one error (classification)
        // or the MSE itself (regression).
        let metric = match cfg.task {
            Task::Classification => {
                let hits = (0..n)
                    .filter(|&i| mnbr::data::argmax(pred.row(i)) == split.test.class_of(i))
                    .count();
                hits as f64 / n as f64
            }
            Task::Regression => {
                let mut total = 0.0;
                for i in 0..n {
                    let row: f64 = pred.row(i).iter().zip(split.test.labels.row(i)).map(|(p, y)| (p - y).powi(2)).sum();
                    total += row / pred.cols() as f64;
                }
                total / n as f64
            }
        };
        records.push(Record::Test {
            split: split.name.clone(),
            model: format!("knn{}", cfg.knn.k),
            seed: cfg.seed,
            metric_name: metric_name(cfg.task),
            loss: if cfg.task == Task::Classification { 1.0 - metric } else { metric },
            metric,
            best_epoch: 0,
            stopped_early: false,
        });
    }
    let s = summaries(&records, cfg.task);
    records.extend(s);
    finish(out, "knn.jsonl", records, started)
}

/// Output directory: `--out`, else the config's `out`, else `runs/`.
pub fn resolve_out(cli: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs"))
}
