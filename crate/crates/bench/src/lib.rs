//! Shared fixtures for the benchmarks.

use mnbr::data::generate_spirals;
use mnbr::meta::{DictionarySpec, TaskBatch};
use mnbr::{AlphaMode, HeadSpec, MetaModel, Metric, MlpSpec, ModelSpec, OutputLayer, Task, ValueMode};

/// Feature-space classifier with `entries` dictionary entries.
pub fn feature_model(entries: usize, metric: Metric) -> MetaModel {
    let spec = ModelSpec {
        task: Task::Classification,
        extractor: Some(MlpSpec { dims: vec![2, 32, 16], final_relu: false }),
        head: HeadSpec { input_dim: 16, hidden: vec![], output_dim: 2, output: OutputLayer::Cosine },
        dictionary: Some(DictionarySpec { entries, metric, gamma: 5.0, value_mode: ValueMode::SoftLabel }),
        alpha_mode: AlphaMode::Scalar,
        alpha_init: 0.1,
        tau_init: 10.0,
        lambda: 1.0,
        inner_steps: 1,
    };
    MetaModel::init(spec, None, &mut mnbr::rng(0)).expect("valid spec")
}

pub fn spiral_batch(size: usize) -> TaskBatch {
    let d = generate_spirals(size.div_ceil(2), 0.1, 2.0, 0).expect("valid spiral");
    let idx: Vec<usize> = (0..size).collect();
    TaskBatch::from_dataset(&d, &idx).expect("rows exist")
}
