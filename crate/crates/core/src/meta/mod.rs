//! The bilevel core: per-query fine-tuning of the head against the
//! dictionary, meta-training through that fine-tuning, and test-time
//! adaptation.
//!
//! A [`MetaModel`] holds every trainable group:
//!
//! | group | role |
//! |---|---|
//! | `theta` | optional feature extractor `mu_theta` |
//! | `phi`, `tau_phi` | head fine-tuned per query, and its cosine temperature |
//! | `xi`, `tau_xi` | auxiliary head trained on extractor features, never fine-tuned |
//! | `keys`, `values` | the neighbor dictionary |
//! | `alpha` | inner step size, scalar or one per element of `phi` |
//!
//! A model without a dictionary is the plain (vanilla) network.

mod artifact;
mod check;
mod loss;
mod train;


use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::diff::{no_grad, Tensor};
use crate::dictionary::{Metric, NeighborDictionary, ValueMode};
use crate::error::{Error, Result};
use crate::estimator::{extract_features, mlp_forward, HeadSpec, MlpSpec, OutputLayer, Task};

pub use artifact::{Artifact, Normalization, FORMAT_VERSION};
pub use check::{finite_difference_check, GroupCheck, Objective};
pub use loss::{
    aux_loss, fine_tune, inner_loss, inner_loss_at, inner_loss_from_neighbors, outer_loss,
    predict, similarity_shift_report, total_loss, vanilla_loss, TaskBatch,
};
pub use train::{
    evaluate, train, EpochRecord, Evaluation, OptimizerKind, OptimizerSpec, TrainConfig,
    TrainObserver, TrainOutcome,
};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// One step size shared by every element of `phi`.
    Scalar,
    /// One step size per element of `phi`.
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionarySpec {
    pub entries: usize,
    pub metric: Metric,
    pub gamma: f64,
    pub value_mode: ValueMode,
}

/// Architecture and hyperparameters; everything needed to rebuild a model's
/// parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub task: Task,
    /// Feature extractor. Absent: the head and dictionary work on raw inputs.
    pub extractor: Option<MlpSpec>,
    pub head: HeadSpec,
    /// Absent: a vanilla model, no fine-tuning.
    pub dictionary: Option<DictionarySpec>,
    pub alpha_mode: AlphaMode,
    pub alpha_init: f64,
    pub tau_init: f64,
    /// Weight of the auxiliary head's loss. Only used with an extractor.
    pub lambda: f64,
    pub inner_steps: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model", msg));
        self.head.validate()?;
        if let Some(e) = &self.extractor {
            e.validate()?;
            if e.output_dim() != self.head.input_dim {
                return bad(format!(
                    "extractor output width {} does not match head input width {}",
                    e.output_dim(),
                    self.head.input_dim
                ));
            }
        }
        if self.task == Task::Classification && self.head.output_dim < 2 {
            return bad("classification needs at least two outputs".into());
        }
        if let Some(d) = &self.dictionary {
            if d.entries == 0 {
                return bad("dictionary needs at least one entry".into());
            }
            if !(d.gamma > 0.0 && d.gamma.is_finite()) {
                return bad(format!("gamma must be positive, got {}", d.gamma));
            }
            let expected = match self.task {
                Task::Classification => ValueMode::SoftLabel,
                Task::Regression => ValueMode::Raw,
            };
            if d.value_mode != expected {
                return bad(format!("{:?} needs {:?} dictionary values", self.task, expected));
            }
        }
        if !self.alpha_init.is_finite() {
            return bad("alpha_init must be finite".into());
        }
        if self.head.output == OutputLayer::Cosine && !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return bad(format!("tau_init must be positive, got {}", self.tau_init));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.as_ref().map_or(self.head.input_dim, MlpSpec::input_dim)
    }

    /// Width of the space the dictionary keys live in.
    pub fn embed_dim(&self) -> usize {
        self.head.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim
    }

    fn uses_tau(&self) -> bool {
        self.head.output == OutputLayer::Cosine
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Theta,
    Phi,
    TauPhi,
    Xi,
    TauXi,
    Keys,
    Values,
    Alpha,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Theta,
        ParamGroup::Phi,
        ParamGroup::TauPhi,
        ParamGroup::Xi,
        ParamGroup::TauXi,
        ParamGroup::Keys,
        ParamGroup::Values,
        ParamGroup::Alpha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Theta => "theta",
            ParamGroup::Phi => "phi",
            ParamGroup::TauPhi => "tau_phi",
            ParamGroup::Xi => "xi",
            ParamGroup::TauXi => "tau_xi",
            ParamGroup::Keys => "keys",
            ParamGroup::Values => "values",
            ParamGroup::Alpha => "alpha",
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaModel {
    pub spec: ModelSpec,
    pub theta: Vec<Tensor>,
    pub phi: Vec<Tensor>,
    pub tau_phi: Option<Tensor>,
    /// Present exactly when there is an extractor.
    pub xi: Vec<Tensor>,
    pub tau_xi: Option<Tensor>,
    pub dict: Option<NeighborDictionary>,
    /// One scalar tensor, or one tensor per `phi` tensor with its shape.
    pub alpha: Vec<Tensor>,
}

impl MetaModel {
    /// Fresh parameters. `label_range` (per-column min and max), when given for
    /// a regression model, makes dictionary values uniform over that range
    /// instead of Gaussian.
    pub fn init(spec: ModelSpec, label_range: Option<(&[f64], &[f64])>, rng: &mut crate::Rng) -> Result<Self> {
        spec.validate()?;
        let theta = match &spec.extractor {
            Some(e) => e.init(rng)?,
            None => Vec::new(),
        };
        let phi = spec.head.init(rng)?;
        let xi = if spec.extractor.is_some() {
            spec.head.init(rng)?
        } else {
            Vec::new()
        };
        let tau = || spec.uses_tau().then(|| Tensor::scalar(spec.tau_init));
        let dict = match &spec.dictionary {
            Some(d) => {
                let mut dict = NeighborDictionary::init(
                    d.entries,
                    spec.embed_dim(),
                    spec.output_dim(),
                    d.metric,
                    d.gamma,
                    d.value_mode,
                    rng,
                )?;
                if let (ValueMode::Raw, Some((lo, hi))) = (d.value_mode, label_range) {
                    dict = dict.with_uniform_values(lo, hi, rng)?;
                }
                Some(dict)
            }
            None => None,
        };
        let alpha = match spec.alpha_mode {
            AlphaMode::Scalar => vec![Tensor::scalar(spec.alpha_init)],
            AlphaMode::Diagonal => phi.iter().map(|p| Tensor::full(p.shape(), spec.alpha_init)).collect(),
        };
        Ok(MetaModel {
            tau_phi: tau(),
            tau_xi: if spec.extractor.is_some() { tau() } else { None },
            spec,
            theta,
            phi,
            xi,
            dict,
            alpha,
        })
    }

    /// The same network with the dictionary removed: no fine-tuning.
    pub fn vanilla(&self) -> MetaModel {
        let mut m = self.clone();
        m.dict = None;
        m.spec.dictionary = None;
        m
    }

    pub fn is_vanilla(&self) -> bool {
        self.dict.is_none()
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    /// Every trainable tensor in a fixed order, with its group.
    pub fn parameters(&self) -> Vec<(ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        out.extend(self.theta.iter().map(|t| (ParamGroup::Theta, t)));
        out.extend(self.phi.iter().map(|t| (ParamGroup::Phi, t)));
        out.extend(self.tau_phi.iter().map(|t| (ParamGroup::TauPhi, t)));
        out.extend(self.xi.iter().map(|t| (ParamGroup::Xi, t)));
        out.extend(self.tau_xi.iter().map(|t| (ParamGroup::TauXi, t)));
        if let Some(d) = &self.dict {
            out.push((ParamGroup::Keys, &d.keys));
            out.push((ParamGroup::Values, &d.values));
            out.extend(self.alpha.iter().map(|t| (ParamGroup::Alpha, t)));
        }
        out
    }

    pub fn parameter_tensors(&self) -> Vec<Tensor> {
        self.parameters().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuild with every parameter replaced by `f(group, tensor)`, in
    /// [`parameters`](Self::parameters) order.
    pub fn map_parameters(&self, mut f: impl FnMut(ParamGroup, &Tensor) -> Tensor) -> MetaModel {
        let mut m = self.clone();
        let map = |v: &mut Vec<Tensor>, g: ParamGroup, f: &mut dyn FnMut(ParamGroup, &Tensor) -> Tensor| {
            for t in v.iter_mut() {
                *t = f(g, t);
            }
        };
        map(&mut m.theta, ParamGroup::Theta, &mut f);
        map(&mut m.phi, ParamGroup::Phi, &mut f);
        if let Some(t) = &mut m.tau_phi {
            *t = f(ParamGroup::TauPhi, t);
        }
        map(&mut m.xi, ParamGroup::Xi, &mut f);
        if let Some(t) = &mut m.tau_xi {
            *t = f(ParamGroup::TauXi, t);
        }
        if let Some(d) = &mut m.dict {
            d.keys = f(ParamGroup::Keys, &d.keys);
            d.values = f(ParamGroup::Values, &d.values);
            map(&mut m.alpha, ParamGroup::Alpha, &mut f);
        }
        m
    }

    /// Copy whose parameters are fresh differentiable leaves.
    pub fn with_grad_leaves(&self) -> MetaModel {
        self.map_parameters(|_, t| t.requires_grad())
    }

    /// Copy whose parameters are constants, detached from any graph.
    pub fn detached(&self) -> MetaModel {
        self.map_parameters(|_, t| t.detach())
    }

    /// Copy with parameter values taken from `values`, in parameter order.
    pub fn with_values(&self, values: &[Vec<f64>]) -> Result<MetaModel> {
        let n = self.parameters().len();
        if values.len() != n {
            return Err(Error::invalid("model", format!("expected {n} buffers, got {}", values.len())));
        }
        let mut it = values.iter();
        let mut failed = None;
        let m = self.map_parameters(|g, t| {
            let v = it.next().expect("length checked");
            match Tensor::new(v.clone(), t.shape()) {
                Ok(nt) => nt,
                Err(e) => {
                    failed.get_or_insert((g, e));
                    t.clone()
                }
            }
        });
        match failed {
            Some((_, e)) => Err(e),
            None => Ok(m),
        }
    }

    /// `[B, d] -> [B, m]`: extractor features, or the inputs themselves.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2("embed")?;
        if d != self.spec.input_dim() {
            return Err(Error::shape("embed", x.shape(), &[self.spec.input_dim()]));
        }
        match &self.spec.extractor {
            Some(e) => mlp_forward(e, &self.theta, x),
            None => Ok(x.clone()),
        }
    }

    /// Embeddings of plain input rows, without recording a graph.
    pub fn embed_rows(&self, inputs: &Matrix) -> Result<Matrix> {
        let _g = no_grad();
        let z = match &self.spec.extractor {
            Some(e) => extract_features(e, &self.theta, &inputs.to_tensor())?,
            None => inputs.to_tensor(),
        };
        Matrix::new(z.shape()[0], z.shape()[1], z.to_vec())
    }

    /// Head outputs under parameters `phi` (the shared ones or a fine-tuned copy).
    pub fn head_forward(&self, phi: &[Tensor], z: &Tensor) -> Result<Tensor> {
        self.spec.head.forward(phi, self.tau_phi.as_ref(), z)
    }

    pub fn aux_forward(&self, z: &Tensor) -> Result<Tensor> {
        if self.xi.is_empty() {
            return Err(Error::invalid("aux head", "model has no auxiliary head"));
        }
        self.spec.head.forward(&self.xi, self.tau_xi.as_ref(), z)
    }

    pub(crate) fn dictionary(&self) -> Result<&NeighborDictionary> {
        self.dict
            .as_ref()
            .ok_or_else(|| Error::invalid("meta", "model has no dictionary"))
    }
}
