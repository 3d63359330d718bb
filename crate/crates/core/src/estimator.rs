//! Parametric networks: MLP feature extractors and output heads.
//!
//! Everything here is functional: parameters are passed in as a slice of
//! tensors, so the same code evaluates the shared starting head `phi` and any
//! per-query fine-tuned copy `phi_i`.
//!
//! Dense layers store their weight as `[fan_in, fan_out]` and compute
//! `x W + b`. A cosine output layer stores one weight row per class,
//! `[n_o, fan_in]`, and computes `tau * cos(x, w_j)`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

/// Clamp applied to probabilities before taking logs in [`supervised_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Fully connected ReLU network, `dims = [input, hidden..., output]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    /// Apply ReLU after the last layer too. Must be false when the output
    /// feeds a cosine head, so features can take either sign.
    pub final_relu: bool,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::invalid(
                "mlp",
                format!("layer widths {:?} need at least two positive entries", self.dims),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.dims
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }

    /// He-normal weights, zero biases.
    pub fn init(&self, rng: &mut crate::Rng) -> Result<Vec<Tensor>> {
        self.validate()?;
        let mut out = Vec::new();
        for w in self.dims.windows(2) {
            out.push(normal_matrix(w[0], w[1], (2.0 / w[0] as f64).sqrt(), rng)?);
            out.push(Tensor::zeros(&[w[1]]));
        }
        Ok(out)
    }
}

/// `[B, d] -> [B, n_z]`.
pub fn mlp_forward(spec: &MlpSpec, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let layers = spec.dims.len() - 1;
    if params.len() != 2 * layers {
        return Err(Error::invalid(
            "mlp",
            format!("expected {} parameter tensors, got {}", 2 * layers, params.len()),
        ));
    }
    let (_, d) = x.dims2("mlp")?;
    if d != spec.input_dim() {
        return Err(Error::shape("mlp", x.shape(), &[spec.input_dim()]));
    }
    let mut h = x.clone();
    for l in 0..layers {
        h = h.matmul(&params[2 * l])?.add_row_vector(&params[2 * l + 1])?;
        if l + 1 < layers || spec.final_relu {
            h = h.relu();
        }
    }
    Ok(h)
}

/// Feature embedding of a batch of inputs (or of a single `[d]` input, which
/// yields `[n_z]`).
pub fn extract_features(spec: &MlpSpec, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
    if x.rank() == 1 {
        let z = mlp_forward(spec, params, &x.reshape(&[1, x.numel()])?)?;
        return z.reshape(&[spec.output_dim()]);
    }
    mlp_forward(spec, params, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputLayer {
    Dot,
    Cosine,
}

/// Optional hidden ReLU layers followed by a dot-product or cosine output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub output: OutputLayer,
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("head", "layer widths must be positive"));
        }
        Ok(())
    }

    fn trunk(&self) -> Option<MlpSpec> {
        if self.hidden.is_empty() {
            return None;
        }
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        Some(MlpSpec {
            dims,
            final_relu: true,
        })
    }

    /// Width of the vector entering the output layer.
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.trunk().map(|t| t.param_shapes()).unwrap_or_default();
        let h = self.feature_dim();
        match self.output {
            OutputLayer::Dot => {
                shapes.push(vec![h, self.output_dim]);
                shapes.push(vec![self.output_dim]);
            }
            OutputLayer::Cosine => shapes.push(vec![self.output_dim, h]),
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn init(&self, rng: &mut crate::Rng) -> Result<Vec<Tensor>> {
        self.validate()?;
        let mut params = match self.trunk() {
            Some(t) => t.init(rng)?,
            None => Vec::new(),
        };
        let h = self.feature_dim();
        match self.output {
            OutputLayer::Dot => {
                params.push(normal_matrix(h, self.output_dim, (1.0 / h as f64).sqrt(), rng)?);
                params.push(Tensor::zeros(&[self.output_dim]));
            }
            OutputLayer::Cosine => {
                params.push(normal_matrix(self.output_dim, h, (1.0 / h as f64).sqrt(), rng)?)
            }
        }
        Ok(params)
    }

    fn trunk_len(&self) -> usize {
        2 * self.hidden.len()
    }

    /// Input to the output layer, `[B, feature_dim]`.
    pub fn features(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        match self.trunk() {
            Some(t) => mlp_forward(&t, &params[..self.trunk_len()], x),
            None => {
                let (_, d) = x.dims2("head")?;
                if d != self.input_dim {
                    return Err(Error::shape("head", x.shape(), &[self.input_dim]));
                }
                Ok(x.clone())
            }
        }
    }

    /// Logits (classification) or predictions (regression), `[B, n_o]`.
    /// `tau` is required for a cosine output layer and ignored otherwise.
    pub fn forward(&self, params: &[Tensor], tau: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
        let h = self.features(params, x)?;
        let tail = &params[self.trunk_len()..];
        match self.output {
            OutputLayer::Dot => h.matmul(&tail[0])?.add_row_vector(&tail[1]),
            OutputLayer::Cosine => {
                let tau = tau.ok_or_else(|| Error::invalid("head", "cosine output needs tau"))?;
                cosine_similarities(&tail[0], &h)?.mul_scalar(tau)
            }
        }
    }

    /// Class weight rows of a cosine output layer, `[n_o, feature_dim]`.
    pub fn class_weights<'a>(&self, params: &'a [Tensor]) -> Option<&'a Tensor> {
        match self.output {
            OutputLayer::Cosine => params.last(),
            OutputLayer::Dot => None,
        }
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::invalid(
                "head",
                format!("expected {} parameter tensors, got {}", shapes.len(), params.len()),
            ));
        }
        for (p, s) in params.iter().zip(&shapes) {
            if p.shape() != s.as_slice() {
                return Err(Error::shape("head", p.shape(), s));
            }
        }
        Ok(())
    }
}

/// `r[b, j] = cos(z_b, w_j)` for class rows `w [n_o, n_z]` and features `z [B, n_z]`.
pub fn cosine_similarities(w: &Tensor, z: &Tensor) -> Result<Tensor> {
    let zn = z.norm_rows()?;
    if zn.data().contains(&0.0) {
        return Err(Error::ZeroNorm("feature vector"));
    }
    let wn = w.norm_rows()?;
    if wn.data().contains(&0.0) {
        return Err(Error::ZeroNorm("class weight"));
    }
    z.normalize_rows()?.matmul(&w.normalize_rows()?.transpose()?)
}

/// Class probabilities `softmax(tau * cos(z, w_j))` for a single feature vector `[n_z]`.
pub fn cosine_logits(w: &Tensor, tau: &Tensor, z: &Tensor) -> Result<Tensor> {
    let z2 = z.reshape(&[1, z.numel()])?;
    let r = cosine_similarities(w, &z2)?;
    r.mul_scalar(tau)?.softmax_rows()?.reshape(&[w.shape()[0]])
}

/// Mean supervised loss over a batch of predictions `[B, n_o]`.
///
/// Classification takes class probabilities and (possibly soft) target
/// distributions and returns the cross-entropy, with probabilities clamped
/// below at [`PROB_FLOOR`]. Regression returns the squared error averaged over
/// output columns and rows.
pub fn supervised_loss(prediction: &Tensor, target: &Tensor, task: Task) -> Result<Tensor> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape("supervised_loss", prediction.shape(), target.shape()));
    }
    let (b, n) = prediction.dims2("supervised_loss")?;
    let total = match task {
        Task::Classification => target.mul(&prediction.clamp_min(PROB_FLOOR).ln())?.sum().neg(),
        Task::Regression => prediction.sub(target)?.square().sum().scale(1.0 / n as f64),
    };
    Ok(total.scale(1.0 / b as f64))
}

/// Per-row loss of raw head outputs `[B, n_o]` against targets, shape `[B]`.
///
/// Classification outputs are logits and go through a log-softmax, so no
/// probability clamp is needed on this path.
pub fn row_losses(outputs: &Tensor, targets: &Tensor, task: Task) -> Result<Tensor> {
    if outputs.shape() != targets.shape() {
        return Err(Error::shape("row_losses", outputs.shape(), targets.shape()));
    }
    let (_, n) = outputs.dims2("row_losses")?;
    match task {
        Task::Classification => Ok(targets.mul(&outputs.log_softmax_rows()?)?.sum_cols()?.neg()),
        Task::Regression => Ok(outputs.sub(targets)?.square().sum_cols()?.scale(1.0 / n as f64)),
    }
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut crate::Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}
