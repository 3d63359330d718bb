//! Versioned, byte-stable JSON model files.

use serde::{Deserialize, Serialize};

use super::{MetaModel, ModelSpec};
use crate::data::Standardizer;
use crate::diff::Tensor;
use crate::dictionary::NeighborDictionary;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Input (and, for regression, label) standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub inputs: Standardizer,
    pub labels: Option<Standardizer>,
}

/// A model plus the normalization its inputs expect.
#[derive(Clone, Debug)]
pub struct Artifact {
    pub model: MetaModel,
    pub normalization: Option<Normalization>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredDictionary {
    keys: StoredTensor,
    values: StoredTensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactFile {
    format_version: u32,
    spec: ModelSpec,
    theta: Vec<StoredTensor>,
    phi: Vec<StoredTensor>,
    tau_phi: Option<f64>,
    xi: Vec<StoredTensor>,
    tau_xi: Option<f64>,
    dictionary: Option<StoredDictionary>,
    alpha: Vec<StoredTensor>,
    normalization: Option<Normalization>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn store(t: &Tensor) -> StoredTensor {
    StoredTensor {
        shape: t.shape().to_vec(),
        data: t.to_vec(),
    }
}

fn load(t: StoredTensor) -> Result<Tensor> {
    Tensor::new(t.data, &t.shape)
}

fn load_all(ts: Vec<StoredTensor>) -> Result<Vec<Tensor>> {
    ts.into_iter().map(load).collect()
}

impl Artifact {
    pub fn new(model: MetaModel, normalization: Option<Normalization>) -> Self {
        Artifact { model, normalization }
    }

    /// Serialize to pretty-printed JSON. Saving, loading and saving again
    /// yields identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        if let Some((g, _)) = m.parameters().into_iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite {
                what: "model parameter",
                context: format!("group {}", g.name()),
            });
        }
        let file = ArtifactFile {
            format_version: FORMAT_VERSION,
            spec: m.spec.clone(),
            theta: m.theta.iter().map(store).collect(),
            phi: m.phi.iter().map(store).collect(),
            tau_phi: m.tau_phi.as_ref().map(Tensor::item),
            xi: m.xi.iter().map(store).collect(),
            tau_xi: m.tau_xi.as_ref().map(Tensor::item),
            dictionary: m.dict.as_ref().map(|d| StoredDictionary {
                keys: store(&d.keys),
                values: store(&d.values),
            }),
            alpha: m.alpha.iter().map(store).collect(),
            normalization: self.normalization.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_slice(bytes)?;
        if probe.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: probe.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let f: ArtifactFile = serde_json::from_slice(bytes)?;
        f.spec.validate()?;
        let dict = match (f.dictionary, &f.spec.dictionary) {
            (Some(d), Some(ds)) => Some(NeighborDictionary::new(
                load(d.keys)?,
                load(d.values)?,
                ds.metric,
                ds.gamma,
                ds.value_mode,
            )?),
            (None, None) => None,
            _ => return Err(Error::invalid("artifact", "dictionary does not match its spec")),
        };
        let model = MetaModel {
            theta: load_all(f.theta)?,
            phi: load_all(f.phi)?,
            tau_phi: f.tau_phi.map(Tensor::scalar),
            xi: load_all(f.xi)?,
            tau_xi: f.tau_xi.map(Tensor::scalar),
            dict,
            alpha: load_all(f.alpha)?,
            spec: f.spec,
        };
        check_layout(&model)?;
        Ok(Artifact {
            model,
            normalization: f.normalization,
        })
    }
}

/// Parameter shapes must be exactly what the spec would initialize.
fn check_layout(m: &MetaModel) -> Result<()> {
    let mut rng = crate::rng(0);
    let fresh = MetaModel::init(m.spec.clone(), None, &mut rng)?;
    let got: Vec<_> = m.parameters().iter().map(|(g, t)| (*g, t.shape().to_vec())).collect();
    let want: Vec<_> = fresh.parameters().iter().map(|(g, t)| (*g, t.shape().to_vec())).collect();
    if got != want {
        return Err(Error::invalid("artifact", "parameter shapes do not match the model spec"));
    }
    Ok(())
}
