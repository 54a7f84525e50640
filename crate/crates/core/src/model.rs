//! Feed-forward embedding network with a linear classifier head.
//!
//! Hidden layers use ReLU; the embedding layer is linear (optionally
//! L2-normalized); logits are a linear map of the embedding. Forward keeps
//! the activations needed by the hand-written backward pass.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub init_seed: u64,
    pub l2_normalize: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64],
            embed_dim: 16,
            num_classes: 50,
            activation: Activation::Relu,
            init_seed: 0,
            l2_normalize: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("network dimensions must all be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs >= 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// (fan_in, fan_out) for every layer, classifier last.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        let mut shapes: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        shapes.push((self.embed_dim, self.num_classes));
        shapes
    }
}

/// Affine map `y = x Wᵀ + b`, weight stored as out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }
}

/// Network parameters; also used as the shape of gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Dense>,
    pub classifier: Dense,
}

impl NetParams {
    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense {
            weight: Array2::zeros(d.weight.raw_dim()),
            bias: Array1::zeros(d.bias.raw_dim()),
        };
        Self {
            layers: self.layers.iter().map(z).collect(),
            classifier: z(&self.classifier),
        }
    }

    fn dense(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain(std::iter::once(&self.classifier))
    }

    fn dense_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.layers.iter_mut().chain(std::iter::once(&mut self.classifier))
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.dense()
            .flat_map(|d| {
                [
                    d.weight.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.dense_mut()
            .flat_map(|d| {
                [
                    d.weight.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn check_shapes(&self, config: &NetConfig) -> Result<()> {
        let shapes = config.layer_shapes();
        let ok = shapes.len() == self.layers.len() + 1
            && self
                .dense()
                .zip(&shapes)
                .all(|(d, &(fi, fo))| d.weight.dim() == (fo, fi) && d.bias.len() == fo);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("parameter shapes do not match network config".into()))
        }
    }
}

/// Uniform ±sqrt(6/fan_in) weights, zero biases.
pub fn init_params(config: &NetConfig) -> Result<NetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut dense: Vec<Dense> = config
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound));
            Dense {
                weight,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    let classifier = dense.pop().expect("classifier layer");
    Ok(NetParams {
        layers: dense,
        classifier,
    })
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each embedding-stack layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each hidden layer (ReLU mask source).
    pre_activations: Vec<Array2<f64>>,
    /// Embedding before normalization, when normalization is on.
    unnormalized: Option<Array2<f64>>,
    embeddings: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
    pub cache: ForwardCache,
}

pub fn forward(config: &NetConfig, params: &NetParams, batch: ArrayView2<f64>) -> Result<ForwardOutput> {
    if batch.ncols() != config.input_dim {
        return Err(Error::Contract(format!(
            "batch has {} features, network expects {}",
            batch.ncols(),
            config.input_dim
        )));
    }
    if batch.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("non-finite input feature".into()));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(last);
    let mut h = batch.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = layer.apply(h.view());
        inputs.push(std::mem::replace(&mut h, z));
        if i < last {
            pre_activations.push(h.clone());
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    let (embeddings, unnormalized) = if config.l2_normalize {
        let mut e = h.clone();
        for mut row in e.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        (e, Some(h))
    } else {
        (h, None)
    };
    let logits = params.classifier.apply(embeddings.view());
    Ok(ForwardOutput {
        cache: ForwardCache {
            inputs,
            pre_activations,
            unnormalized,
            embeddings: embeddings.clone(),
        },
        embeddings,
        logits,
    })
}

/// Reverse-mode gradients of a loss whose upstream gradients w.r.t. the
/// embeddings and logits are given.
pub fn backward(
    params: &NetParams,
    cache: &ForwardCache,
    grad_embeddings: ArrayView2<f64>,
    grad_logits: ArrayView2<f64>,
) -> Result<NetParams> {
    let n = cache.embeddings.nrows();
    if grad_embeddings.dim() != cache.embeddings.dim()
        || grad_logits.dim() != (n, params.classifier.bias.len())
        || cache.inputs.len() != params.layers.len()
    {
        return Err(Error::Contract("backward: gradient or cache shape mismatch".into()));
    }
    let mut grads = params.zeros_like();
    grads.classifier.weight = grad_logits.t().dot(&cache.embeddings);
    grads.classifier.bias = grad_logits.sum_axis(Axis(0));
    let mut g = grad_embeddings.to_owned() + grad_logits.dot(&params.classifier.weight);
    if let Some(raw) = &cache.unnormalized {
        // d(z/|z|) = (g - e (e·g)) / |z|
        for ((mut gr, er), zr) in g.rows_mut().into_iter().zip(cache.embeddings.rows()).zip(raw.rows()) {
            let norm = zr.dot(&zr).sqrt();
            if norm > 0.0 {
                let proj = er.dot(&gr);
                gr.zip_mut_with(&er, |a, &e| *a = (*a - e * proj) / norm);
            }
        }
    }
    for i in (0..params.layers.len()).rev() {
        if i < cache.pre_activations.len() {
            g.zip_mut_with(&cache.pre_activations[i], |a, &z| {
                if z <= 0.0 {
                    *a = 0.0
                }
            });
        }
        grads.layers[i].weight = g.t().dot(&cache.inputs[i]);
        grads.layers[i].bias = g.sum_axis(Axis(0));
        if i > 0 {
            g = g.dot(&params.layers[i].weight);
        }
    }
    Ok(grads)
}

/// Forward pass keeping only the embeddings.
pub fn embed(config: &NetConfig, params: &NetParams, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(forward(config, params, features)?.embeddings)
}

#[derive(Serialize, Deserialize)]
struct DenseRecord {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<&Dense> for DenseRecord {
    fn from(d: &Dense) -> Self {
        Self {
            weight: d.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: d.bias.to_vec(),
        }
    }
}

impl TryFrom<DenseRecord> for Dense {
    type Error = Error;

    fn try_from(r: DenseRecord) -> Result<Self> {
        let rows = r.weight.len();
        let cols = r.weight.first().map_or(0, Vec::len);
        if r.weight.iter().any(|row| row.len() != cols) {
            return Err(Error::Validation("ragged weight matrix in checkpoint".into()));
        }
        let flat: Vec<f64> = r.weight.into_iter().flatten().collect();
        let weight = Array2::from_shape_vec((rows, cols), flat)
            .map_err(|e| Error::Validation(format!("checkpoint weight: {e}")))?;
        Ok(Dense {
            weight,
            bias: Array1::from(r.bias),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format_version: u32,
    config: NetConfig,
    layers: Vec<DenseRecord>,
    classifier: DenseRecord,
}

/// Network config plus parameters, stored as JSON with exact decimal round-trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub params: NetParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.record())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_record(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        serde_json::to_writer(&mut w, &self.record())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path.as_ref())?);
        Self::from_record(serde_json::from_reader(r)?)
    }

    fn record(&self) -> CheckpointRecord {
        CheckpointRecord {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            layers: self.params.layers.iter().map(DenseRecord::from).collect(),
            classifier: (&self.params.classifier).into(),
        }
    }

    fn from_record(r: CheckpointRecord) -> Result<Self> {
        if r.format_version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint version {}",
                r.format_version
            )));
        }
        r.config.validate()?;
        let params = NetParams {
            layers: r.layers.into_iter().map(Dense::try_from).collect::<Result<_>>()?,
            classifier: r.classifier.try_into()?,
        };
        params.check_shapes(&r.config)?;
        if !params.all_finite() {
            return Err(Error::Validation("checkpoint contains non-finite parameters".into()));
        }
        Ok(Self {
            config: r.config,
            params,
        })
    }
}
