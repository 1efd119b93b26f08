//! The local model: an MLP encoder followed by a linear classifier.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed::{rng_for, Stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Version tag written into every snapshot file.
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing gradient for {0}; run backward before stepping")]
    MissingGrad(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("snapshot format: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            hidden: vec![64],
            feature_dim: 16,
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    /// Short stable digest of the architecture.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.feature_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// in × out
    pub weight: Tensor,
    /// 1 × out
    pub bias: Tensor,
}

impl Linear {
    fn kaiming(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::new(fan_in, fan_out, data).expect("sized"),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

/// Encoder layers; ReLU follows every layer except the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Linear>,
}

impl EncoderParams {
    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// d × K
    pub weight: Tensor,
    /// 1 × K
    pub bias: Tensor,
}

impl ClassifierParams {
    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor, TensorError> {
        features.matmul(&self.weight)?.add_row(&self.bias)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Model {
        let mut rng = rng_for(Stream::ModelInit, &[seed]);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Linear::kaiming(i, o, &mut rng))
            .collect();
        let head = Linear::kaiming(config.feature_dim, config.num_classes, &mut rng);
        Model {
            encoder: EncoderParams { layers },
            classifier: ClassifierParams {
                weight: head.weight,
                bias: head.bias,
            },
        }
    }

    /// Features without recording a tape.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut h = x.clone();
        let last = self.encoder.layers.len().saturating_sub(1);
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.map(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        Ok(h)
    }

    pub fn classify(&self, features: &Tensor) -> Result<Tensor, TensorError> {
        self.classifier.logits(features)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.classify(&self.encode(x)?)
    }

    /// Records all parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let encoder = self
            .encoder
            .layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        let classifier = (
            tape.param(self.classifier.weight.clone()),
            tape.param(self.classifier.bias.clone()),
        );
        BoundModel {
            encoder,
            classifier,
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for l in &self.encoder.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    /// All parameters in layer order: encoder (weight, bias)..., classifier weight, bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    /// Inverse of [`Model::flatten`] onto this model's shapes.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::Architecture(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Architecture this model instantiates.
    pub fn config(&self) -> ModelConfig {
        let layers = &self.encoder.layers;
        ModelConfig {
            input_dim: layers.first().map_or(0, |l| l.weight.rows()),
            hidden: layers[..layers.len().saturating_sub(1)]
                .iter()
                .map(|l| l.weight.cols())
                .collect(),
            feature_dim: self.encoder.feature_dim(),
            num_classes: self.classifier.num_classes(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Tape handles for one forward pass of a [`Model`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    encoder: Vec<(Var, Var)>,
    classifier: (Var, Var),
}

impl BoundModel {
    /// Rebuilds handles from vars laid out like [`Model::flatten`]:
    /// a (weight, bias) pair per encoder layer, then the classifier pair.
    pub fn from_vars(vars: &[Var]) -> Result<BoundModel, ModelError> {
        if vars.len() < 4 || !vars.len().is_multiple_of(2) {
            return Err(ModelError::Architecture(format!(
                "{} parameter handles cannot form an encoder and a classifier",
                vars.len()
            )));
        }
        let (enc, head) = vars.split_at(vars.len() - 2);
        Ok(BoundModel {
            encoder: enc.chunks(2).map(|c| (c[0], c[1])).collect(),
            classifier: (head[0], head[1]),
        })
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        let last = self.encoder.len().saturating_sub(1);
        for (i, &(w, b)) in self.encoder.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row_bias(z, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn classify(&self, tape: &mut Tape, features: Var) -> Result<Var, TensorError> {
        let (w, b) = self.classifier;
        let z = tape.matmul(features, w)?;
        tape.add_row_bias(z, b)
    }

    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.encoder {
            out.push(w);
            out.push(b);
        }
        out.push(self.classifier.0);
        out.push(self.classifier.1);
        out
    }
}

/// `p ← p − lr·(grad + weight_decay·p)` using gradients from `tape`.
pub fn sgd_step(
    model: &mut Model,
    bound: &BoundModel,
    tape: &Tape,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<(), ModelError> {
    let grads = bound
        .vars()
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            tape.grad(v)
                .ok_or_else(|| ModelError::MissingGrad(format!("parameter tensor #{i}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (param, grad) in model.tensors_mut().into_iter().zip(grads) {
        if param.shape() != grad.shape() {
            return Err(ModelError::Architecture(
                "gradient shape differs from parameter".into(),
            ));
        }
        for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p -= learning_rate * (g + weight_decay * *p);
        }
    }
    Ok(())
}

/// Immutable copy of a model as exchanged between parties.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub model: Model,
    pub origin_client: usize,
    pub round: usize,
}

/// On-disk form: fields are written in this order.
#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format_version: u32,
    config_hash: String,
    round: usize,
    origin: usize,
    config: ModelConfig,
    params: Vec<f64>,
}

impl ModelSnapshot {
    pub fn new(model: Model, origin_client: usize, round: usize) -> Self {
        ModelSnapshot {
            model,
            origin_client,
            round,
        }
    }

    fn to_file(&self) -> SnapshotFile {
        let config = self.model.config();
        SnapshotFile {
            format_version: SNAPSHOT_FORMAT_VERSION,
            config_hash: config.hash(),
            round: self.round,
            origin: self.origin_client,
            config,
            params: self.model.flatten(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("snapshot serializes")
    }

    /// The same document as [`ModelSnapshot::to_json`], for embedding.
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self.to_file()).expect("snapshot serializes")
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ModelError> {
        let file: SnapshotFile =
            serde_json::from_value(value).map_err(|e| ModelError::Format(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: SnapshotFile =
            serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        Self::from_file(file)
    }

    fn from_file(file: SnapshotFile) -> Result<Self, ModelError> {
        if file.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported version {}",
                file.format_version
            )));
        }
        if file.config.hash() != file.config_hash {
            return Err(ModelError::Format(
                "config hash does not match config".into(),
            ));
        }
        let mut model = Model::init(&file.config, 0);
        model.load_flat(&file.params)?;
        Ok(ModelSnapshot::new(model, file.origin, file.round))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
