//! Classifier families and the losses of the TRADES objective.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::image::{Image, ImageShape};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};

pub const MLP_HIDDEN: usize = 256;
pub const CNN_FC_HIDDEN: usize = 200;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("architecture mismatch: expected {expected}, checkpoint holds {found}")]
    ArchitectureMismatch {
        expected: Architecture,
        found: Architecture,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp,
    SmallCnn,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Linear => "linear",
            Architecture::Mlp => "mlp",
            Architecture::SmallCnn => "small_cnn",
        })
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "mlp" => Ok(Architecture::Mlp),
            "small_cnn" => Ok(Architecture::SmallCnn),
            other => Err(ModelError::Invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Per-example class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Vec<f32>,
}

impl Logits {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    /// Class scores as seen by the losses: a single logit `z` stands for
    /// the two-class pair `(0, z)`.
    fn expanded(&self) -> Vec<f32> {
        if self.values.len() == 1 {
            vec![0.0, self.values[0]]
        } else {
            self.values.clone()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.values.len().max(2)
    }

    /// Index of the largest score, first one on ties.
    pub fn predicted(&self) -> usize {
        let v = self.expanded();
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }

    pub fn l2_distance(&self, other: &Logits) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Logits, label: usize) -> Result<f32, ModelError> {
    let v = logits.expanded();
    if label >= v.len() {
        return Err(TensorError::LabelOutOfRange {
            label,
            classes: v.len(),
        }
        .into());
    }
    let (log_probs, _) = log_softmax_f64(&v);
    Ok((-log_probs[label]).max(0.0) as f32)
}

/// `KL(softmax(p) ‖ softmax(q))` with log-sum-exp stabilization.
pub fn kl_divergence(p: &Logits, q: &Logits) -> f32 {
    let (lp, pp) = log_softmax_f64(&p.expanded());
    let (lq, _) = log_softmax_f64(&q.expanded());
    let kl: f64 = pp.iter().zip(lp.iter().zip(&lq)).map(|(p, (a, b))| p * (a - b)).sum();
    kl.max(0.0) as f32
}

fn log_softmax_f64(row: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    let lp: Vec<f64> = row.iter().map(|&v| v as f64 - lse).collect();
    let p = lp.iter().map(|v| v.exp()).collect();
    (lp, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    input_shape: ImageShape,
    classes: usize,
    params: Vec<Tensor>,
}

impl Model {
    /// Kaiming-uniform (fan-in) weights, zero biases.
    pub fn new(arch: Architecture, input_shape: ImageShape, classes: usize, rng: &mut RngStream) -> Result<Self, ModelError> {
        let shapes = param_shapes(arch, input_shape, classes)?;
        let params = shapes
            .into_iter()
            .map(|(_, shape)| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                // conv weights are OIHW, dense weights are [in, out]
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.uniform_range(-bound, bound) as f32).collect();
                Tensor::new(shape, data).expect("generated to size")
            })
            .collect();
        Ok(Self {
            arch,
            input_shape,
            classes,
            params,
        })
    }

    pub fn zeros(arch: Architecture, input_shape: ImageShape, classes: usize) -> Result<Self, ModelError> {
        let params = param_shapes(arch, input_shape, classes)?
            .into_iter()
            .map(|(_, s)| Tensor::zeros(s))
            .collect();
        Ok(Self {
            arch,
            input_shape,
            classes,
            params,
        })
    }

    pub fn from_params(
        arch: Architecture,
        input_shape: ImageShape,
        classes: usize,
        params: Vec<Tensor>,
    ) -> Result<Self, ModelError> {
        let shapes = param_shapes(arch, input_shape, classes)?;
        if shapes.len() != params.len() {
            return Err(ModelError::Invalid(format!(
                "{arch} expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(ModelError::Invalid(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
            if !p.is_finite() {
                return Err(ModelError::Invalid(format!("{name} holds non-finite values")));
            }
        }
        Ok(Self {
            arch,
            input_shape,
            classes,
            params,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        param_shapes(self.arch, self.input_shape, self.classes)
            .expect("validated at construction")
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Vec<Logits>, ModelError> {
        let out = self.logits_tensor(batch)?;
        Ok(out.data().chunks(self.classes).map(|r| Logits::new(r.to_vec())).collect())
    }

    pub fn forward_image(&self, image: &Image) -> Result<Logits, ModelError> {
        Ok(self.forward(&image.to_tensor())?.remove(0))
    }

    pub fn logits_tensor(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let params = self.constant_params(&mut g);
        let x = g.constant(batch.clone());
        let out = self.build(&mut g, x, &params)?;
        Ok(g.value(out).clone())
    }

    pub fn constant_params(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    pub fn variable_params(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.variable(p.clone())).collect()
    }

    /// Records the forward pass on `g`, returning `[B, K]` logits.
    pub fn build(&self, g: &mut Graph, input: Var, params: &[Var]) -> Result<Var, ModelError> {
        let shape = g.value(input).shape().to_vec();
        let expected = self.input_shape.dims();
        if shape.len() != 4 || shape[1..] != expected {
            return Err(ModelError::InputShape {
                expected: expected.to_vec(),
                got: shape,
            });
        }
        let batch = shape[0];
        let flat = self.input_shape.len();
        match self.arch {
            Architecture::Linear => {
                let x = g.reshape(input, vec![batch, flat])?;
                let z = g.matmul(x, params[0])?;
                Ok(g.add_bias(z, params[1])?)
            }
            Architecture::Mlp => {
                let x = g.reshape(input, vec![batch, flat])?;
                let h = g.matmul(x, params[0])?;
                let h = g.add_bias(h, params[1])?;
                let h = g.relu(h)?;
                let z = g.matmul(h, params[2])?;
                Ok(g.add_bias(z, params[3])?)
            }
            Architecture::SmallCnn => {
                let mut h = input;
                for (i, pool) in [(0, false), (2, true), (4, false), (6, true)] {
                    h = g.conv2d(h, params[i], params[i + 1])?;
                    h = g.relu(h)?;
                    if pool {
                        h = g.maxpool2(h)?;
                    }
                }
                let feat: usize = g.value(h).shape()[1..].iter().product();
                let h = g.reshape(h, vec![batch, feat])?;
                let h = g.matmul(h, params[8])?;
                let h = g.add_bias(h, params[9])?;
                let h = g.relu(h)?;
                let z = g.matmul(h, params[10])?;
                Ok(g.add_bias(z, params[11])?)
            }
        }
    }

    /// Logits in the form the loss ops consume (binary expansion for K = 1).
    pub fn loss_logits(&self, g: &mut Graph, logits: Var) -> Result<Var, ModelError> {
        if self.classes == 1 {
            Ok(g.binary_logits(logits)?)
        } else {
            Ok(logits)
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut file)
    }

    pub fn write_checkpoint(&self, out: &mut impl Write) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            architecture: self.arch,
            input_shape: self.input_shape.dims(),
            classes: self.classes,
            tensors: self
                .param_names()
                .into_iter()
                .zip(&self.params)
                .map(|(name, p)| TensorEntry {
                    name,
                    shape: p.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for p in &self.params {
            for v in p.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(input: &mut impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(ModelError::Checkpoint(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(ModelError::Checkpoint("header version disagrees with preamble".into()));
        }
        let [c, h, w] = header.input_shape;
        let input_shape = ImageShape::new(c, h, w);
        let mut params = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            input.read_exact(&mut bytes).map_err(|e| {
                ModelError::Checkpoint(format!("tensor {} truncated: {e}", entry.name))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.push(Tensor::new(entry.shape.clone(), data)?);
        }
        Self::from_params(header.architecture, input_shape, header.classes, params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RLCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    architecture: Architecture,
    input_shape: [usize; 3],
    classes: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn param_shapes(arch: Architecture, input: ImageShape, classes: usize) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
    if classes == 0 || input.is_empty() {
        return Err(ModelError::Invalid(format!("degenerate model: input {input:?}, {classes} classes")));
    }
    let d = input.len();
    let named = |n: &str, s: Vec<usize>| (n.to_string(), s);
    Ok(match arch {
        Architecture::Linear => vec![named("fc.weight", vec![d, classes]), named("fc.bias", vec![classes])],
        Architecture::Mlp => vec![
            named("fc1.weight", vec![d, MLP_HIDDEN]),
            named("fc1.bias", vec![MLP_HIDDEN]),
            named("fc2.weight", vec![MLP_HIDDEN, classes]),
            named("fc2.bias", vec![classes]),
        ],
        Architecture::SmallCnn => {
            let spatial = |s: usize| -> Option<usize> {
                let p1 = s.checked_sub(4)? / 2;
                let p2 = p1.checked_sub(4)? / 2;
                (p2 > 0).then_some(p2)
            };
            let (Some(h), Some(w)) = (spatial(input.height), spatial(input.width)) else {
                return Err(ModelError::Invalid(format!("input {input:?} too small for small_cnn")));
            };
            let c = input.channels;
            vec![
                named("conv1.weight", vec![32, c, 3, 3]),
                named("conv1.bias", vec![32]),
                named("conv2.weight", vec![32, 32, 3, 3]),
                named("conv2.bias", vec![32]),
                named("conv3.weight", vec![64, 32, 3, 3]),
                named("conv3.bias", vec![64]),
                named("conv4.weight", vec![64, 64, 3, 3]),
                named("conv4.bias", vec![64]),
                named("fc1.weight", vec![64 * h * w, CNN_FC_HIDDEN]),
                named("fc1.bias", vec![CNN_FC_HIDDEN]),
                named("fc2.weight", vec![CNN_FC_HIDDEN, classes]),
                named("fc2.bias", vec![classes]),
            ]
        }
    })
}
