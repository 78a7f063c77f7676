//! Feature extractor plus linear classifier head.
//!
//! The extractor is a stack of affine layers with ReLU between them; its last
//! layer is linear and produces the `feature_dim`-wide representation. The
//! classifier maps features to `class_count` logits, and `forward` returns the
//! softmax of those logits alongside the raw features.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EcanError, Result};
use crate::grad::{Tape, Tensor, Var};

const MODEL_FORMAT: &str = "ecan-model";
const MODEL_VERSION: u32 = 1;

/// Layer widths of an [`EcanModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, feature_dim: usize, class_count: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden,
            feature_dim,
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain([self.feature_dim, self.class_count]);
        if widths.into_iter().any(|w| w == 0) {
            return Err(EcanError::Config(format!(
                "layer widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every extractor layer followed by the classifier.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.feature_dim);
        let mut dims: Vec<_> = widths.windows(2).map(|w| (w[0], w[1])).collect();
        dims.push((self.feature_dim, self.class_count));
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in x fan_out`.
    pub weight: Tensor,
    /// Length `fan_out`.
    pub bias: Tensor,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a)
            .map_err(|e| EcanError::Config(format!("init range: {e}")))?;
        let weight = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Ok(Linear {
            weight: Tensor::matrix(fan_in, fan_out, weight)?,
            bias: Tensor::vector(vec![0.0; fan_out]),
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcanModel {
    spec: ModelSpec,
    extractor: Vec<Linear>,
    classifier: Linear,
}

/// Tape handles of a model's parameters, in [`EcanModel::parameters`] order.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Wraps handles recorded by the caller, one per tensor of
    /// [`EcanModel::parameters`], in the same order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Tape outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
}

impl EcanModel {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Linear::glorot(i, o, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let classifier = layers.pop().expect("classifier layer");
        Ok(EcanModel {
            spec,
            extractor: layers,
            classifier,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn extractor(&self) -> &[Linear] {
        &self.extractor
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Linear {
        &mut self.classifier
    }

    /// Weight then bias of each extractor layer, then of the classifier.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Puts every parameter on the tape as a gradient-requiring leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.parameters().into_iter().map(|p| tape.param(p.clone())).collect())
    }

    /// Forward pass recorded on `tape` using previously registered parameters.
    pub fn forward_on(&self, tape: &mut Tape, params: &ParamVars, batch: Var) -> Result<ForwardVars> {
        let width = tape.value(batch).cols();
        if width != self.spec.input_dim {
            return Err(EcanError::Dimension(format!(
                "batch width {width} does not match model input_dim {}",
                self.spec.input_dim
            )));
        }
        let p = params.vars();
        if p.len() != 2 * (self.extractor.len() + 1) {
            return Err(EcanError::Dimension(format!(
                "{} parameter handles for a model with {} tensors",
                p.len(),
                2 * (self.extractor.len() + 1)
            )));
        }
        let mut h = batch;
        let last = self.extractor.len() - 1;
        for layer in 0..=last {
            let z = tape.matmul(h, p[2 * layer])?;
            h = tape.add_row(z, p[2 * layer + 1])?;
            if layer != last {
                h = tape.relu(h)?;
            }
        }
        let features = h;
        let c = 2 * self.extractor.len();
        let z = tape.matmul(features, p[c])?;
        let logits = tape.add_row(z, p[c + 1])?;
        let probs = tape.softmax_rows(logits)?;
        Ok(ForwardVars {
            features,
            logits,
            probs,
        })
    }

    /// Returns `(features, probs)` for an `n x input_dim` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = ParamVars(
            self.parameters()
                .into_iter()
                .map(|p| tape.constant(p.clone()))
                .collect(),
        );
        let x = tape.constant(batch.clone());
        let out = self.forward_on(&mut tape, &params, x)?;
        Ok((tape.value(out.features).clone(), tape.value(out.probs).clone()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_json()?;
        fs::write(path, text).map_err(|e| EcanError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EcanError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            spec: self.spec.clone(),
            extractor: self.extractor.iter().map(LayerFile::from).collect(),
            classifier: LayerFile::from(&self.classifier),
        };
        serde_json::to_string_pretty(&file)
            .map_err(|e| EcanError::Numeric(format!("model serialization: {e}")))
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| {
            let offset = byte_offset(text, e.line(), e.column());
            EcanError::format(source_name, format!("byte {offset}"), e.to_string())
        })?;
        let bad = |msg: String| EcanError::format(source_name, "header", msg);
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        file.spec.validate().map_err(|e| bad(e.to_string()))?;
        let dims = file.spec.layer_dims();
        if dims.len() != file.extractor.len() + 1 {
            return Err(bad(format!(
                "spec declares {} extractor layers, file has {}",
                dims.len() - 1,
                file.extractor.len()
            )));
        }
        let mut layers = Vec::with_capacity(dims.len());
        for (i, (layer, (fan_in, fan_out))) in file
            .extractor
            .iter()
            .chain(std::iter::once(&file.classifier))
            .zip(dims)
            .enumerate()
        {
            let name = if i == file.extractor.len() {
                "classifier".to_string()
            } else {
                format!("extractor layer {i}")
            };
            layers.push(layer.to_linear(fan_in, fan_out).map_err(|m| {
                EcanError::format(source_name, name, m)
            })?);
        }
        let classifier = layers.pop().expect("classifier layer");
        Ok(EcanModel {
            spec: file.spec,
            extractor: layers,
            classifier,
        })
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let before: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (before + column.saturating_sub(1)).min(text.len())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    spec: ModelSpec,
    extractor: Vec<LayerFile>,
    classifier: LayerFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    fan_in: usize,
    fan_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl From<&Linear> for LayerFile {
    fn from(l: &Linear) -> Self {
        LayerFile {
            fan_in: l.fan_in(),
            fan_out: l.fan_out(),
            weight: l.weight.data().to_vec(),
            bias: l.bias.data().to_vec(),
        }
    }
}

impl LayerFile {
    fn to_linear(&self, fan_in: usize, fan_out: usize) -> std::result::Result<Linear, String> {
        if (self.fan_in, self.fan_out) != (fan_in, fan_out) {
            return Err(format!(
                "declared {}x{}, spec requires {fan_in}x{fan_out}",
                self.fan_in, self.fan_out
            ));
        }
        if self.weight.len() != fan_in * fan_out || self.bias.len() != fan_out {
            return Err(format!(
                "weight has {} values and bias {}, expected {} and {fan_out}",
                self.weight.len(),
                self.bias.len(),
                fan_in * fan_out
            ));
        }
        Ok(Linear {
            weight: Tensor::matrix(fan_in, fan_out, self.weight.clone()).map_err(|e| e.to_string())?,
            bias: Tensor::vector(self.bias.clone()),
        })
    }
}
