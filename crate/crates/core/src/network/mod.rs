//! Sequential networks and forward passes that record every intermediate
//! activation.
//!
//! A [`NetworkSpec`] is validated once at construction: every parameter
//! reference resolves, every layer's hyperparameters fit the shape flowing
//! into it, and at most one global-average-pool layer exists with all dense
//! layers after it. A validated network cannot fail a forward pass on an
//! input of the declared shape.

mod bundle;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Padding, Tensor, TensorError};

pub use bundle::{
    decode_blob, encode_blob, load_bundle, manifest_from_str, manifest_to_string, save_bundle,
    BundleError, BLOB_MAGIC, BLOB_VERSION, MANIFEST_VERSION,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("layer {layer} ({kind}): {source}")]
    ShapeChain {
        layer: usize,
        kind: LayerKind,
        #[source]
        source: TensorError,
    },
    #[error("layer {layer} ({kind}): {reason}")]
    InvalidLayout {
        layer: usize,
        kind: LayerKind,
        reason: String,
    },
    #[error("input shape must be [C, H, W] with positive sizes, got {0:?}")]
    InvalidInputShape(Vec<usize>),
    #[error("input has shape {found:?}, network expects {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Relu,
    #[serde(rename = "batchnorm")]
    BatchNorm,
    MaxPool,
    GlobalAvgPool,
    Flatten,
    Dense,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Conv,
        LayerKind::Relu,
        LayerKind::BatchNorm,
        LayerKind::MaxPool,
        LayerKind::GlobalAvgPool,
        LayerKind::Flatten,
        LayerKind::Dense,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::MaxPool => "maxpool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense => "dense",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// One layer with its hyperparameters and the names of its parameter tensors.
///
/// `relu` on [`Layer::Conv`] and [`Layer::Dense`] fuses a rectifier into the
/// layer so the pair produces a single tap.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        weight: String,
        bias: String,
        stride: usize,
        padding: Padding,
        relu: bool,
    },
    Relu,
    BatchNorm {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        eps: f64,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        weight: String,
        bias: String,
        relu: bool,
    },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv { .. } => LayerKind::Conv,
            Layer::Relu => LayerKind::Relu,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Dense { .. } => LayerKind::Dense,
        }
    }

    /// `(role, tensor name)` pairs in a fixed order.
    pub fn tensor_refs(&self) -> Vec<(&'static str, &str)> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                vec![("weight", weight), ("bias", bias)]
            }
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                ..
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", mean),
                ("running_var", var),
            ],
            _ => Vec::new(),
        }
    }

    /// Spatial stride contributed by this layer.
    pub fn stride(&self) -> usize {
        match self {
            Layer::Conv { stride, .. } | Layer::MaxPool { stride, .. } => *stride,
            _ => 1,
        }
    }
}

/// A validated sequential network.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: BTreeMap<String, Tensor>,
    output_shapes: Vec<Vec<usize>>,
}

impl PartialEq for NetworkSpec {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.params == other.params
    }
}

impl NetworkSpec {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self, NetworkError> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(NetworkError::InvalidInputShape(input_shape));
        }
        let output_shapes = infer_shapes(&input_shape, &layers, &params)?;
        Ok(Self {
            input_shape,
            layers,
            params,
            output_shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Output shape of each layer, in order.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.output_shapes
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// The same network with every parameter rounded through `f32`.
    pub fn quantized(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.quantized()))
                .collect(),
            ..self.clone()
        }
    }

    fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    fn run_layer(&self, layer: &Layer, x: &Tensor) -> Result<Tensor, TensorError> {
        Ok(match layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                padding,
                relu,
            } => {
                let y = tensor::conv2d(
                    x,
                    self.param(weight),
                    self.param(bias).data(),
                    *stride,
                    *padding,
                )?;
                if *relu {
                    tensor::relu(&y)
                } else {
                    y
                }
            }
            Layer::Relu => tensor::relu(x),
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => tensor::batchnorm_infer(
                x,
                self.param(gamma).data(),
                self.param(beta).data(),
                self.param(mean).data(),
                self.param(var).data(),
                *eps,
            )?,
            Layer::MaxPool { kernel, stride } => tensor::maxpool(x, *kernel, *stride)?,
            Layer::GlobalAvgPool => tensor::global_avg_pool(x)?,
            Layer::Flatten => {
                let n = x.len();
                x.clone().reshape(vec![n])?
            }
            Layer::Dense { weight, bias, relu } => {
                let y = tensor::dense(x, self.param(weight), self.param(bias).data())?;
                if *relu {
                    tensor::relu(&y)
                } else {
                    y
                }
            }
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NetworkError> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(NetworkError::InputShape {
                expected: self.input_shape.clone(),
                found: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Run the network and keep the activation after every layer.
    pub fn forward_with_taps(&self, input: &Tensor) -> Result<TapTrace, NetworkError> {
        self.check_input(input)?;
        let mut taps = Vec::with_capacity(self.layers.len());
        let mut downsample = 1;
        let mut current = input.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            let next =
                self.run_layer(layer, &current)
                    .map_err(|source| NetworkError::ShapeChain {
                        layer: index,
                        kind: layer.kind(),
                        source,
                    })?;
            downsample *= layer.stride();
            taps.push(Tap {
                layer_index: index,
                kind: layer.kind(),
                activation: next.clone(),
                cumulative_downsample: downsample,
            });
            current = next;
        }
        Ok(TapTrace { taps })
    }

    /// Final output only.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NetworkError> {
        self.check_input(input)?;
        let mut current = input.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            current =
                self.run_layer(layer, &current)
                    .map_err(|source| NetworkError::ShapeChain {
                        layer: index,
                        kind: layer.kind(),
                        source,
                    })?;
        }
        Ok(current)
    }
}

fn infer_shapes(
    input_shape: &[usize],
    layers: &[Layer],
    params: &BTreeMap<String, Tensor>,
) -> Result<Vec<Vec<usize>>, NetworkError> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut current = input_shape.to_vec();
    let mut seen_gap = false;
    let gap_present = layers.iter().any(|l| matches!(l, Layer::GlobalAvgPool));

    for (index, layer) in layers.iter().enumerate() {
        let kind = layer.kind();
        let layout = |reason: &str| NetworkError::InvalidLayout {
            layer: index,
            kind,
            reason: reason.to_string(),
        };
        let chain = |source| NetworkError::ShapeChain {
            layer: index,
            kind,
            source,
        };
        let get = |name: &str| {
            params
                .get(name)
                .ok_or_else(|| NetworkError::MissingTensor(name.to_string()))
        };
        let vector_len = |name: &str| -> Result<usize, NetworkError> {
            let t = get(name)?;
            match t.shape() {
                [n] => Ok(*n),
                other => Err(chain(TensorError::Rank {
                    op: "parameter vector",
                    expected: 1,
                    shape: other.to_vec(),
                })),
            }
        };

        current = match layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                padding,
                ..
            } => {
                let bias_len = vector_len(bias)?;
                tensor::conv2d_shape(&current, get(weight)?.shape(), bias_len, *stride, *padding)
                    .map_err(chain)?
                    .to_vec()
            }
            Layer::Relu => current,
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let &[c, _, _] = current.as_slice() else {
                    return Err(chain(TensorError::Rank {
                        op: "batchnorm",
                        expected: 3,
                        shape: current,
                    }));
                };
                for (dim, name) in [
                    ("gamma", gamma),
                    ("beta", beta),
                    ("running_mean", mean),
                    ("running_var", var),
                ] {
                    let found = vector_len(name)?;
                    if found != c {
                        return Err(chain(TensorError::DimMismatch {
                            op: "batchnorm",
                            dim,
                            expected: c,
                            found,
                        }));
                    }
                }
                if let Some((channel, &value)) =
                    get(var)?.data().iter().enumerate().find(|(_, v)| **v < 0.0)
                {
                    return Err(chain(TensorError::NegativeVariance { channel, value }));
                }
                if !(eps.is_finite() && *eps >= 0.0) {
                    return Err(layout("eps must be finite and non-negative"));
                }
                current
            }
            Layer::MaxPool { kernel, stride } => tensor::maxpool_shape(&current, *kernel, *stride)
                .map_err(chain)?
                .to_vec(),
            Layer::GlobalAvgPool => {
                if seen_gap {
                    return Err(layout("at most one global_avg_pool layer is allowed"));
                }
                seen_gap = true;
                let &[c, _, _] = current.as_slice() else {
                    return Err(chain(TensorError::Rank {
                        op: "global_avg_pool",
                        expected: 3,
                        shape: current,
                    }));
                };
                vec![c, 1, 1]
            }
            Layer::Flatten => vec![current.iter().product()],
            Layer::Dense { weight, bias, .. } => {
                if gap_present && !seen_gap {
                    return Err(layout("dense layers must follow global_avg_pool"));
                }
                let bias_len = vector_len(bias)?;
                let [d, _] =
                    tensor::dense_shape(&current, get(weight)?.shape(), bias_len).map_err(chain)?;
                vec![d]
            }
        };
        shapes.push(current.clone());
    }
    Ok(shapes)
}

/// Activation recorded after one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub layer_index: usize,
    pub kind: LayerKind,
    pub activation: Tensor,
    /// Product of all conv/pool strides up to and including this layer.
    pub cumulative_downsample: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TapTrace {
    pub taps: Vec<Tap>,
}

impl TapTrace {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.taps.iter().map(|t| t.kind).collect()
    }
}

/// Incremental builder that names parameters `<prefix><index>.<role>`.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: BTreeMap<String, Tensor>,
}

impl NetworkBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            input_shape,
            layers: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn name(&self, role: &str) -> String {
        format!("layer{}.{role}", self.layers.len())
    }

    pub fn conv(
        mut self,
        weight: Tensor,
        bias: Vec<f64>,
        stride: usize,
        padding: Padding,
        relu: bool,
    ) -> Self {
        let (w, b) = (self.name("weight"), self.name("bias"));
        self.params.insert(w.clone(), weight);
        self.params
            .insert(b.clone(), Tensor::vector(bias).expect("non-empty bias"));
        self.layers.push(Layer::Conv {
            weight: w,
            bias: b,
            stride,
            padding,
            relu,
        });
        self
    }

    pub fn batchnorm(
        mut self,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> Self {
        let names = ["gamma", "beta", "running_mean", "running_var"].map(|r| self.name(r));
        for (name, values) in names.iter().zip([gamma, beta, mean, var]) {
            self.params.insert(
                name.clone(),
                Tensor::vector(values).expect("non-empty vector"),
            );
        }
        let [gamma, beta, mean, var] = names;
        self.layers.push(Layer::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            eps,
        });
        self
    }

    pub fn dense(mut self, weight: Tensor, bias: Vec<f64>, relu: bool) -> Self {
        let (w, b) = (self.name("weight"), self.name("bias"));
        self.params.insert(w.clone(), weight);
        self.params
            .insert(b.clone(), Tensor::vector(bias).expect("non-empty bias"));
        self.layers.push(Layer::Dense {
            weight: w,
            bias: b,
            relu,
        });
        self
    }

    pub fn layer(mut self, layer: Layer) -> Self {
        self.layers.push(layer);
        self
    }

    pub fn relu(self) -> Self {
        self.layer(Layer::Relu)
    }

    pub fn maxpool(self, kernel: usize, stride: usize) -> Self {
        self.layer(Layer::MaxPool { kernel, stride })
    }

    pub fn global_avg_pool(self) -> Self {
        self.layer(Layer::GlobalAvgPool)
    }

    pub fn flatten(self) -> Self {
        self.layer(Layer::Flatten)
    }

    pub fn build(self) -> Result<NetworkSpec, NetworkError> {
        NetworkSpec::new(self.input_shape, self.layers, self.params)
    }
}
