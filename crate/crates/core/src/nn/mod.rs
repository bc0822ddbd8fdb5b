//! Feed-forward networks with explicit forward and backward passes.
//!
//! A [`Trace`] records, for every layer `ℓ`, the layer input `h_{ℓ-1}`, the
//! pre-activation output `a_ℓ` and, after [`Model::backward`], the upstream
//! gradient `δ_ℓ = ∂L/∂a_ℓ`. With that convention the weight gradient of a
//! dense layer is exactly the outer product `δ_ℓ h_{ℓ-1}ᵀ`.

mod loss;
mod optim;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use loss::{cross_entropy, kl_temperature, kl_temperature_grad, log_softmax, softmax};
pub use optim::{Sgd, SgdConfig};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
        }
    }
}

/// `a = W h + bias`, with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// `a = A (B h) + bias`, the rank-`r` replacement of a dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredLayer {
    pub a: Matrix,
    pub b: Matrix,
    pub bias: Vec<f64>,
}

impl FactoredLayer {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Dense(DenseLayer),
    Factored(FactoredLayer),
}

impl Layer {
    pub fn dense(weight: Matrix, bias: Vec<f64>) -> Result<Layer> {
        if weight.rows() != bias.len() {
            return Err(Error::mismatch("dense layer bias", weight.rows(), bias.len()));
        }
        Ok(Layer::Dense(DenseLayer { weight, bias }))
    }

    pub fn factored(a: Matrix, b: Matrix, bias: Vec<f64>) -> Result<Layer> {
        if a.cols() != b.rows() {
            return Err(Error::mismatch("factored layer inner rank", a.cols(), b.rows()));
        }
        if a.rows() != bias.len() {
            return Err(Error::mismatch("factored layer bias", a.rows(), bias.len()));
        }
        if a.cols() == 0 || a.cols() > a.rows().min(b.cols()) {
            return Err(Error::RankOutOfRange {
                rank: a.cols(),
                max: a.rows().min(b.cols()),
            });
        }
        Ok(Layer::Factored(FactoredLayer { a, b, bias }))
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.cols(),
            Layer::Factored(f) => f.b.cols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.rows(),
            Layer::Factored(f) => f.a.rows(),
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            Layer::Dense(d) => &d.bias,
            Layer::Factored(f) => &f.bias,
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self, Layer::Factored(_))
    }

    /// The full `out × in` weight (`A·B` for factored layers).
    pub fn effective_weight(&self) -> Matrix {
        match self {
            Layer::Dense(d) => d.weight.clone(),
            Layer::Factored(f) => f.a.matmul(&f.b).expect("validated factor shapes"),
        }
    }

    /// Weight parameters only (biases excluded).
    pub fn weight_param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.len(),
            Layer::Factored(f) => f.a.len() + f.b.len(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_param_count() + self.bias().len()
    }

    /// Parameter tensors in canonical order, restricted to `scope`.
    fn tensors(&self, scope: ParamScope) -> Vec<&[f64]> {
        match (self, scope) {
            (Layer::Dense(d), ParamScope::All) => vec![d.weight.as_slice(), &d.bias],
            (Layer::Dense(_), ParamScope::Factors) => vec![],
            (Layer::Factored(f), ParamScope::All) => {
                vec![f.a.as_slice(), f.b.as_slice(), &f.bias]
            }
            (Layer::Factored(f), ParamScope::Factors) => vec![f.a.as_slice(), f.b.as_slice()],
        }
    }

    fn tensors_mut(&mut self, scope: ParamScope) -> Vec<&mut [f64]> {
        match (self, scope) {
            (Layer::Dense(d), ParamScope::All) => {
                vec![d.weight.as_mut_slice(), d.bias.as_mut_slice()]
            }
            (Layer::Dense(_), ParamScope::Factors) => vec![],
            (Layer::Factored(f), ParamScope::All) => vec![
                f.a.as_mut_slice(),
                f.b.as_mut_slice(),
                f.bias.as_mut_slice(),
            ],
            (Layer::Factored(f), ParamScope::Factors) => {
                vec![f.a.as_mut_slice(), f.b.as_mut_slice()]
            }
        }
    }

    fn zeros_like(&self) -> Layer {
        match self {
            Layer::Dense(d) => Layer::Dense(DenseLayer {
                weight: Matrix::zeros(d.weight.rows(), d.weight.cols()),
                bias: vec![0.0; d.bias.len()],
            }),
            Layer::Factored(f) => Layer::Factored(FactoredLayer {
                a: Matrix::zeros(f.a.rows(), f.a.cols()),
                b: Matrix::zeros(f.b.rows(), f.b.cols()),
                bias: vec![0.0; f.bias.len()],
            }),
        }
    }
}

/// Which parameters a flat view covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    /// Every weight, factor and bias.
    All,
    /// Only the `A` and `B` factors of factored layers.
    Factors,
}

fn flatten(layers: &[Layer], scope: ParamScope) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.tensors(scope))
        .flat_map(|t| t.iter().copied())
        .collect()
}

fn unflatten(layers: &mut [Layer], scope: ParamScope, values: &[f64]) -> Result<()> {
    let expected: usize = layers
        .iter()
        .flat_map(|l| l.tensors(scope))
        .map(<[f64]>::len)
        .sum();
    if expected != values.len() {
        return Err(Error::mismatch("flat parameter vector", expected, values.len()));
    }
    let mut offset = 0;
    for layer in layers.iter_mut() {
        for t in layer.tensors_mut(scope) {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }
    Ok(())
}

/// Per-sample record of a forward (and optionally backward) pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `h_{ℓ-1}`: the input seen by each layer.
    pub inputs: Vec<Vec<f64>>,
    /// `a_ℓ`: each layer's output before the activation.
    pub pre_activations: Vec<Vec<f64>>,
    /// `B h` for factored layers.
    pub codes: Vec<Option<Vec<f64>>>,
    /// `δ_ℓ = ∂L/∂a_ℓ`; empty until a backward pass runs.
    pub deltas: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub loss: Option<f64>,
}

impl Trace {
    /// Layer output after the activation (the next layer's input).
    pub fn output_of(&self, layer: usize) -> &[f64] {
        if layer + 1 < self.inputs.len() {
            &self.inputs[layer + 1]
        } else {
            &self.logits
        }
    }
}

/// Gradients stored with the same layout as the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    pub fn zeros_like(model: &Model) -> Gradient {
        Gradient {
            layers: model.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn flat(&self, scope: ParamScope) -> Vec<f64> {
        flatten(&self.layers, scope)
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Gradient) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            for (t, o) in mine
                .tensors_mut(ParamScope::All)
                .into_iter()
                .zip(theirs.tensors(ParamScope::All))
            {
                for (x, y) in t.iter_mut().zip(o) {
                    *x += alpha * y;
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for layer in &mut self.layers {
            for t in layer.tensors_mut(ParamScope::All) {
                t.iter_mut().for_each(|x| *x *= alpha);
            }
        }
    }

    /// The weight gradient `∇W` of a dense layer.
    pub fn weight(&self, layer: usize) -> Option<&Matrix> {
        match &self.layers[layer] {
            Layer::Dense(d) => Some(&d.weight),
            Layer::Factored(_) => None,
        }
    }

    /// `(∇A, ∇B)` of a factored layer.
    pub fn factors(&self, layer: usize) -> Option<(&Matrix, &Matrix)> {
        match &self.layers[layer] {
            Layer::Factored(f) => Some((&f.a, &f.b)),
            Layer::Dense(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    activation: Activation,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Model> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::mismatch(
                    "layer chaining",
                    format!("layer {} input {}", i + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Model { layers, activation })
    }

    /// Randomly initialized dense MLP with `N(0, 1/fan_in)` weights and zero biases.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Model> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = 1.0 / (w[0] as f64).sqrt();
                let weight = Matrix::from_fn(w[1], w[0], |_, _| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                });
                Layer::Dense(DenseLayer {
                    weight,
                    bias: vec![0.0; w[1]],
                })
            })
            .collect();
        Model::new(layers, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn flat_params(&self, scope: ParamScope) -> Vec<f64> {
        flatten(&self.layers, scope)
    }

    pub fn set_flat_params(&mut self, scope: ParamScope, values: &[f64]) -> Result<()> {
        unflatten(&mut self.layers, scope, values)
    }

    /// Indices of factored layers.
    pub fn factored_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_factored())
            .collect()
    }

    /// All layers except the first and the last (all layers for models with fewer than three).
    pub fn interior_layers(&self) -> Vec<usize> {
        let n = self.layers.len();
        if n < 3 {
            (0..n).collect()
        } else {
            (1..n - 1).collect()
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::mismatch("model input", self.input_dim(), x.len()));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut codes = Vec::with_capacity(n);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut a, code) = match layer {
                Layer::Dense(d) => (d.weight.matvec(&h)?, None),
                Layer::Factored(f) => {
                    let c = f.b.matvec(&h)?;
                    (f.a.matvec(&c)?, Some(c))
                }
            };
            for (v, b) in a.iter_mut().zip(layer.bias()) {
                *v += b;
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer {
                    what: "activation",
                    layer: i,
                });
            }
            let next = if i + 1 < n {
                a.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(a);
            codes.push(code);
        }
        let logits = pre.last().expect("nonempty").clone();
        Ok(Trace {
            inputs,
            pre_activations: pre,
            codes,
            deltas: Vec::new(),
            logits,
            loss: None,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Cross-entropy backward pass; fills `trace.deltas` and `trace.loss`.
    pub fn backward(&self, trace: &mut Trace, label: usize) -> Result<Gradient> {
        let classes = self.classes();
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut out = softmax(&trace.logits);
        out[label] -= 1.0;
        trace.loss = Some(cross_entropy(&trace.logits, label)?);
        self.backward_from(trace, out)
    }

    /// Backward pass seeded with an arbitrary `∂L/∂logits`.
    pub fn backward_from(&self, trace: &mut Trace, output_delta: Vec<f64>) -> Result<Gradient> {
        let n = self.layers.len();
        if output_delta.len() != self.classes() {
            return Err(Error::mismatch("output delta", self.classes(), output_delta.len()));
        }
        let mut deltas = vec![Vec::new(); n];
        deltas[n - 1] = output_delta;
        for l in (1..n).rev() {
            let back = match &self.layers[l] {
                Layer::Dense(d) => d.weight.t_matvec(&deltas[l])?,
                Layer::Factored(f) => f.b.t_matvec(&f.a.t_matvec(&deltas[l])?)?,
            };
            let d: Vec<f64> = back
                .iter()
                .zip(&trace.pre_activations[l - 1])
                .map(|(&g, &a)| g * self.activation.derivative(a))
                .collect();
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer {
                    what: "upstream gradient",
                    layer: l - 1,
                });
            }
            deltas[l - 1] = d;
        }
        trace.deltas = deltas;
        Ok(self.gradient_from_trace(trace))
    }

    /// Assembles parameter gradients from a completed trace.
    pub fn gradient_from_trace(&self, trace: &Trace) -> Gradient {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let delta = &trace.deltas[l];
                let h = &trace.inputs[l];
                match layer {
                    Layer::Dense(_) => Layer::Dense(DenseLayer {
                        weight: Matrix::outer(delta, h),
                        bias: delta.clone(),
                    }),
                    Layer::Factored(f) => {
                        let code = trace.codes[l].as_ref().expect("factored layer code");
                        let back = f.a.t_matvec(delta).expect("validated shapes");
                        Layer::Factored(FactoredLayer {
                            a: Matrix::outer(delta, code),
                            b: Matrix::outer(&back, h),
                            bias: delta.clone(),
                        })
                    }
                }
            })
            .collect();
        Gradient { layers }
    }

    /// Cross-entropy loss and gradient for one sample.
    pub fn loss_and_gradient(&self, x: &[f64], label: usize) -> Result<(f64, Gradient)> {
        let mut trace = self.forward(x)?;
        let g = self.backward(&mut trace, label)?;
        Ok((trace.loss.expect("set by backward"), g))
    }

    /// Mean loss and mean gradient over a batch, accumulated in the given order.
    pub fn batch_loss_and_gradient<'a, I>(&self, batch: I) -> Result<(f64, Gradient)>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let mut total = Gradient::zeros_like(self);
        let mut loss = 0.0;
        let mut count = 0usize;
        for (x, y) in batch {
            let (l, g) = self.loss_and_gradient(x, y)?;
            loss += l;
            total.add_scaled(1.0, &g);
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        total.scale(1.0 / count as f64);
        Ok((loss / count as f64, total))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.logits(x)?;
        Ok(argmax(&logits))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            activation: self.activation,
            layers: self.layers.clone(),
        };
        serde_json::to_string_pretty(&file)
            .map_err(|e| Error::InvalidArgument(format!("model serialization: {e}")))
    }

    pub fn from_json(text: &str) -> std::result::Result<Model, String> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(format!(
                "unsupported model format_version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            ));
        }
        for (i, layer) in file.layers.iter().enumerate() {
            let ok = match layer {
                Layer::Dense(d) => d.weight.rows() == d.bias.len(),
                Layer::Factored(f) => {
                    f.a.cols() == f.b.rows() && f.a.rows() == f.bias.len()
                }
            };
            if !ok {
                return Err(format!("layer {i} has inconsistent shapes"));
            }
        }
        Model::new(file.layers, file.activation).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text).map_err(|m| Error::format(path, m))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
