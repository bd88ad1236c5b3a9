//! Parameter storage and dense multilayer perceptrons.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable tensors. Values are shared with tapes during a step and
/// mutated in place by the optimizer once the tape is dropped.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        self.values[id.0].expect_shape(value.shape(), &self.names[id.0])?;
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Registers every parameter on the tape; index the result by `ParamId.0`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(ParamId(i), Arc::clone(v)))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Weight `in x out` and bias `1 x out` as recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// `y = f_k(...f_1(x))` with `f_i(h) = act_i(h W_i + b_i)`.
pub fn mlp_apply(tape: &mut Tape, x: Var, layers: &[LayerVars], activations: &[Activation]) -> Result<Var> {
    if layers.len() != activations.len() {
        return Err(Error::dim(format!(
            "{} layers but {} activations",
            layers.len(),
            activations.len()
        )));
    }
    let mut h = x;
    for (i, (layer, act)) in layers.iter().zip(activations).enumerate() {
        let (hw, ww) = (tape.value(h).cols(), tape.value(layer.weight).rows());
        if hw != ww {
            return Err(Error::dim(format!("layer {i} expects width {ww}, input has {hw}")));
        }
        let z = tape.matmul(h, layer.weight)?;
        let z = tape.add_bias(z, layer.bias)?;
        h = match act {
            Activation::Relu => tape.relu(z)?,
            Activation::Identity => z,
        };
    }
    Ok(h)
}

/// Uniform Glorot initialisation for the weight; zero bias.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Dense {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Dense {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn vars(&self, bound: &[Var]) -> LayerVars {
        LayerVars {
            weight: bound[self.weight.0],
            bias: bound[self.bias.0],
        }
    }
}

/// A stack of dense layers with per-layer activations.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; hidden layers use ReLU, the last layer
    /// uses `last`.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], last: Activation, rng: &mut impl Rng) -> Mlp {
        let mut layers = Vec::new();
        let mut activations = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng));
            activations.push(if i + 2 == widths.len() { last } else { Activation::Relu });
        }
        Mlp { layers, activations }
    }

    pub fn in_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let layers: Vec<LayerVars> = self.layers.iter().map(|l| l.vars(bound)).collect();
        let out = mlp_apply(tape, x, &layers, &self.activations)?;
        tape.value(out).ensure_finite("mlp output")?;
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}
