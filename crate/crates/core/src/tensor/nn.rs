use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, TensorError, Var};

/// Named trainable tensors. Indices into the store are stable for its lifetime.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// One checkpoint record: `{"name": .., "shape": [rows, cols], "values": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    params: Vec<ParamRecord>,
}

const CHECKPOINT_FORMAT: &str = "netcause-params-v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Registers every parameter as a leaf on `tape`, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| ParamRecord {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                values: t.data().to_vec(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<ParamRecord>) -> Result<Self, TensorError> {
        let mut store = Self::new();
        for r in records {
            store.push(r.name, Tensor::new(r.shape[0], r.shape[1], r.values)?);
        }
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            params: self.to_records(),
        })
        .expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(crate::Error::Parse(format!(
                "unknown checkpoint format {:?}",
                ckpt.format
            )));
        }
        Ok(Self::from_records(ckpt.params)?)
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Uniform Glorot initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::new(fan_in, fan_out, data).expect("sizes agree")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Fully connected layer `x W + b`, parameters held in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.push(
            format!("{name}.weight"),
            glorot_uniform(fan_in, fan_out, rng),
        );
        let bias = bias.then(|| store.push(format!("{name}.bias"), Tensor::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError> {
        let out = tape.matmul(x, params[self.weight])?;
        match self.bias {
            Some(b) => tape.add(out, params[b]),
            None => Ok(out),
        }
    }
}

/// Stack of linear layers, each followed by its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// `widths` lists the input width followed by each layer's output width.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activations: &[Activation],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(widths.len(), activations.len() + 1);
        let layers = widths
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(k, (w, &act))| {
                (
                    Linear::new(store, &format!("{name}.{k}"), w[0], w[1], true, rng),
                    act,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Forward pass returning every layer's post-activation output.
    pub fn forward_all(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
    ) -> Result<Vec<Var>, TensorError> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (layer, act) in &self.layers {
            let pre = layer.forward(tape, params, h)?;
            h = act.apply(tape, pre)?;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError> {
        Ok(*self
            .forward_all(tape, params, x)?
            .last()
            .expect("non-empty mlp"))
    }
}
