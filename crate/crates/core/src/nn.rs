//! Named parameters and the small layer set the models are built from.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name so iteration is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Moves every parameter of `other` into `self`, replacing same names.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values of the parameters
    /// under `prefix` (all parameters for `""`).
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records the parameters under `prefix` as graph leaves.
    pub fn bind(&self, g: &mut Graph, prefix: &str, trainable: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Binding { vars }
    }
}

/// Parameter names mapped to their leaves on one graph.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn merge(mut self, other: Binding) -> Binding {
        self.vars.extend(other.vars);
        self
    }

    /// Gradients for every bound trainable parameter, keyed by name.
    pub fn collect_grads(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(k, v)| {
                let t = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()));
                (k.clone(), t)
            })
            .collect()
    }
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / (self.input as f64).sqrt();
        store.insert(self.weight(), Tensor::uniform(&[self.input, self.output], bound, rng));
        store.insert(self.bias(), Tensor::zeros(&[1, self.output]));
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let w = p.var(&self.weight())?;
        let b = p.var(&self.bias())?;
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    /// `x W` without the bias.
    pub fn forward_no_bias(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let w = p.var(&self.weight())?;
        g.matmul(x, w)
    }
}

/// ReLU multilayer perceptron; no activation after the last layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer size including input and output.
    pub fn new(name: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "mlp needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    name: String,
    pub width: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gain", self.name), Tensor::full(&[1, self.width], 1.0));
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[1, self.width]));
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let gain = p.var(&format!("{}.gain", self.name))?;
        let bias = p.var(&format!("{}.bias", self.name))?;
        let n = g.layer_norm(x, Self::EPS)?;
        let s = g.mul(n, gain)?;
        g.add(s, bias)
    }
}

/// Gated recurrent unit cell (reset gate applied after the hidden projection).
#[derive(Debug, Clone)]
pub struct GruCell {
    name: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let h3 = 3 * self.hidden;
        store.insert(self.key("w_ih"), Tensor::uniform(&[self.input, h3], bound, rng));
        store.insert(self.key("w_hh"), Tensor::uniform(&[self.hidden, h3], bound, rng));
        store.insert(self.key("b_ih"), Tensor::uniform(&[1, h3], bound, rng));
        store.insert(self.key("b_hh"), Tensor::uniform(&[1, h3], bound, rng));
    }

    /// Next hidden state from `state` (rows x hidden) and `input` (rows x input).
    pub fn forward(&self, g: &mut Graph, p: &Binding, state: Var, input: Var) -> Result<Var> {
        let h = self.hidden;
        let w_ih = p.var(&self.key("w_ih"))?;
        let w_hh = p.var(&self.key("w_hh"))?;
        let b_ih = p.var(&self.key("b_ih"))?;
        let b_hh = p.var(&self.key("b_hh"))?;
        let gx = g.matmul(input, w_ih)?;
        let gx = g.add(gx, b_ih)?;
        let gh = g.matmul(state, w_hh)?;
        let gh = g.add(gh, b_hh)?;

        let xr = g.slice_cols(gx, 0, h)?;
        let xz = g.slice_cols(gx, h, 2 * h)?;
        let xn = g.slice_cols(gx, 2 * h, 3 * h)?;
        let hr = g.slice_cols(gh, 0, h)?;
        let hz = g.slice_cols(gh, h, 2 * h)?;
        let hn = g.slice_cols(gh, 2 * h, 3 * h)?;

        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rhn = g.mul(r, hn)?;
        let n = g.add(xn, rhn)?;
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let diff = g.sub(state, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}
