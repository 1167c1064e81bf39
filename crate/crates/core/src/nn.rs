//! Named parameters and the small layer helpers shared by every model.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// All weights of a model, keyed by dotted name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_values(&self, trainable: bool) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable == trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Sub-store with the parameters whose trainable flag equals `trainable`.
    pub fn partition(&self, trainable: bool) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(_, p)| p.trainable == trainable)
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// Inserts every parameter of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// FNV-1a over names, shapes and value bits of the selected parameters.
    pub fn fingerprint(&self, trainable: bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, p) in self.params.iter().filter(|(_, p)| p.trainable == trainable) {
            feed(name.as_bytes());
            for e in p.value.shape() {
                feed(&(*e as u64).to_le_bytes());
            }
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Binds parameters of a [`ParamStore`] onto a [`Graph`] on first use.
///
/// Trainable parameters become tracked leaves unless the session is in
/// inference mode; frozen parameters are always constants.
pub struct Session<'g, 's> {
    pub g: &'g mut Graph,
    store: &'s ParamStore,
    bound: HashMap<String, Var>,
    track: bool,
}

impl<'g, 's> Session<'g, 's> {
    pub fn new(g: &'g mut Graph, store: &'s ParamStore) -> Self {
        Self {
            g,
            store,
            bound: HashMap::new(),
            track: true,
        }
    }

    /// No parameter receives a gradient.
    pub fn inference(g: &'g mut Graph, store: &'s ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(g, store)
        }
    }

    /// Forces `name` to resolve to an existing node, e.g. a perturbed copy in
    /// a gradient check.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self
            .store
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
        let v = if param.trainable && self.track {
            self.g.param(param.value.clone())
        } else {
            self.g.constant(param.value.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Gradients of every bound trainable parameter reached by backward.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| self.g.grad(v).map(|t| (n.clone(), t.clone())))
            .collect()
    }

    /// `x · W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.affine(x, w, b)
    }

    /// Two-layer GELU MLP under `{prefix}.fc1` / `{prefix}.fc2`.
    pub fn mlp2(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.fc1"), x)?;
        let h = self.g.gelu(h);
        self.linear(&format!("{prefix}.fc2"), h)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.g"))?;
        let beta = self.p(&format!("{prefix}.b"))?;
        self.g.layer_norm(x, gamma, beta)
    }
}

/// Registers `{prefix}.w: [fan_in × fan_out]` (scaled normal) and a zero bias.
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    trainable: bool,
    rng: &mut SplitMix64,
) {
    let std = (1.0 / fan_in as f64).sqrt();
    store.insert(
        format!("{prefix}.w"),
        Tensor::randn(&[fan_in, fan_out], std, rng),
        trainable,
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]), trainable);
}

pub fn init_mlp2(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    trainable: bool,
    rng: &mut SplitMix64,
) {
    init_linear(store, &format!("{prefix}.fc1"), d_in, d_hidden, trainable, rng);
    init_linear(store, &format!("{prefix}.fc2"), d_hidden, d_out, trainable, rng);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize, trainable: bool) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[1, d], 1.0), trainable);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, d]), trainable);
}

/// Multi-head attention core: splits `q`, `k`, `v` column-wise into `heads`
/// blocks, attends with scale `1/√d_head` (or `scale` when given), and
/// concatenates the head outputs. Returns the output and the per-head
/// attention matrices.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
    scale: Option<f64>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q).1;
    if d % heads != 0 {
        return Err(Error::config(format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = scale.unwrap_or(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let a = if causal {
            g.causal_softmax_rows(scores)
        } else {
            g.softmax_rows(scores)
        };
        outs.push(g.matmul(a, vh)?);
        attns.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, attns))
}

/// Elementwise mean of several same-shape tensors (head-averaged attention).
pub fn mean_of(tensors: &[&Tensor]) -> Tensor {
    let mut acc = tensors[0].clone();
    for t in &tensors[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += b;
        }
    }
    let n = tensors.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= n);
    acc
}
