//! Named parameter storage, freeze masks and the parameter-aware tape.
//!
//! Parameters live in one flat map keyed by dotted names such as
//! `s11.text.enc.l0.attn.h1.wq`. The *group* of a parameter is `p2` for
//! everything in the second training phase and the first two name segments
//! otherwise (`s11.text`, `s12.image`, `tok.text`, ...). Freeze masks and
//! checkpoint hashes operate on groups.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Deref, DerefMut};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::kernels::{Activation, LinearParams, MlpLayer, MlpSpec};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Gradients, Tape, Var};

/// FNV-1a, used to derive per-parameter seeds from names.
pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Group key of a parameter name.
pub fn group_of(name: &str) -> &str {
    if name == "p2" || name.starts_with("p2.") {
        return "p2";
    }
    let mut dots = name.match_indices('.');
    match (dots.next(), dots.next()) {
        (Some(_), Some((second, _))) => &name[..second],
        _ => name,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.keys().map(|k| group_of(k).to_string()).collect()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.params.keys().any(|k| k.starts_with(&dotted))
    }

    /// Copies every parameter under `from.` to the same suffix under `to.`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> usize {
        let dotted = format!("{from}.");
        let copies: Vec<(String, Matrix)> = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|rest| (format!("{to}.{rest}"), v.clone())))
            .collect();
        let n = copies.len();
        self.params.extend(copies);
        n
    }

    /// Moves every entry of `other` into this store.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// SHA-256 over names, shapes and exact bit patterns of one group.
    pub fn group_hash(&self, group: &str) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.params.iter().filter(|(k, _)| group_of(k) == group) {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn group_hashes(&self) -> BTreeMap<String, String> {
        self.groups()
            .into_iter()
            .map(|g| {
                let hash = self.group_hash(&g);
                (g, hash)
            })
            .collect()
    }

    /// One plain SGD step: `θ ← θ − lr · ∇θ`.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Matrix>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd_step", format!("gradient for {name}")));
            }
            for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
            if !p.is_finite() {
                return Err(Error::NonFinite("sgd_step"));
            }
        }
        Ok(())
    }

    pub fn linear(&self, prefix: &str) -> Result<LinearParams> {
        Ok(LinearParams {
            w: self.get(&format!("{prefix}.w"))?.clone(),
            b: self.get(&format!("{prefix}.b"))?.clone(),
        })
    }

    pub fn insert_linear(&mut self, prefix: &str, p: &LinearParams) {
        self.insert(format!("{prefix}.w"), p.w.clone());
        self.insert(format!("{prefix}.b"), p.b.clone());
    }

    pub fn mlp(&self, prefix: &str, activations: &[Activation]) -> Result<MlpSpec> {
        let layers = activations
            .iter()
            .enumerate()
            .map(|(i, a)| {
                Ok(MlpLayer {
                    activation: *a,
                    params: self.linear(&format!("{prefix}.l{i}"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpSpec::new(layers)
    }

    pub fn insert_mlp(&mut self, prefix: &str, spec: &MlpSpec) {
        for (i, layer) in spec.layers.iter().enumerate() {
            self.insert_linear(&format!("{prefix}.l{i}"), &layer.params);
        }
    }
}

/// Seeded parameter initialization. Every parameter draws from its own
/// stream derived from the run seed and its name, so adding a parameter
/// never perturbs the others.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    /// Uniform in `[-1/√cols, 1/√cols]`.
    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Matrix {
        let bound = 1.0 / (cols.max(1) as f64).sqrt();
        self.uniform(name, rows, cols, bound)
    }

    pub fn uniform(&self, name: &str, rows: usize, cols: usize, bound: f64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let dist = Uniform::new_inclusive(-bound, bound);
        Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
    }

    pub fn linear(&self, store: &mut ParamStore, prefix: &str, d_out: usize, d_in: usize) {
        let w = format!("{prefix}.w");
        store.insert(&w, self.matrix(&w, d_out, d_in));
        store.insert(format!("{prefix}.b"), Matrix::zeros(d_out, 1));
    }

    /// `dims[0]` is the input width; each later entry is a layer's output
    /// width before its activation.
    pub fn mlp(&self, store: &mut ParamStore, prefix: &str, dims: &[usize], activations: &[Activation]) {
        debug_assert_eq!(dims.len(), activations.len() + 1);
        let mut width = dims[0];
        for (i, (out, act)) in dims[1..].iter().zip(activations).enumerate() {
            self.linear(store, &format!("{prefix}.l{i}"), *out, width);
            width = act.output_dim(*out);
        }
    }

    pub fn layer_norm(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.gamma"), Matrix::filled(1, 1, 1.0));
        store.insert(format!("{prefix}.beta"), Matrix::zeros(1, 1));
    }
}

/// The set of parameter groups that training may update.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    groups: BTreeSet<String>,
    #[serde(default)]
    all: bool,
}

impl TrainMask {
    /// Nothing trainable.
    pub fn frozen() -> Self {
        Self::default()
    }

    /// Everything trainable; used by gradient checks.
    pub fn all() -> Self {
        TrainMask { groups: BTreeSet::new(), all: true }
    }

    pub fn groups<S: Into<String>>(groups: impl IntoIterator<Item = S>) -> Self {
        TrainMask {
            groups: groups.into_iter().map(Into::into).collect(),
            all: false,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.all || self.groups.contains(group_of(name))
    }

    pub fn trainable_groups(&self) -> &BTreeSet<String> {
        &self.groups
    }
}

/// Gradients from a [`Graph`]: node adjoints plus one entry per trainable
/// parameter bound into the graph (zero when the loss does not reach it).
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub nodes: Gradients,
    pub params: BTreeMap<String, Matrix>,
}

/// A tape that binds named parameters from a store. Each parameter is
/// recorded as a single leaf no matter how often it is used.
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
    mask: &'a TrainMask,
    bound: BTreeMap<String, Var>,
}

impl<'a> Deref for Graph<'a> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl<'a> DerefMut for Graph<'a> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mask: &'a TrainMask) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            mask,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.tape.leaf(value, self.mask.is_trainable(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `W x + b` with parameters `{prefix}.w`, `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let wx = self.tape.matmul(w, x)?;
        self.tape.add_col(wx, b)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        use crate::numerics::kernels::Axis;
        match act {
            Activation::Identity => Ok(x),
            Activation::Relu => self.tape.relu(x),
            Activation::Gelu => self.tape.gelu(x),
            Activation::Softmax => self.tape.softmax(x, Axis::Cols),
            Activation::Geglu => {
                let rows = self.tape.value(x)?.rows();
                if rows % 2 != 0 {
                    return Err(Error::shape("geglu", "odd pre-activation width"));
                }
                let half = rows / 2;
                let gate = self.tape.slice_rows(x, 0, half)?;
                let lin = self.tape.slice_rows(x, half, half)?;
                let gate = self.tape.gelu(gate)?;
                self.tape.mul(gate, lin)
            }
        }
    }

    /// MLP with layers `{prefix}.l{i}`.
    pub fn mlp(&mut self, x: Var, prefix: &str, activations: &[Activation]) -> Result<Var> {
        let mut h = x;
        for (i, act) in activations.iter().enumerate() {
            h = self.linear(h, &format!("{prefix}.l{i}"))?;
            h = self.activate(h, *act)?;
        }
        Ok(h)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str, epsilon: f64) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.tape.layer_norm_cols(x, g, b, epsilon)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGradients> {
        let nodes = self.tape.backward(loss)?;
        let mut params = BTreeMap::new();
        for (name, var) in &self.bound {
            if !self.mask.is_trainable(name) {
                continue;
            }
            let g = match nodes.get(*var) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.tape.value(*var)?.shape();
                    Matrix::zeros(r, c)
                }
            };
            params.insert(name.clone(), g);
        }
        Ok(ParamGradients { nodes, params })
    }
}
