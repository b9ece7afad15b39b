//! Residual bottleneck adapters with one layer norm per transformer layer
//! shared by every node's adapter at that layer.
//!
//! An adapter maps `h` to `W_U · ReLU(W_D · LN(h) + b_D) + b_U + h`. Outputs of
//! several adapters on the same input are averaged as `h + mean(deltas)`,
//! which equals the mean of the full outputs and leaves `h` bit-identical
//! when every up-projection is zero.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::format::{ArtifactKind, NamedTensorFile};
use crate::lm::{LayerHook, LmConfig};
use crate::numcore::{Tape, Tensor, Var, LN_EPS};
use crate::params::ParamStore;

/// Standard deviation of the down-projection initialisation.
pub const DOWN_INIT_STD: f64 = 0.02;

const PER_NODE_LAYER: usize = 4;

/// Tape handles for one node's adapter at one layer.
#[derive(Clone, Copy, Debug)]
pub struct NodeVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// Tape handles for a layer's shared norm.
#[derive(Clone, Copy, Debug)]
pub struct LnVars {
    pub gain: Var,
    pub bias: Var,
}

/// `W_U · ReLU(W_D · x + b_D) + b_U` for an already normalised `x`.
pub fn adapter_delta(tape: &mut Tape, normed: Var, node: &NodeVars) -> Result<Var> {
    let z = tape.matmul(normed, node.w_down)?;
    let z = tape.add_bias(z, node.b_down)?;
    let z = tape.relu(z)?;
    let z = tape.matmul(z, node.w_up)?;
    tape.add_bias(z, node.b_up)
}

/// Single adapter: residual bottleneck over the shared norm.
pub fn adapter_forward(tape: &mut Tape, h: Var, node: &NodeVars, ln: &LnVars) -> Result<Var> {
    let normed = tape.layer_norm(h, ln.gain, ln.bias, LN_EPS)?;
    let delta = adapter_delta(tape, normed, node)?;
    tape.add(h, delta)
}

/// Mean of several adapters' outputs on the same input.
pub fn node_average(tape: &mut Tape, h: Var, nodes: &[NodeVars], ln: &LnVars) -> Result<Var> {
    if nodes.is_empty() {
        return Err(Error::Contract("node_average needs at least one node".into()));
    }
    let normed = tape.layer_norm(h, ln.gain, ln.bias, LN_EPS)?;
    let deltas = nodes
        .iter()
        .map(|n| adapter_delta(tape, normed, n))
        .collect::<Result<Vec<_>>>()?;
    let mean = tape.mean_of(&deltas)?;
    tape.add(h, mean)
}

/// Adapter parameters for every node of a tree plus the shared norms.
///
/// Tensor layout: `2L` norm tensors (gain, bias per layer), then for each
/// node and layer `w_down [m×d]`, `b_down [d]`, `w_up [d×m]`, `b_up [m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStore {
    n_layers: usize,
    d_model: usize,
    bottleneck: usize,
    node_count: usize,
    params: ParamStore,
}

impl AdapterStore {
    /// Zero up-projections and biases, Gaussian down-projections, unit norm gains.
    pub fn new(node_count: usize, lm: &LmConfig, bottleneck: usize, seed: u64) -> Result<Self> {
        if bottleneck == 0 {
            return Err(Error::Config("adapter bottleneck must be at least 1".into()));
        }
        if node_count == 0 {
            return Err(Error::Config("adapter store needs at least one node".into()));
        }
        let (l, m, d) = (lm.n_layers, lm.d_model, bottleneck);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for i in 0..l {
            p.push(format!("ln{i}.gain"), Tensor::full(&[m], 1.0));
            p.push(format!("ln{i}.bias"), Tensor::zeros(&[m]));
        }
        for n in 0..node_count {
            for i in 0..l {
                p.push(
                    format!("node{n}.layer{i}.w_down"),
                    Tensor::randn(&[m, d], DOWN_INIT_STD, &mut rng),
                );
                p.push(format!("node{n}.layer{i}.b_down"), Tensor::zeros(&[d]));
                p.push(format!("node{n}.layer{i}.w_up"), Tensor::zeros(&[d, m]));
                p.push(format!("node{n}.layer{i}.b_up"), Tensor::zeros(&[m]));
            }
        }
        Ok(Self {
            n_layers: l,
            d_model: m,
            bottleneck: d,
            node_count,
            params: p,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Indices of the shared norm's gain and bias at `layer`.
    pub fn ln_indices(&self, layer: usize) -> [usize; 2] {
        [2 * layer, 2 * layer + 1]
    }

    /// Indices of `w_down, b_down, w_up, b_up` for `node` at `layer`.
    pub fn node_indices(&self, node: usize, layer: usize) -> [usize; 4] {
        let base = 2 * self.n_layers + (node * self.n_layers + layer) * PER_NODE_LAYER;
        [base, base + 1, base + 2, base + 3]
    }

    /// Every tensor index owned by `node`, all layers.
    pub fn node_tensor_indices(&self, node: usize) -> Vec<usize> {
        (0..self.n_layers).flat_map(|i| self.node_indices(node, i)).collect()
    }

    pub fn shared_ln_indices(&self) -> Vec<usize> {
        (0..2 * self.n_layers).collect()
    }

    /// `L · (2·m·d + d + m)`.
    pub fn params_per_node(&self) -> usize {
        self.n_layers * (2 * self.d_model * self.bottleneck + self.bottleneck + self.d_model)
    }

    /// `L · 2m`.
    pub fn shared_ln_params(&self) -> usize {
        2 * self.n_layers * self.d_model
    }

    pub fn total_params(&self) -> usize {
        self.node_count * self.params_per_node() + self.shared_ln_params()
    }

    pub fn node_tensors(&self, node: usize) -> Vec<&Tensor> {
        self.node_tensor_indices(node)
            .into_iter()
            .map(|i| self.params.get(i))
            .collect()
    }

    pub fn check_compatible(&self, lm: &LmConfig) -> Result<()> {
        if lm.n_layers != self.n_layers || lm.d_model != self.d_model {
            return Err(Error::Config(format!(
                "adapters built for L={} m={} but backbone has L={} m={}",
                self.n_layers, self.d_model, lm.n_layers, lm.d_model
            )));
        }
        Ok(())
    }

    pub fn to_file(&self, step: u64) -> NamedTensorFile {
        let fields = [self.n_layers, self.d_model, self.bottleneck, self.node_count]
            .iter()
            .map(|&v| v as u32)
            .collect();
        NamedTensorFile {
            kind: ArtifactKind::Adapters,
            fields,
            step,
            params: self.params.clone(),
        }
    }

    pub fn from_file(file: NamedTensorFile) -> Result<Self> {
        if file.kind != ArtifactKind::Adapters {
            return Err(Error::Format("not an adapter checkpoint".into()));
        }
        let [l, m, d, n] = file.fields[..] else {
            return Err(Error::Format("adapter header needs 4 fields".into()));
        };
        let lm = LmConfig {
            n_layers: l as usize,
            d_model: m as usize,
            n_heads: 1,
            context_len: 2,
            vocab_size: 4,
        };
        let mut store = Self::new(n as usize, &lm, d as usize, 0)?;
        store.params.check_layout(&file.params)?;
        store.params = file.params;
        Ok(store)
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        self.to_file(0).write_to(w)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        Self::from_file(NamedTensorFile::read_from(r)?)
    }
}

/// How several root-to-leaf paths are combined at each layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PathCombine {
    /// Mean over paths of each path's node mean.
    #[default]
    MeanOfPaths,
    /// Plain mean over the union of nodes.
    UnionOfNodes,
}

/// Layer hook that applies a set of node paths from an [`AdapterStore`].
///
/// Each distinct node's adapter is evaluated once per layer even when it
/// lies on several paths. Parameters are recorded on the tape lazily at
/// first use in each forward pass; afterwards [`bound`](Self::bound) maps
/// store tensor indices to their tape handles.
pub struct AdapterHook<'a> {
    store: &'a AdapterStore,
    paths: Vec<Vec<usize>>,
    combine: PathCombine,
    trainable: bool,
    bound: BTreeMap<usize, Var>,
    preset: BTreeMap<usize, Var>,
}

impl<'a> AdapterHook<'a> {
    pub fn new(store: &'a AdapterStore, paths: Vec<Vec<usize>>, combine: PathCombine, trainable: bool) -> Result<Self> {
        if paths.is_empty() || paths.iter().any(Vec::is_empty) {
            return Err(Error::Contract("adapter hook needs non-empty paths".into()));
        }
        if let Some(&bad) = paths.iter().flatten().find(|&&n| n >= store.node_count) {
            return Err(Error::Config(format!(
                "node {bad} has no adapters (store holds {})",
                store.node_count
            )));
        }
        Ok(Self {
            store,
            paths,
            combine,
            trainable,
            bound: BTreeMap::new(),
            preset: BTreeMap::new(),
        })
    }

    /// Hook over a single path.
    pub fn single(store: &'a AdapterStore, path: Vec<usize>, trainable: bool) -> Result<Self> {
        Self::new(store, vec![path], PathCombine::MeanOfPaths, trainable)
    }

    pub fn bound(&self) -> &BTreeMap<usize, Var> {
        &self.bound
    }

    pub fn paths(&self) -> &[Vec<usize>] {
        &self.paths
    }

    /// Store tensor indices this hook reads: shared norms plus every node on
    /// any path, ascending.
    pub fn tensor_indices(&self) -> Vec<usize> {
        let mut nodes: Vec<usize> = self.paths.iter().flatten().copied().collect();
        nodes.sort_unstable();
        nodes.dedup();
        let mut out = self.store.shared_ln_indices();
        out.extend(nodes.into_iter().flat_map(|n| self.store.node_tensor_indices(n)));
        out
    }

    /// Uses `var` for store tensor `idx` on every pass instead of binding
    /// the stored value.
    pub fn preset(&mut self, idx: usize, var: Var) {
        self.preset.insert(idx, var);
    }

    fn var(&mut self, tape: &mut Tape, idx: usize) -> Var {
        if let Some(&v) = self.preset.get(&idx) {
            self.bound.insert(idx, v);
            return v;
        }
        let (store, trainable) = (self.store, self.trainable);
        *self.bound.entry(idx).or_insert_with(|| {
            let t = store.params.get(idx);
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        })
    }

    fn node_vars(&mut self, tape: &mut Tape, node: usize, layer: usize) -> NodeVars {
        let [a, b, c, d] = self.store.node_indices(node, layer);
        NodeVars {
            w_down: self.var(tape, a),
            b_down: self.var(tape, b),
            w_up: self.var(tape, c),
            b_up: self.var(tape, d),
        }
    }
}

impl LayerHook for AdapterHook<'_> {
    fn begin(&mut self) {
        self.bound.clear();
    }

    fn apply(&mut self, tape: &mut Tape, layer: usize, h: Var) -> Result<Var> {
        if layer >= self.store.n_layers {
            return Err(Error::Config(format!(
                "no adapter parameters for layer {layer} (store has {})",
                self.store.n_layers
            )));
        }
        let [g, b] = self.store.ln_indices(layer);
        let ln = LnVars {
            gain: self.var(tape, g),
            bias: self.var(tape, b),
        };
        let normed = tape.layer_norm(h, ln.gain, ln.bias, LN_EPS)?;

        let mut deltas: BTreeMap<usize, Var> = BTreeMap::new();
        let nodes: Vec<usize> = self.paths.iter().flatten().copied().collect();
        for node in nodes {
            if deltas.contains_key(&node) {
                continue;
            }
            let nv = self.node_vars(tape, node, layer);
            deltas.insert(node, adapter_delta(tape, normed, &nv)?);
        }

        let combined = match self.combine {
            PathCombine::MeanOfPaths => {
                let per_path = self
                    .paths
                    .iter()
                    .map(|p| {
                        let ds: Vec<Var> = p.iter().map(|n| deltas[n]).collect();
                        tape.mean_of(&ds)
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.mean_of(&per_path)?
            }
            PathCombine::UnionOfNodes => {
                let all: Vec<Var> = deltas.values().copied().collect();
                tape.mean_of(&all)?
            }
        };
        tape.add(h, combined)
    }
}
