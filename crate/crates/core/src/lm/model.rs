use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var, LN_EPS};
use crate::params::ParamStore;

/// Architecture of the causal backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            context_len: 128,
            vocab_size: super::Vocab::SIZE,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad(format!("layers, width and heads must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.context_len < 2 {
            return bad(format!("context_len {} < 2", self.context_len));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} < 4", self.vocab_size));
        }
        Ok(())
    }

    /// Parameters outside the embeddings, head and final norm: attention,
    /// MLP and per-block layer norms.
    pub fn non_embedding_params(&self) -> usize {
        let m = self.d_model;
        self.n_layers * (12 * m * m + 13 * m)
    }

    pub(crate) fn to_fields(self) -> Vec<u32> {
        [self.n_layers, self.d_model, self.n_heads, self.context_len, self.vocab_size]
            .iter()
            .map(|&v| v as u32)
            .collect()
    }

    pub(crate) fn from_fields(fields: &[u32]) -> Result<Self> {
        let [n_layers, d_model, n_heads, context_len, vocab_size] = fields else {
            return Err(Error::Format(format!("expected 5 config fields, found {}", fields.len())));
        };
        let cfg = Self {
            n_layers: *n_layers as usize,
            d_model: *d_model as usize,
            n_heads: *n_heads as usize,
            context_len: *context_len as usize,
            vocab_size: *vocab_size as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Transform applied to each block's output before it feeds the next block.
pub trait LayerHook {
    /// Called at the start of every forward pass, before any block runs.
    fn begin(&mut self) {}

    fn apply(&mut self, tape: &mut Tape, layer: usize, h: Var) -> Result<Var>;
}

/// Hook that returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityHook;

impl LayerHook for IdentityHook {
    fn apply(&mut self, _tape: &mut Tape, _layer: usize, h: Var) -> Result<Var> {
        Ok(h)
    }
}

const TOK: usize = 0;
const POS: usize = 1;
const PER_LAYER: usize = 12;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const W_QKV: usize = 2;
const B_QKV: usize = 3;
const W_O: usize = 4;
const B_O: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W_FC: usize = 8;
const B_FC: usize = 9;
const W_PROJ: usize = 10;
const B_PROJ: usize = 11;

/// Parameters of a GPT-style causal transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: LmConfig,
    params: ParamStore,
    step: u64,
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Output of the last block after its hook, before the final norm.
    pub last_hidden: Var,
}

impl Backbone {
    /// Fresh initialisation: N(0, 0.02) weights, residual projections scaled
    /// by 1/sqrt(2L), zero biases, unit norm gains and a zero output head so
    /// the untrained model predicts the uniform distribution.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let LmConfig {
            n_layers: l,
            d_model: m,
            context_len: ctx,
            vocab_size: v,
            ..
        } = config;
        let std = 0.02;
        let proj_std = std / ((2 * l) as f64).sqrt();
        let mut p = ParamStore::new();
        p.push("tok_emb", Tensor::randn(&[v, m], std, &mut rng));
        p.push("pos_emb", Tensor::randn(&[ctx, m], std, &mut rng));
        for i in 0..l {
            p.push(format!("layer{i}.ln1.gain"), Tensor::full(&[m], 1.0));
            p.push(format!("layer{i}.ln1.bias"), Tensor::zeros(&[m]));
            p.push(format!("layer{i}.attn.w_qkv"), Tensor::randn(&[m, 3 * m], std, &mut rng));
            p.push(format!("layer{i}.attn.b_qkv"), Tensor::zeros(&[3 * m]));
            p.push(format!("layer{i}.attn.w_out"), Tensor::randn(&[m, m], proj_std, &mut rng));
            p.push(format!("layer{i}.attn.b_out"), Tensor::zeros(&[m]));
            p.push(format!("layer{i}.ln2.gain"), Tensor::full(&[m], 1.0));
            p.push(format!("layer{i}.ln2.bias"), Tensor::zeros(&[m]));
            p.push(format!("layer{i}.mlp.w_fc"), Tensor::randn(&[m, 4 * m], std, &mut rng));
            p.push(format!("layer{i}.mlp.b_fc"), Tensor::zeros(&[4 * m]));
            p.push(format!("layer{i}.mlp.w_proj"), Tensor::randn(&[4 * m, m], proj_std, &mut rng));
            p.push(format!("layer{i}.mlp.b_proj"), Tensor::zeros(&[m]));
        }
        p.push("ln_f.gain", Tensor::full(&[m], 1.0));
        p.push("ln_f.bias", Tensor::zeros(&[m]));
        p.push("head.weight", Tensor::zeros(&[m, v]));
        p.push("head.bias", Tensor::zeros(&[v]));
        Ok(Self {
            config,
            params: p,
            step: 0,
        })
    }

    pub(crate) fn from_parts(config: LmConfig, params: ParamStore, step: u64) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        reference.params.check_layout(&params)?;
        Ok(Self { config, params, step })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect()
    }

    /// Causal forward pass over `ids` with parameters previously bound by [`bind`](Self::bind).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ids: &[usize],
        mut hook: Option<&mut dyn LayerHook>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if ids.is_empty() {
            return Err(Error::Contract("forward over an empty sequence".into()));
        }
        if ids.len() > cfg.context_len {
            return Err(Error::Context {
                len: ids.len(),
                context: cfg.context_len,
            });
        }
        if let Some(hook) = hook.as_deref_mut() {
            hook.begin();
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.embedding(vars[TOK], ids)?;
        let pos = tape.embedding(vars[POS], &positions)?;
        let mut h = tape.add(tok, pos)?;
        for layer in 0..cfg.n_layers {
            h = self.block(tape, &vars[2 + layer * PER_LAYER..2 + (layer + 1) * PER_LAYER], h)?;
            if let Some(hook) = hook.as_deref_mut() {
                h = hook.apply(tape, layer, h)?;
            }
        }
        let base = 2 + cfg.n_layers * PER_LAYER;
        let normed = tape.layer_norm(h, vars[base], vars[base + 1], LN_EPS)?;
        let logits = tape.matmul(normed, vars[base + 2])?;
        let logits = tape.add_bias(logits, vars[base + 3])?;
        Ok(Forward {
            logits,
            last_hidden: h,
        })
    }

    fn block(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let a = tape.layer_norm(x, p[LN1_G], p[LN1_B], LN_EPS)?;
        let qkv = tape.matmul(a, p[W_QKV])?;
        let qkv = tape.add_bias(qkv, p[B_QKV])?;
        let att = tape.causal_attention(qkv, self.config.n_heads)?;
        let att = tape.matmul(att, p[W_O])?;
        let att = tape.add_bias(att, p[B_O])?;
        let x = tape.add(x, att)?;
        let b = tape.layer_norm(x, p[LN2_G], p[LN2_B], LN_EPS)?;
        let f = tape.matmul(b, p[W_FC])?;
        let f = tape.add_bias(f, p[B_FC])?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, p[W_PROJ])?;
        let f = tape.add_bias(f, p[B_PROJ])?;
        tape.add(x, f)
    }

    /// Logits for `ids` as a detached tensor.
    pub fn logits(&self, ids: &[usize], hook: Option<&mut dyn LayerHook>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, ids, hook)?;
        Ok(tape.to_tensor(out.logits))
    }

    /// Next-token loss on a window: predicts `window[1..]` from `window[..n-1]`.
    pub fn window_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        window: &[usize],
        hook: Option<&mut dyn LayerHook>,
    ) -> Result<Var> {
        if window.len() < 2 {
            return Err(Error::Contract("a training window needs at least two tokens".into()));
        }
        let (inputs, targets) = (&window[..window.len() - 1], &window[1..]);
        let out = self.forward(tape, vars, inputs, hook)?;
        tape.softmax_cross_entropy(out.logits, targets)
    }

    /// Mean of the last block's hidden states over positions, frozen backbone only.
    pub fn embed_sequence(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot embed an empty sequence".into()));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, ids, None)?;
        let pooled = tape.mean_rows(out.last_hidden)?;
        Ok(tape.value(pooled).to_vec())
    }
}
