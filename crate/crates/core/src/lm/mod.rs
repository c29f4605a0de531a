//! Toy causal decoder: learned positions, pre-norm blocks, GELU MLP, untied head.
//!
//! Projection weights are stored `[d_out × d_in]` and applied as `y = W·x`
//! (row-major activations use `X·Wᵀ`), so an adapter on a projection sees
//! the weight with neurons as columns.

mod sample;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use sample::{draw, filter_distribution, SamplerConfig};

use crate::adapters::{adapted_weight, merge, Adapter, AdapterMethod};
use crate::corpus::EOS;
use crate::energy::MatrixKind;
use crate::error::{Error, Result};
use crate::store::sha256_hex;
use crate::store::RawTensor;
use crate::tensor::{Graph, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;

fn default_attach() -> Vec<MatrixKind> {
    vec![MatrixKind::Q, MatrixKind::V]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_attach")]
    pub attach_points: Vec<MatrixKind>,
}

impl LMConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 64,
            attach_points: default_attach(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} leaves no room past the reserved tokens", self.vocab_size));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("model extents must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < 2 {
            return bad(format!("max_seq_len {} < 2", self.max_seq_len));
        }
        Ok(())
    }

    /// Shape of the weight an adapter at `kind` wraps, as `(d, n)`.
    pub fn adapted_dims(&self, kind: MatrixKind) -> (usize, usize) {
        match kind {
            MatrixKind::Ffn => (self.d_ff, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }

    /// Architecture equality, ignoring the default attach set.
    pub fn same_architecture(&self, other: &LMConfig) -> bool {
        (self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len)
            == (other.vocab_size, other.d_model, other.n_layers, other.n_heads, other.d_ff, other.max_seq_len)
    }
}

/// Which leaves of a bound model receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    BaseWeights,
    Adapters,
}

/// Adapters attached to a model, keyed by `(layer, kind)`.
#[derive(Debug, Clone)]
pub struct AdapterSet<T> {
    pub method: AdapterMethod,
    pub slots: BTreeMap<(usize, MatrixKind), Adapter<T>>,
    /// Fingerprint of the base weights when the adapters were attached.
    pub base_fingerprint: String,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn points(&self) -> Vec<MatrixKind> {
        let mut ks: Vec<MatrixKind> = self.slots.keys().map(|&(_, k)| k).collect();
        ks.sort();
        ks.dedup();
        ks
    }

    pub fn param_count(&self) -> usize {
        self.slots.values().map(Adapter::param_count).sum()
    }

    /// `(store name, tensor)` in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (&(layer, kind), a) in &self.slots {
            for (n, t) in a.named_params() {
                out.push((adapter_tensor_name(layer, kind, n), t));
            }
        }
        out
    }
}

pub fn adapter_tensor_name(layer: usize, kind: MatrixKind, tensor: &str) -> String {
    format!("layer.{layer}.{kind}.{tensor}")
}

#[derive(Debug, Clone)]
pub struct TransformerLM<T> {
    cfg: LMConfig,
    weights: BTreeMap<String, Tensor<T>>,
    adapters: Option<AdapterSet<T>>,
}

/// Graph handles of a model bound for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundLM {
    /// Effective weights (adapted where an adapter is attached and not bypassed).
    weights: BTreeMap<String, Var>,
    /// Trainable leaves in canonical order.
    pub trainable: Vec<(String, Var)>,
}

fn layer_names(i: usize) -> [String; 10] {
    [
        format!("layer.{i}.ln1.g"),
        format!("layer.{i}.ln1.b"),
        format!("layer.{i}.attn.q.w"),
        format!("layer.{i}.attn.k.w"),
        format!("layer.{i}.attn.v.w"),
        format!("layer.{i}.attn.o.w"),
        format!("layer.{i}.ln2.g"),
        format!("layer.{i}.ln2.b"),
        format!("layer.{i}.ffn.up.w"),
        format!("layer.{i}.ffn.down.w"),
    ]
}

/// Name → shape of every base weight.
pub fn weight_shapes(cfg: &LMConfig) -> BTreeMap<String, Vec<usize>> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let mut m = BTreeMap::new();
    m.insert("tok_emb".to_string(), vec![v, d]);
    m.insert("pos_emb".to_string(), vec![cfg.max_seq_len, d]);
    for i in 0..cfg.n_layers {
        let names = layer_names(i);
        let shapes = [vec![d], vec![d], vec![d, d], vec![d, d], vec![d, d], vec![d, d], vec![d], vec![d], vec![f, d], vec![d, f]];
        for (n, s) in names.into_iter().zip(shapes) {
            m.insert(n, s);
        }
    }
    m.insert("ln_f.g".to_string(), vec![d]);
    m.insert("ln_f.b".to_string(), vec![d]);
    m.insert("head.w".to_string(), vec![v, d]);
    m
}

impl<T: Scalar> TransformerLM<T> {
    pub fn new(cfg: LMConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
        };
        let mut w = BTreeMap::new();
        w.insert("tok_emb".to_string(), normal(&[v, d], 0.5));
        w.insert("pos_emb".to_string(), normal(&[cfg.max_seq_len, d], 0.1));
        let proj = 1.0 / (d as f64).sqrt();
        let down = 1.0 / (f as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt();
        for i in 0..cfg.n_layers {
            let [ln1g, ln1b, q, k, vv, o, ln2g, ln2b, up, dn] = layer_names(i);
            w.insert(ln1g, Tensor::ones(&[d]));
            w.insert(ln1b, Tensor::zeros(&[d]));
            w.insert(q, normal(&[d, d], proj));
            w.insert(k, normal(&[d, d], proj));
            w.insert(vv, normal(&[d, d], proj));
            w.insert(o, normal(&[d, d], proj / (2.0 * cfg.n_layers as f64).sqrt()));
            w.insert(ln2g, Tensor::ones(&[d]));
            w.insert(ln2b, Tensor::zeros(&[d]));
            w.insert(up, normal(&[f, d], proj));
            w.insert(dn, normal(&[d, f], down));
        }
        w.insert("ln_f.g".to_string(), Tensor::ones(&[d]));
        w.insert("ln_f.b".to_string(), Tensor::zeros(&[d]));
        w.insert("head.w".to_string(), normal(&[v, d], proj));
        Ok(Self {
            cfg,
            weights: w,
            adapters: None,
        })
    }

    /// Rebuilds a model from named weights, checking names and shapes.
    pub fn from_weights(cfg: LMConfig, weights: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let shapes = weight_shapes(&cfg);
        if shapes.len() != weights.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} weight tensors, found {}",
                shapes.len(),
                weights.len()
            )));
        }
        for (name, shape) in &shapes {
            match weights.get(name) {
                None => return Err(Error::ArchitectureMismatch(format!("missing weight '{name}'"))),
                Some(w) if w.shape() != shape.as_slice() => {
                    return Err(Error::ArchitectureMismatch(format!(
                        "weight '{name}' has shape {:?}, expected {shape:?}",
                        w.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            cfg,
            weights,
            adapters: None,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::Model(format!("no weight named '{name}'")))
    }

    pub fn adapters(&self) -> Option<&AdapterSet<T>> {
        self.adapters.as_ref()
    }

    pub fn adapters_mut(&mut self) -> Option<&mut AdapterSet<T>> {
        self.adapters.as_mut()
    }

    pub fn base_param_count(&self) -> usize {
        self.weights.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over the base weights in name order.
    pub fn base_fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in &self.weights {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            let raw = RawTensor::from_tensor(t);
            for &s in raw.shape() {
                bytes.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
        }
        sha256_hex(&bytes)
    }

    /// Wraps the projections at `points` in every layer with identity-initialized adapters.
    pub fn attach_adapters(&mut self, method: AdapterMethod, points: &[MatrixKind], rng: &mut impl Rng) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::Adapter("adapters already attached; detach first".into()));
        }
        let mut slots = BTreeMap::new();
        for layer in 0..self.cfg.n_layers {
            for &kind in points {
                let (d, n) = self.cfg.adapted_dims(kind);
                slots.insert((layer, kind), Adapter::new(method, d, n, rng)?);
            }
        }
        self.adapters = Some(AdapterSet {
            method,
            slots,
            base_fingerprint: self.base_fingerprint(),
        });
        Ok(())
    }

    /// Installs an adapter set restored from storage.
    pub fn set_adapters(&mut self, set: AdapterSet<T>) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::Adapter("adapters already attached; detach first".into()));
        }
        for (&(layer, kind), a) in &set.slots {
            if layer >= self.cfg.n_layers || a.dims() != self.cfg.adapted_dims(kind) {
                return Err(Error::ArchitectureMismatch(format!(
                    "adapter for layer {layer} {kind} has dims {:?}, model expects {:?}",
                    a.dims(),
                    self.cfg.adapted_dims(kind)
                )));
            }
        }
        self.adapters = Some(set);
        Ok(())
    }

    pub fn detach_adapters(&mut self) -> Option<AdapterSet<T>> {
        self.adapters.take()
    }

    /// Folds attached adapters into the base weights and detaches them.
    pub fn merge_adapters(&mut self) -> Result<()> {
        let Some(set) = self.adapters.take() else {
            return Ok(());
        };
        for (&(layer, kind), a) in &set.slots {
            let name = kind.weight_name(layer);
            let merged = merge(a, &self.weights[&name])?;
            self.weights.insert(name, merged);
        }
        Ok(())
    }

    /// Errors unless the base weights still match the fingerprint taken at attach time.
    pub fn check_bypass(&self) -> Result<()> {
        match &self.adapters {
            None => Err(Error::Model("reference bypass needs attached adapters".into())),
            Some(set) if set.base_fingerprint != self.base_fingerprint() => Err(Error::Model(
                "base weights changed since the adapters were attached; bypass would not recover the reference"
                    .into(),
            )),
            Some(_) => Ok(()),
        }
    }

    /// Trainable tensors for `mode`, in the same order as [`BoundLM::trainable`].
    pub fn trainable_mut(&mut self, mode: Trainable) -> Vec<(String, &mut Tensor<T>)> {
        match mode {
            Trainable::Nothing => Vec::new(),
            Trainable::BaseWeights => self.weights.iter_mut().map(|(n, t)| (n.clone(), t)).collect(),
            Trainable::Adapters => {
                let mut out = Vec::new();
                if let Some(set) = &mut self.adapters {
                    for (&(layer, kind), a) in set.slots.iter_mut() {
                        for (n, t) in a.named_params_mut() {
                            out.push((adapter_tensor_name(layer, kind, n), t));
                        }
                    }
                }
                out
            }
        }
    }

    pub fn trainable_count(&self, mode: Trainable) -> usize {
        match mode {
            Trainable::Nothing => 0,
            Trainable::BaseWeights => self.base_param_count(),
            Trainable::Adapters => self.adapters.as_ref().map_or(0, AdapterSet::param_count),
        }
    }

    /// Registers weights on `g`; adapters are applied unless `bypass`.
    pub fn bind(&self, g: &mut Graph<T>, mode: Trainable, bypass: bool) -> Result<BoundLM> {
        self.bind_leaves(g, mode, bypass, |g, t| g.param(t.clone()))
    }

    /// As [`bind`](Self::bind), with trainable leaves supplied by `leaf` in canonical order.
    pub fn bind_leaves(
        &self,
        g: &mut Graph<T>,
        mode: Trainable,
        bypass: bool,
        mut leaf: impl FnMut(&mut Graph<T>, &Tensor<T>) -> Var,
    ) -> Result<BoundLM> {
        let mut trainable = Vec::new();
        let mut weights = BTreeMap::new();
        for (name, t) in &self.weights {
            let v = if mode == Trainable::BaseWeights {
                let v = leaf(g, t);
                trainable.push((name.clone(), v));
                v
            } else {
                g.constant(t.clone())
            };
            weights.insert(name.clone(), v);
        }
        if let (Some(set), false) = (&self.adapters, bypass) {
            for (&(layer, kind), a) in &set.slots {
                let bound = a.bind_with(|n, t| {
                    if mode == Trainable::Adapters {
                        let v = leaf(g, t);
                        trainable.push((adapter_tensor_name(layer, kind, n), v));
                        v
                    } else {
                        g.constant(t.clone())
                    }
                });
                let name = kind.weight_name(layer);
                let w_eff = adapted_weight(g, &bound, weights[&name])?;
                weights.insert(name, w_eff);
            }
        }
        Ok(BoundLM { weights, trainable })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        Ok(())
    }

    /// Logits `[T×V]` for `tokens` on a bound graph.
    pub fn logits(&self, g: &mut Graph<T>, b: &BoundLM, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let w = |n: &str| b.weights[n];
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.embedding(w("tok_emb"), tokens)?;
        let pos = g.embedding(w("pos_emb"), &positions)?;
        let mut x = g.add(tok, pos)?;
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
        for i in 0..self.cfg.n_layers {
            let [ln1g, ln1b, q, k, v, o, ln2g, ln2b, up, dn] = layer_names(i);
            let h = g.layer_norm(x, w(&ln1g), w(&ln1b), LN_EPS)?;
            let qh = g.matmul_nt(h, w(&q))?;
            let kh = g.matmul_nt(h, w(&k))?;
            let vh = g.matmul_nt(h, w(&v))?;
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for hd in 0..self.cfg.n_heads {
                let qs = g.slice_cols(qh, hd * dh, dh)?;
                let ks = g.slice_cols(kh, hd * dh, dh)?;
                let vs = g.slice_cols(vh, hd * dh, dh)?;
                let scores = g.matmul_nt(qs, ks)?;
                let scores = g.scale(scores, inv_sqrt);
                let att = g.causal_softmax_rows(scores)?;
                heads.push(g.matmul(att, vs)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let att_out = g.matmul_nt(cat, w(&o))?;
            x = g.add(x, att_out)?;
            let h2 = g.layer_norm(x, w(&ln2g), w(&ln2b), LN_EPS)?;
            let u = g.matmul_nt(h2, w(&up))?;
            let u = g.gelu(u);
            let ff = g.matmul_nt(u, w(&dn))?;
            x = g.add(x, ff)?;
        }
        let xf = g.layer_norm(x, w("ln_f.g"), w("ln_f.b"), LN_EPS)?;
        g.matmul_nt(xf, w("head.w"))
    }

    /// Per-token log-probabilities of `response` given `prompt`, as a vector var.
    pub fn response_logprobs(&self, g: &mut Graph<T>, b: &BoundLM, prompt: &[usize], response: &[usize]) -> Result<Var> {
        check_response(prompt, response)?;
        let total = prompt.len() + response.len();
        if total > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: total,
                max: self.cfg.max_seq_len,
            });
        }
        let mut input = Vec::with_capacity(total - 1);
        input.extend_from_slice(prompt);
        input.extend_from_slice(&response[..response.len() - 1]);
        let logits = self.logits(g, b, &input)?;
        pick_response(g, logits, prompt.len(), response)
    }

    /// Logits for a single sequence with all weights frozen.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::Nothing, false)?;
        let out = self.logits(&mut g, &b, tokens)?;
        Ok(g.value(out).clone())
    }

    /// `log π(response | prompt)`: summed over response tokens, `<eos>` included.
    pub fn sequence_logprob(&self, prompt: &[usize], response: &[usize]) -> Result<f64> {
        self.sequence_logprob_with(prompt, response, false)
    }

    /// As [`sequence_logprob`](Self::sequence_logprob), optionally bypassing adapters.
    pub fn sequence_logprob_with(&self, prompt: &[usize], response: &[usize], bypass: bool) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::Nothing, bypass)?;
        let lps = self.response_logprobs(&mut g, &b, prompt, response)?;
        // summed in T, exactly as the training graph does
        let total = g.sum(lps);
        Ok(g.value(total).item().as_f64())
    }

    /// Samples a continuation of `prompt`; stops after `<eos>`, `max_new` tokens, or a full context.
    pub fn sample(&self, prompt: &[usize], cfg: &SamplerConfig, max_new: usize, seed: u64) -> Result<Vec<usize>> {
        use rand::SeedableRng;
        if max_new == 0 {
            return Err(Error::Config("max_new must be at least 1".into()));
        }
        self.check_tokens(prompt)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::Nothing, false)?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.cfg.max_seq_len {
            let logits = self.logits(&mut g, &b, &seq)?;
            let last: Vec<f64> = {
                let t = g.value(logits);
                let v = self.cfg.vocab_size;
                t.data()[(seq.len() - 1) * v..].iter().map(|x| x.as_f64()).collect()
            };
            let dist = filter_distribution(&last, cfg)?;
            let tok = draw(&dist, &mut rng);
            seq.push(tok);
            out.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok(out)
    }
}

/// Log-probabilities of `response` read off `logits` of `prompt ++ response[..-1]`.
///
/// Rows before `prompt_len − 1` do not enter the result.
pub fn pick_response<T: Scalar>(g: &mut Graph<T>, logits: Var, prompt_len: usize, response: &[usize]) -> Result<Var> {
    let lp = g.log_softmax_rows(logits)?;
    let at: Vec<(usize, usize)> = response
        .iter()
        .enumerate()
        .map(|(k, &tok)| (prompt_len - 1 + k, tok))
        .collect();
    g.pick(lp, &at)
}

pub(crate) fn check_response(prompt: &[usize], response: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    if response.last() != Some(&EOS) {
        return Err(Error::MissingEos);
    }
    Ok(())
}

#[cfg(test)]
mod tests;
