//! SFT and preference-optimization loops: Adam, cosine warmup, clipping, checkpoints.
//!
//! Step `s` (0-based) evaluates the loss on batch `s` with the current
//! parameters, logs it with `lr(s)`, then applies the update. A checkpoint at
//! step `k` therefore holds the parameters after `k` updates, and resuming
//! from it replays steps `k..total` exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapters::{AdapterMethod, Variant};
use crate::corpus::SftExample;
use crate::energy::MatrixKind;
use crate::error::{Error, Result};
use crate::lm::{pick_response, BoundLM, LMConfig, Trainable, TransformerLM};
use crate::prefopt::{dpo_loss, reference_logprobs, BatchStats, PairLogprobs, PreferencePair, Reference};
use crate::store::{adapter_checkpoint, model_checkpoint, model_from_checkpoint, Checkpoint, ModelMeta};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const FINAL_CKPT: &str = "final.rpck";
pub const ADAPTER_FILE: &str = "adapter.rpck";

/// Learning rate at `step`: linear warmup from 0, then cosine decay to 0 at `total`.
pub fn cosine_warmup_lr(step: usize, peak: f64, total: usize, warmup_frac: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("total steps must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&warmup_frac) {
        return Err(Error::Config(format!("warmup fraction must lie in [0, 1), got {warmup_frac}")));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} outside schedule of {total} steps")));
    }
    let warmup = warmup_steps(total, warmup_frac);
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn warmup_steps(total: usize, warmup_frac: f64) -> usize {
    ((warmup_frac * total as f64).round() as usize).min(total - 1)
}

/// Bias-corrected Adam with moments stored per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every `params[i]` with `grads[i]`. Nothing is modified on error.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<T>)>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidShape {
                op: "adam_step",
                msg: format!("{} parameters but {} gradients", params.len(), grads.len()),
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NanGradient(name.clone()));
            }
            for acc in [&self.m, &self.v] {
                if let Some(a) = acc.get(name) {
                    if a.shape() != p.shape() {
                        return Err(Error::shape("adam_step", a.shape(), p.shape()));
                    }
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((name, p), g) in params.into_iter().zip(grads) {
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi.as_f64();
                let mn = ADAM_BETA1 * mi.as_f64() + (1.0 - ADAM_BETA1) * gi;
                let vn = ADAM_BETA2 * vi.as_f64() + (1.0 - ADAM_BETA2) * gi * gi;
                *mi = T::from_f64(mn);
                *vi = T::from_f64(vn);
                let upd = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
                *w = T::from_f64(w.as_f64() - upd);
            }
        }
        Ok(())
    }

    fn write_to(&self, c: &mut Checkpoint) {
        for (n, t) in &self.m {
            c.insert(format!("opt.m.{n}"), t);
        }
        for (n, t) in &self.v {
            c.insert(format!("opt.v.{n}"), t);
        }
    }

    /// Restores moments stored under `opt.m.*` / `opt.v.*` with step counter `t`.
    pub fn from_checkpoint(c: &Checkpoint, t: u64) -> Result<Self> {
        let mut s = Self::new();
        s.t = t;
        for name in c.tensors.keys() {
            if let Some(p) = name.strip_prefix("opt.m.") {
                s.m.insert(p.to_string(), c.get(name)?);
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                s.v.insert(p.to_string(), c.get(name)?);
            }
        }
        Ok(s)
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = T::from_f64(x.as_f64() * k);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// All base weights trained against a frozen reference copy.
    Dpo,
    /// Rotation adapters, reference via bypass.
    #[default]
    Ropo,
    /// Low-rank adapters, reference via bypass.
    Lopo,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Dpo => "dpo",
            MethodKind::Ropo => "ropo",
            MethodKind::Lopo => "lopo",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(MethodKind::Dpo),
            "ropo" => Ok(MethodKind::Ropo),
            "lopo" => Ok(MethodKind::Lopo),
            _ => Err(Error::Config(format!("unknown method '{s}' (expected dpo, ropo or lopo)"))),
        }
    }
}

/// Preference-optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: MethodKind,
    /// Rotation variant (ropo only).
    pub variant: Variant,
    /// Low-rank rank and output scale (lopo only).
    pub rank: usize,
    pub lora_scale: f64,
    /// Adapted matrices; `None` uses the model config's attach points.
    pub attach_points: Option<Vec<MatrixKind>>,
    pub beta: f64,
    /// Peak learning rate; `None` picks the method default.
    pub lr: Option<f64>,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub warmup_frac: f64,
    pub batch_size: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 writes only step 0 and the final step.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::Ropo,
            variant: Variant::Full,
            rank: 4,
            lora_scale: 1.0,
            attach_points: None,
            beta: 0.1,
            lr: None,
            epochs: 3,
            steps: None,
            warmup_frac: 0.1,
            batch_size: 16,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac must lie in [0, 1), got {}", self.warmup_frac));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps == Some(0) {
            return bad("batch_size, epochs and steps must be at least 1".into());
        }
        if !(self.peak_lr() > 0.0 && self.peak_lr().is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.peak_lr()));
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        if self.method == MethodKind::Lopo && (self.rank == 0 || !self.lora_scale.is_finite()) {
            return bad("lopo needs rank ≥ 1 and a finite scale".into());
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.method {
            MethodKind::Dpo => 1e-4,
            MethodKind::Ropo | MethodKind::Lopo => 1e-3,
        })
    }

    pub fn adapter_method(&self) -> Option<AdapterMethod> {
        match self.method {
            MethodKind::Dpo => None,
            MethodKind::Ropo => Some(AdapterMethod::Rotation { variant: self.variant }),
            MethodKind::Lopo => Some(AdapterMethod::LowRank {
                rank: self.rank,
                scale: self.lora_scale,
            }),
        }
    }

    /// Label written into checkpoints and reports, e.g. `ropo-full`.
    pub fn method_label(&self) -> String {
        match self.adapter_method() {
            None => "dpo".into(),
            Some(m) => m.to_string(),
        }
    }

    fn trainable(&self) -> Trainable {
        match self.method {
            MethodKind::Dpo => Trainable::BaseWeights,
            _ => Trainable::Adapters,
        }
    }

    pub fn total_steps(&self, n_items: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n_items.div_ceil(self.batch_size))
    }
}

/// Supervised fine-tuning settings, including the architecture to initialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub attach_points: Vec<MatrixKind>,
    pub lr: f64,
    pub epochs: usize,
    pub steps: Option<usize>,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        let desk = LMConfig::desk(0);
        Self {
            d_model: desk.d_model,
            n_layers: desk.n_layers,
            n_heads: desk.n_heads,
            d_ff: desk.d_ff,
            max_seq_len: desk.max_seq_len,
            attach_points: desk.attach_points,
            lr: 3e-3,
            epochs: 20,
            steps: None,
            warmup_frac: 0.1,
            batch_size: 16,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn model_config(&self, vocab_size: usize) -> LMConfig {
        LMConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            attach_points: self.attach_points.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac must lie in [0, 1), got {}", self.warmup_frac)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps == Some(0) {
            return Err(Error::Config("batch_size, epochs and steps must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("lr must be positive and clip_norm non-negative".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_items: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n_items.div_ceil(self.batch_size))
    }
}

/// Indices of the items in batch `step`: a fresh seeded permutation per epoch.
pub fn batch_indices(n_items: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n_items.div_ceil(batch_size);
    let (epoch, within) = (step / per_epoch, step % per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut perm: Vec<usize> = (0..n_items).collect();
    perm.shuffle(&mut rng);
    let end = ((within + 1) * batch_size).min(n_items);
    perm[within * batch_size..end].to_vec()
}

/// One row of the preference training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignLogRow {
    pub step: usize,
    pub loss: f64,
    pub margin_mean: f64,
    pub margin_acc: f64,
    pub lp_chosen: f64,
    pub lp_rejected: f64,
    pub lp_eos: f64,
    pub lr: f64,
}

impl AlignLogRow {
    fn new(step: usize, s: BatchStats, lr: f64) -> Self {
        Self {
            step,
            loss: s.loss,
            margin_mean: s.margin_mean,
            margin_acc: s.margin_acc,
            lp_chosen: s.lp_chosen,
            lp_rejected: s.lp_rejected,
            lp_eos: s.lp_eos,
            lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_log<R: Serialize>(rows: &[R], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

// a non-finite activation during the forward pass is a diverged loss
fn nan_at(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NanLoss { step },
        e => e,
    }
}

/// Backpropagates `loss`, clips and applies one Adam update to the `mode` tensors.
#[allow(clippy::too_many_arguments)]
fn apply_update<T: Scalar>(
    g: &mut Graph<T>,
    loss: Var,
    bound: &BoundLM,
    model: &mut TransformerLM<T>,
    mode: Trainable,
    opt: &mut Adam<T>,
    lr: f64,
    clip: f64,
) -> Result<()> {
    g.backward(loss)?;
    let mut grads: Vec<Tensor<T>> = bound
        .trainable
        .iter()
        .map(|(_, v)| g.grad(*v).expect("trainable leaf has a gradient"))
        .collect();
    clip_global_norm(&mut grads, clip);
    let params = model.trainable_mut(mode);
    debug_assert!(params.iter().zip(&bound.trainable).all(|(a, b)| a.0 == b.0));
    opt.step(params, &grads, lr)
}

/// Mean next-token NLL over the response tokens of `batch`; prompt positions are masked.
pub fn sft_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &TransformerLM<T>,
    bound: &BoundLM,
    batch: &[&SftExample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("sft batch"));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for ex in batch {
        let mut input = ex.prompt.clone();
        input.extend_from_slice(&ex.response[..ex.response.len().saturating_sub(1)]);
        crate::lm::check_response(&ex.prompt, &ex.response)?;
        let logits = model.logits(g, bound, &input)?;
        let lps = pick_response(g, logits, ex.prompt.len(), &ex.response)?;
        let s = g.sum(lps);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
        count += ex.response.len();
    }
    Ok(g.scale(total.expect("nonempty"), T::from_f64(-1.0 / count as f64)))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Trained<T, R> {
    pub model: TransformerLM<T>,
    pub optimizer: Adam<T>,
    pub log: Vec<R>,
    /// Files written, in order.
    pub outputs: Vec<PathBuf>,
}

/// Trains a freshly initialized model on `data`; with `out`, writes the checkpoint there
/// and the log next to it.
pub fn sft_train<T: Scalar>(
    data: &[SftExample],
    vocab_size: usize,
    cfg: &SftConfig,
    out: Option<&Path>,
) -> Result<Trained<T, SftLogRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("sft corpus"));
    }
    let mcfg = cfg.model_config(vocab_size);
    mcfg.validate()?;
    for ex in data {
        let len = ex.prompt.len() + ex.response.len() - 1;
        if len > mcfg.max_seq_len {
            return Err(Error::SequenceTooLong { len, max: mcfg.max_seq_len });
        }
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TransformerLM::<T>::new(mcfg, &mut init_rng)?;
    let mut opt = Adam::new();
    let total = cfg.total_steps(data.len());
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let lr = cosine_warmup_lr(step, cfg.lr, total, cfg.warmup_frac)?;
        let idx = batch_indices(data.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<&SftExample> = idx.iter().map(|&i| &data[i]).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::BaseWeights, false)?;
        let loss = sft_loss(&mut g, &model, &bound, &batch).map_err(|e| nan_at(e, step))?;
        let lv = g.value(loss).item().as_f64();
        if !lv.is_finite() {
            return Err(Error::NanLoss { step });
        }
        log.push(SftLogRow { step, loss: lv, lr });
        apply_update(&mut g, loss, &bound, &mut model, Trainable::BaseWeights, &mut opt, lr, cfg.clip_norm)?;
        log::debug!("sft step {step}: loss {lv:.5} lr {lr:.3e}");
    }
    let mut outputs = Vec::new();
    if let Some(path) = out {
        let mut meta = ModelMeta::new(&model, "sft", total, cfg.seed);
        meta.extra = json!({ "sft": cfg });
        model_checkpoint(&model, &meta)?.save(path)?;
        outputs.push(path.to_path_buf());
        let log_path = sft_log_path(path);
        write_log(&log, &log_path)?;
        outputs.push(log_path);
    }
    Ok(Trained {
        model,
        optimizer: opt,
        log,
        outputs,
    })
}

/// `<dir>/<stem>_log.csv` for an SFT checkpoint at `<dir>/<stem>.rpck`.
pub fn sft_log_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("sft");
    ckpt.with_file_name(format!("{stem}_log.csv"))
}

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.rpck")
}

/// Preference optimization starting from `sft`.
///
/// With `out`, writes `ckpt_000000.rpck`, cadence checkpoints, `final.rpck`,
/// `adapter.rpck` (adapter methods) and `train_log.csv` into that directory.
pub fn align_train<T: Scalar>(
    sft: &TransformerLM<T>,
    data: &[PreferencePair],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Trained<T, AlignLogRow>> {
    cfg.validate()?;
    let mut model = sft.clone();
    model.detach_adapters();
    if let Some(method) = cfg.adapter_method() {
        let points = cfg
            .attach_points
            .clone()
            .unwrap_or_else(|| model.config().attach_points.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        model.attach_adapters(method, &points, &mut rng)?;
    }
    run_align(model, sft, data, cfg, Adam::new(), 0, out)
}

/// Continues a run from one of its checkpoints; `sft` is the original starting model.
pub fn align_resume<T: Scalar>(
    ckpt: &Checkpoint,
    sft: &TransformerLM<T>,
    data: &[PreferencePair],
    out: Option<&Path>,
) -> Result<Trained<T, AlignLogRow>> {
    let (model, meta) = model_from_checkpoint::<T>(ckpt)?;
    let cfg: TrainConfig = serde_json::from_value(meta.extra["train"].clone())
        .map_err(|e| Error::Format(format!("checkpoint lacks a training config: {e}")))?;
    let t = meta.extra["adam_t"]
        .as_u64()
        .ok_or_else(|| Error::Format("checkpoint lacks the optimizer step".into()))?;
    let opt = Adam::from_checkpoint(ckpt, t)?;
    run_align(model, sft, data, &cfg, opt, meta.step, out)
}

fn run_align<T: Scalar>(
    mut model: TransformerLM<T>,
    sft: &TransformerLM<T>,
    data: &[PreferencePair],
    cfg: &TrainConfig,
    mut opt: Adam<T>,
    start: usize,
    out: Option<&Path>,
) -> Result<Trained<T, AlignLogRow>> {
    if data.is_empty() {
        return Err(Error::Empty("preference training set"));
    }
    for p in data {
        p.validate(model.config().max_seq_len)?;
    }
    let mode = cfg.trainable();
    let reference = match cfg.method {
        MethodKind::Dpo => Reference::Frozen(Box::new(sft.clone())),
        _ => Reference::Bypass,
    };
    let refs: Vec<PairLogprobs> = reference_logprobs(&model, &reference, data)?;
    let total = cfg.total_steps(data.len());
    if start > total {
        return Err(Error::Config(format!("resume step {start} beyond {total} total steps")));
    }
    let peak = cfg.peak_lr();
    let label = cfg.method_label();
    let mut outputs = Vec::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let save = |model: &TransformerLM<T>, opt: &Adam<T>, step: usize, name: &str, outputs: &mut Vec<PathBuf>| -> Result<()> {
        let Some(dir) = out else { return Ok(()) };
        let mut meta = ModelMeta::new(model, &label, step, cfg.seed);
        meta.extra = json!({ "train": cfg, "adam_t": opt.t, "total_steps": total });
        let mut c = model_checkpoint(model, &meta)?;
        opt.write_to(&mut c);
        let path = dir.join(name);
        c.save(&path)?;
        outputs.push(path);
        Ok(())
    };
    if start == 0 && total > 0 {
        save(&model, &opt, 0, &checkpoint_name(0), &mut outputs)?;
    }
    let mut log = Vec::with_capacity(total - start);
    for step in start..total {
        let lr = cosine_warmup_lr(step, peak, total, cfg.warmup_frac)?;
        let idx = batch_indices(data.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<PreferencePair> = idx.iter().map(|&i| data[i].clone()).collect();
        let brefs: Vec<PairLogprobs> = idx.iter().map(|&i| refs[i]).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, mode, false)?;
        let (loss, stats) = dpo_loss(&mut g, &model, &bound, &batch, &brefs, cfg.beta).map_err(|e| nan_at(e, step))?;
        if !stats.loss.is_finite() {
            return Err(Error::NanLoss { step });
        }
        log.push(AlignLogRow::new(step, stats, lr));
        apply_update(&mut g, loss, &bound, &mut model, mode, &mut opt, lr, cfg.clip_norm)?;
        log::debug!(
            "{label} step {step}: loss {:.6} margin {:.4} acc {:.3} lr {lr:.3e}",
            stats.loss,
            stats.margin_mean,
            stats.margin_acc
        );
        warn_nonpositive_magnitudes(&mut model, step + 1);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
            save(&model, &opt, done, &checkpoint_name(done), &mut outputs)?;
        }
    }
    save(&model, &opt, total, FINAL_CKPT, &mut outputs)?;
    if let Some(dir) = out {
        if model.adapters().is_some() {
            let mut meta = ModelMeta::new(&model, &label, total, cfg.seed);
            meta.extra = json!({ "train": cfg });
            let path = dir.join(ADAPTER_FILE);
            adapter_checkpoint(&model, &meta)?.save(&path)?;
            outputs.push(path);
        }
        let path = dir.join(TRAIN_LOG);
        write_log(&log, &path)?;
        outputs.push(path);
    }
    Ok(Trained {
        model,
        optimizer: opt,
        log,
        outputs,
    })
}

fn warn_nonpositive_magnitudes<T: Scalar>(model: &mut TransformerLM<T>, step: usize) {
    for (name, t) in model.trainable_mut(Trainable::Adapters) {
        if name.ends_with(".m") && t.data().iter().any(|v| v.as_f64() <= 0.0) {
            log::warn!("step {step}: magnitude vector '{name}' has a non-positive entry");
        }
    }
}

/// Training configuration and optimizer step stored in a checkpoint's metadata.
pub fn checkpoint_train_config(c: &Checkpoint) -> Result<Option<TrainConfig>> {
    let meta = ModelMeta::from_checkpoint(c)?;
    match meta.extra.get("train") {
        None | Some(Value::Null) => Ok(None),
        Some(v) => Ok(Some(
            serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("training config: {e}")))?,
        )),
    }
}

#[cfg(test)]
mod tests;
