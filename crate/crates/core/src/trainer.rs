//! Annealing-weighted objective, loss-weight schedules, AdamW with warmup
//! and cosine decay, and the training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::Alpha;
use crate::error::{Error, Result};
use crate::model::{Model, PreparedItem};
use crate::nn::{ParamStore, Session};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{derive_seed, derive_seed_u64, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Random,
    Step,
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Constant,
        ScheduleKind::Random,
        ScheduleKind::Step,
        ScheduleKind::Linear,
        ScheduleKind::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Random => "random",
            ScheduleKind::Step => "step",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Input(format!(
                "unknown schedule '{s}'; valid kinds: constant, random, step, linear, cosine"
            ))
        })
    }
}

/// Per-position loss weights `a_τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub a_max: f64,
    pub eps: f64,
    /// Only used by the random kind.
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(ScheduleKind::Cosine)
    }
}

impl Schedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Self {
            kind,
            a_max: 1.0,
            eps: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_max > 0.0 && self.a_max.is_finite()) || !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config("schedule needs a_max > 0 and eps >= 0"));
        }
        if self.kind == ScheduleKind::Random && self.a_max < self.eps {
            return Err(Error::config("random schedule draws from [eps, a_max]; need a_max >= eps"));
        }
        Ok(())
    }

    pub fn weight(&self, tau: usize, q_len: usize) -> Result<f64> {
        if tau >= q_len {
            return Err(Error::Index {
                what: "schedule position",
                index: tau,
                bound: q_len,
            });
        }
        let (t, q) = (tau as f64, q_len as f64);
        Ok(match self.kind {
            ScheduleKind::Constant => 1.0,
            ScheduleKind::Random => {
                let base = derive_seed(self.seed, "schedule.random");
                SplitMix64::new(derive_seed_u64(base, tau as u64)).uniform(self.eps, self.a_max)
            }
            ScheduleKind::Step => {
                if t < q / 2.0 {
                    self.a_max + self.eps
                } else {
                    self.eps
                }
            }
            ScheduleKind::Linear => (q - t) * self.a_max / q + self.eps,
            ScheduleKind::Cosine => self.a_max * (1.0 + (std::f64::consts::PI * t / q).cos()) / 2.0 + self.eps,
        })
    }

    pub fn weights(&self, q_len: usize) -> Vec<f64> {
        (0..q_len).map(|t| self.weight(t, q_len).expect("in range")).collect()
    }
}

/// `(1/(T·K)) Σ_τ Σ_k a_τ · NLL(logits_k[τ], code[τ, k])`.
pub fn training_loss(g: &mut Graph, logits: &[Var], codes: &[usize], weights: &[f64]) -> Result<Var> {
    let k = logits.len();
    let t = weights.len();
    if k == 0 || codes.len() != t * k {
        return Err(Error::Dimension {
            op: "training_loss",
            left: vec![t, k],
            right: vec![codes.len()],
        });
    }
    let mut total: Option<Var> = None;
    for (j, &l) in logits.iter().enumerate() {
        let col: Vec<usize> = codes.iter().skip(j).step_by(k).copied().collect();
        let ce = g.weighted_cross_entropy(l, &col, weights)?;
        total = Some(match total {
            None => ce,
            Some(a) => g.add(a, ce)?,
        });
    }
    Ok(g.scale(total.expect("k > 0"), 1.0 / (t * k) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables.
    pub grad_clip: f64,
    pub alpha: Alpha,
    pub schedule: Schedule,
    pub seed: u64,
    /// Checkpoint period in steps; zero keeps only the final one.
    pub checkpoint_every: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_steps: 300,
            warmup_steps: 100,
            lr_max: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            grad_clip: 1.0,
            alpha: Alpha::default(),
            schedule: Schedule::default(),
            seed: 0,
            checkpoint_every: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 || self.workers == 0 {
            return Err(Error::config("batch_size, total_steps and workers must be positive"));
        }
        if !(self.lr_max > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("need lr_max > 0 and betas in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::config("weight_decay and grad_clip must be non-negative"));
        }
        self.schedule.validate()
    }

    /// Learning rate for the 1-based update `step`: linear warmup to
    /// `lr_max`, then cosine decay to zero at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return self.lr_max * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            ..Self::default()
        }
    }

    /// Applies update number `step` (1-based) to every trainable parameter
    /// that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, step: usize, lr: f64) -> Result<()> {
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if !p.trainable {
                return Err(Error::contract(format!("gradient for frozen parameter {name}")));
            }
            let n = grad.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Loss and parameter gradients of one item.
pub fn item_gradients(
    model: &Model,
    store: &ParamStore,
    item: &PreparedItem,
    alpha: Alpha,
    schedule: &Schedule,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, store);
    let out = model.forward(&mut s, item, alpha)?;
    let weights = schedule.weights(item.t_q());
    let loss = training_loss(s.g, &out.logits, &item.tokens.codes, &weights)?;
    let value = s.g.scalar(loss);
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    s.g.backward(loss)?;
    Ok((value, s.grads()))
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 0-based; the loss is measured before the update.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "step,loss,lr,schedule,alpha,seed";

impl StepRecord {
    pub fn csv_row(&self, cfg: &TrainConfig) -> String {
        format!(
            "{},{:.17e},{:.17e},{},{},{}",
            self.step, self.loss, self.lr, cfg.schedule.kind, cfg.alpha, cfg.seed
        )
    }
}

fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    items: &[&PreparedItem],
    cfg: &TrainConfig,
) -> Result<Vec<(f64, BTreeMap<String, Tensor>)>> {
    let run = |item: &PreparedItem| item_gradients(model, store, item, cfg.alpha, &cfg.schedule);
    if cfg.workers <= 1 || items.len() <= 1 {
        return items.iter().map(|i| run(i)).collect();
    }
    let chunk = items.len().div_ceil(cfg.workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|i| run(i)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::contract("training worker panicked"))??);
        }
        Ok(out)
    })
}

/// Runs `cfg.total_steps` updates of the trainable parameters in `store`.
///
/// `on_step` sees every record together with the parameters after that
/// update. Batch items are drawn with replacement from a stream derived from
/// `cfg.seed`; gradients are reduced in item order, so results do not depend
/// on the worker count.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    items: &[PreparedItem],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord, &ParamStore) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, "train.batch"));
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(items.len())).collect();
        let batch: Vec<&PreparedItem> = picks.iter().map(|&i| &items[i]).collect();
        let results = batch_gradients(model, store, &batch, cfg)?;
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (pick, (l, gmap)) in picks.iter().zip(results) {
            if !l.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {l} at step {step} on item {pick}; trainable fingerprint {:016x}",
                    store.fingerprint(true)
                )));
            }
            loss += l * inv;
            for (name, g) in gmap {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * inv),
                    None => {
                        let mut g = g;
                        g.data_mut().iter_mut().for_each(|v| *v *= inv);
                        grads.insert(name, g);
                    }
                }
            }
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {grad_norm} at step {step}")));
        }
        let lr = cfg.lr_at(step + 1);
        opt.step(store, &grads, step + 1, lr)?;
        let rec = StepRecord {
            step,
            loss,
            lr,
            grad_norm,
        };
        on_step(&rec, store)?;
        log.push(rec);
    }
    Ok(log)
}

/// Mean held-out negative log-likelihood per token and head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    /// Unweighted, all positions.
    pub overall: f64,
    /// Weighted by the schedule, normalised by `T·K` like the training loss.
    pub weighted: f64,
    /// Unweighted, positions in the first quarter of the sequence.
    pub first_quartile: f64,
}

/// Number of positions counted as the first quartile of `t`.
pub fn first_quartile_len(t: usize) -> usize {
    (t / 4).max(1)
}

pub fn evaluate_nll(
    model: &Model,
    store: &ParamStore,
    items: &[PreparedItem],
    alpha: Alpha,
    schedule: &Schedule,
) -> Result<NllReport> {
    if items.is_empty() {
        return Err(Error::input("empty evaluation set"));
    }
    let mut acc = [0.0; 3];
    for item in items {
        let t = item.t_q();
        let mut g = Graph::new();
        let mut s = Session::inference(&mut g, store);
        let out = model.forward(&mut s, item, alpha)?;
        let q = first_quartile_len(t);
        let early: Vec<f64> = (0..t).map(|i| if i < q { 1.0 } else { 0.0 }).collect();
        let overall = training_loss(s.g, &out.logits, &item.tokens.codes, &vec![1.0; t])?;
        let weighted = training_loss(s.g, &out.logits, &item.tokens.codes, &schedule.weights(t))?;
        let first = training_loss(s.g, &out.logits, &item.tokens.codes, &early)?;
        acc[0] += s.g.scalar(overall);
        acc[1] += s.g.scalar(weighted);
        acc[2] += s.g.scalar(first) * t as f64 / q as f64;
    }
    let n = items.len() as f64;
    Ok(NllReport {
        overall: acc[0] / n,
        weighted: acc[1] / n,
        first_quartile: acc[2] / n,
    })
}
