//! Timestep-segment preference optimization.
//!
//! The time axis is split at `f_switch` into a motion interval `[0, f)` and a
//! fidelity interval `[f, 1)`. Each interval owns one LoRA expert, and each
//! expert only ever sees preference pairs of its own dimension at timesteps
//! inside its own interval.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::flowmatch::{add_into, per_row_loss, standard_normal};
use crate::optim::{AdamW, AdamWConfig};
use crate::par;
use crate::seeds::{self, Purpose};
use crate::synthgen::{Dimension, PreferencePair, COND_DIM, SEQ_LEN};
use crate::velonet::{
    attach_lora, Batch, Experts, LoraPair, LoraSet, Model, NetError, Trainable, VelocityNet, DEFAULT_ALPHA,
    DEFAULT_RANK,
};

pub const DEFAULT_F_SWITCH: f64 = 0.2;
pub const DEFAULT_BETA: f64 = 50.0;
pub const LOG_CLAMP: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum TpoError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("f_switch {0} must lie in (0, 1)")]
    Switch(f64),
    #[error("t = {0} outside [0, 1)")]
    TimeRange(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("variant {variant} needs {dim} preference pairs but the dataset has none")]
    MissingDimension { variant: TpoVariant, dim: &'static str },
    #[error("preference dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
}

impl From<crate::autodiff::AutodiffError> for TpoError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TpoError::Net(NetError::Tape(e))
    }
}

/// Split of normalized time into the motion and fidelity intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSchedule {
    f_switch: f64,
}

impl Default for SegmentSchedule {
    fn default() -> Self {
        Self {
            f_switch: DEFAULT_F_SWITCH,
        }
    }
}

impl SegmentSchedule {
    pub fn new(f_switch: f64) -> Result<Self, TpoError> {
        if !(f_switch > 0.0 && f_switch < 1.0) {
            return Err(TpoError::Switch(f_switch));
        }
        Ok(Self { f_switch })
    }

    pub fn f_switch(&self) -> f64 {
        self.f_switch
    }

    /// Owner of `t`; the switch point itself belongs to the fidelity interval.
    pub fn dimension_at(&self, t: f64) -> Dimension {
        if t < self.f_switch {
            Dimension::Motion
        } else {
            Dimension::Fidelity
        }
    }

    /// Checked form of [`SegmentSchedule::dimension_at`].
    pub fn active_lora(&self, t: f64) -> Result<Dimension, TpoError> {
        if !(0.0..1.0).contains(&t) {
            return Err(TpoError::TimeRange(t));
        }
        Ok(self.dimension_at(t))
    }

    /// Half-open interval `[lo, hi)` owned by `dim`.
    pub fn interval(&self, dim: Dimension) -> (f64, f64) {
        match dim {
            Dimension::Motion => (0.0, self.f_switch),
            Dimension::Fidelity => (self.f_switch, 1.0),
        }
    }

    pub fn sample_t<R: Rng>(&self, dim: Dimension, rng: &mut R) -> f64 {
        let (lo, hi) = self.interval(dim);
        rng.random_range(lo..hi)
    }
}

/// The four flow-matching losses entering the preference objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLosses {
    pub policy_win: f64,
    pub policy_lose: f64,
    pub ref_win: f64,
    pub ref_lose: f64,
}

impl PairLosses {
    pub fn new(policy_win: f64, policy_lose: f64, ref_win: f64, ref_lose: f64) -> Self {
        Self {
            policy_win,
            policy_lose,
            ref_win,
            ref_lose,
        }
    }

    /// `(Lθ_w − Lθ_l) − (Lref_w − Lref_l)`
    pub fn inner(&self) -> f64 {
        (self.policy_win - self.policy_lose) - (self.ref_win - self.ref_lose)
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.policy_lose, self.policy_win, self.ref_lose, self.ref_win)
    }
}

/// `−(β/2)·inner`, the value passed to the sigmoid.
pub fn sigmoid_argument(losses: &PairLosses, beta: f64) -> f64 {
    -(beta / 2.0) * losses.inner()
}

/// `−log σ(−(β/2)·[(Lθ_w − Lθ_l) − (Lref_w − Lref_l)])`
pub fn tpo_loss(losses: &PairLosses, beta: f64) -> f64 {
    neg_log_sigmoid_scalar(sigmoid_argument(losses, beta))
}

/// `−log σ(x)` without cancellation for large `x`, capped at `−log(1e-300)`.
fn neg_log_sigmoid_scalar(x: f64) -> f64 {
    let v = if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    };
    v.min(-LOG_CLAMP.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    Tpo,
    NaiveDpo,
    Ipo,
    SimPo,
}

/// Loss family plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub kind: LossVariant,
    pub beta: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl LossParams {
    pub fn validate(&self) -> Result<(), TpoError> {
        if !(self.beta > 0.0) {
            return Err(TpoError::Config(format!("beta {} must be > 0", self.beta)));
        }
        if self.kind == LossVariant::Ipo && !(self.tau > 0.0) {
            return Err(TpoError::Config(format!("tau {} must be > 0", self.tau)));
        }
        if self.kind == LossVariant::SimPo && !(self.gamma >= 0.0) {
            return Err(TpoError::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

pub fn variant_loss(losses: &PairLosses, params: &LossParams) -> Result<f64, TpoError> {
    params.validate()?;
    let half = params.beta / 2.0;
    Ok(match params.kind {
        LossVariant::Tpo | LossVariant::NaiveDpo => tpo_loss(losses, params.beta),
        LossVariant::Ipo => {
            let h = sigmoid_argument(losses, params.beta);
            (h - 1.0 / (2.0 * params.tau)).powi(2)
        }
        LossVariant::SimPo => {
            let arg = -half * (losses.policy_win - losses.policy_lose) - params.gamma;
            neg_log_sigmoid_scalar(arg)
        }
    })
}

/// Training recipes compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TpoVariant {
    Tpo,
    WithoutFidelityLora,
    WithoutMotionLora,
    WithoutTimestepSegment,
    SingleLora,
    ZeroLora,
    NaiveDpo,
    Ipo,
    SimPo,
}

impl TpoVariant {
    pub const ALL: [TpoVariant; 9] = [
        TpoVariant::Tpo,
        TpoVariant::WithoutFidelityLora,
        TpoVariant::WithoutMotionLora,
        TpoVariant::WithoutTimestepSegment,
        TpoVariant::SingleLora,
        TpoVariant::ZeroLora,
        TpoVariant::NaiveDpo,
        TpoVariant::Ipo,
        TpoVariant::SimPo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TpoVariant::Tpo => "tpo",
            TpoVariant::WithoutFidelityLora => "wo-fidelity-lora",
            TpoVariant::WithoutMotionLora => "wo-motion-lora",
            TpoVariant::WithoutTimestepSegment => "wo-timestep-segment",
            TpoVariant::SingleLora => "single-lora",
            TpoVariant::ZeroLora => "zero-lora",
            TpoVariant::NaiveDpo => "naive-dpo",
            TpoVariant::Ipo => "ipo",
            TpoVariant::SimPo => "simpo",
        }
    }

    pub fn loss_variant(&self) -> LossVariant {
        match self {
            TpoVariant::NaiveDpo => LossVariant::NaiveDpo,
            TpoVariant::Ipo => LossVariant::Ipo,
            TpoVariant::SimPo => LossVariant::SimPo,
            _ => LossVariant::Tpo,
        }
    }

    /// Variants that update every base parameter instead of adapters.
    pub fn full_finetune(&self) -> bool {
        matches!(
            self,
            TpoVariant::ZeroLora | TpoVariant::NaiveDpo | TpoVariant::Ipo | TpoVariant::SimPo
        )
    }

    /// Variants that mix both dimensions in one batch with `t ~ U[0, 1)`.
    fn mixed_pairs(&self) -> bool {
        matches!(self, TpoVariant::NaiveDpo | TpoVariant::Ipo | TpoVariant::SimPo)
    }

    fn required_dimensions(&self) -> &'static [Dimension] {
        match self {
            TpoVariant::WithoutFidelityLora => &[Dimension::Motion],
            TpoVariant::WithoutMotionLora => &[Dimension::Fidelity],
            _ => &[Dimension::Motion, Dimension::Fidelity],
        }
    }
}

impl fmt::Display for TpoVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TpoVariant {
    type Err = TpoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TpoVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| TpoError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpoConfig {
    pub beta: f64,
    pub dim_prob: f64,
    pub lr: f64,
    /// Learning rate for the full fine-tuning variants.
    pub full_lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub tau: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub variant: TpoVariant,
}

impl Default for TpoConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            dim_prob: 0.5,
            lr: 1e-3,
            full_lr: 1e-4,
            epochs: 2,
            batch: 8,
            tau: 0.1,
            gamma: 1.0,
            weight_decay: 0.01,
            variant: TpoVariant::Tpo,
        }
    }
}

impl TpoConfig {
    pub fn loss_params(&self) -> LossParams {
        LossParams {
            kind: self.variant.loss_variant(),
            beta: self.beta,
            tau: self.tau,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<(), TpoError> {
        self.loss_params().validate()?;
        if !(0.0..=1.0).contains(&self.dim_prob) {
            return Err(TpoError::Config(format!("dim_prob {} must be in [0, 1]", self.dim_prob)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(TpoError::Config("batch and epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.full_lr >= 0.0) {
            return Err(TpoError::Config("learning rates must be >= 0".into()));
        }
        Ok(())
    }

    /// Optimizer steps for a dataset of `n` pairs.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Two-row network input for a pair: win and lose noised with the same
/// `(t, z0)`, and their velocity targets.
pub fn pair_inputs(pair: &PreferencePair, t: f64, z0: &[f64]) -> (Batch, Vec<f64>) {
    let mut z = Vec::with_capacity(2 * SEQ_LEN);
    let mut target = Vec::with_capacity(2 * SEQ_LEN);
    for x in [pair.win.as_slice(), pair.lose.as_slice()] {
        z.extend(z0.iter().zip(x).map(|(a, b)| (1.0 - t) * a + t * b));
        target.extend(z0.iter().zip(x).map(|(a, b)| b - a));
    }
    let mut cond = Vec::with_capacity(2 * COND_DIM);
    cond.extend_from_slice(pair.cond.values());
    cond.extend_from_slice(pair.cond.values());
    (Batch { z, t: vec![t, t], cond }, target)
}

/// Per-row flow-matching losses `(win, lose)` without gradients.
pub fn win_lose_losses(
    net: &VelocityNet,
    lora: Option<&LoraSet>,
    pair: &PreferencePair,
    t: f64,
    z0: &[f64],
) -> Result<(f64, f64), TpoError> {
    let (batch, target) = pair_inputs(pair, t, z0);
    let v = net.forward(lora, &batch)?;
    let l = per_row_loss(&v, &target);
    Ok((l[0], l[1]))
}

/// All four losses at one shared `(t, z0)`; the reference is `reference` with
/// no adapter.
pub fn pair_losses(
    policy: &VelocityNet,
    lora: Option<&LoraSet>,
    reference: &VelocityNet,
    pair: &PreferencePair,
    t: f64,
    z0: &[f64],
) -> Result<PairLosses, TpoError> {
    let (pw, pl) = win_lose_losses(policy, lora, pair, t, z0)?;
    let (rw, rl) = win_lose_losses(reference, None, pair, t, z0)?;
    Ok(PairLosses::new(pw, pl, rw, rl))
}

/// Preference loss for one pair recorded on `tape`. `reference` holds the
/// precomputed `(Lref_w, Lref_l)`.
pub fn pair_objective<'a>(
    tape: &mut Tape<'a>,
    net: &'a VelocityNet,
    lora: Option<&'a LoraSet>,
    train: Trainable,
    pair: &PreferencePair,
    t: f64,
    z0: &[f64],
    reference: (f64, f64),
    params: &LossParams,
) -> Result<(crate::autodiff::Var, crate::velonet::BoundParams), TpoError> {
    let (batch, target) = pair_inputs(pair, t, z0);
    let (out, bound) = net.forward_tape(tape, lora, train, &batch)?;
    let target = tape.constant(Tensor::matrix(2, SEQ_LEN, target));
    let diff = tape.sub(out, target)?;
    let sq = tape.square(diff)?;
    let ones = tape.constant(Tensor::matrix(SEQ_LEN, 1, vec![1.0 / SEQ_LEN as f64; SEQ_LEN]));
    let rows = tape.matmul(sq, ones)?;
    let sel = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]));
    let gap = tape.matmul(sel, rows)?;
    let half = params.beta / 2.0;
    let (rw, rl) = reference;
    let loss = match params.kind {
        LossVariant::Tpo | LossVariant::NaiveDpo | LossVariant::Ipo => {
            // h = −(β/2)·gap + (β/2)·(Lref_w − Lref_l)
            let scaled = tape.scale(gap, -half)?;
            let offset = tape.constant(Tensor::matrix(1, 1, vec![half * (rw - rl)]));
            let h = tape.add(scaled, offset)?;
            if params.kind == LossVariant::Ipo {
                let target = tape.constant(Tensor::matrix(1, 1, vec![-1.0 / (2.0 * params.tau)]));
                let centered = tape.add(h, target)?;
                tape.square(centered)?
            } else {
                neg_log_sigmoid(tape, h)?
            }
        }
        LossVariant::SimPo => {
            let scaled = tape.scale(gap, -half)?;
            let margin = tape.constant(Tensor::matrix(1, 1, vec![-params.gamma]));
            let arg = tape.add(scaled, margin)?;
            neg_log_sigmoid(tape, arg)?
        }
    };
    let loss = tape.sum(loss)?;
    Ok((loss, bound))
}

fn neg_log_sigmoid(tape: &mut Tape<'_>, x: crate::autodiff::Var) -> Result<crate::autodiff::Var, TpoError> {
    let s = tape.sigmoid(x)?;
    let l = tape.log(s)?;
    Ok(tape.scale(l, -1.0)?)
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpoStepLog {
    pub step: usize,
    /// `None` when the batch mixes dimensions.
    pub dimension: Option<Dimension>,
    pub t_mean: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TpoOutcome {
    pub model: Model,
    pub log: Vec<TpoStepLog>,
}

impl TpoOutcome {
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.log[range];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64
    }
}

/// Epoch-style cursor: walks a shuffled order and reshuffles on wrap.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new<R: Rng>(items: Vec<usize>, rng: &mut R) -> Self {
        let mut c = Self { order: items, pos: 0 };
        c.order.shuffle(rng);
        c
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

enum Policy {
    /// Adapter slots with one optimizer each.
    Adapters(Vec<(LoraSet, AdamW)>),
    Full(Box<VelocityNet>, AdamW),
}

struct PairJob {
    pair: usize,
    t: f64,
    z0: Vec<f64>,
    slot: usize,
}

/// Trains the adapters (or the whole network for the full fine-tuning
/// variants) on preference pairs against the frozen `base`.
pub fn train_tpo(
    base: &VelocityNet,
    prefs: &[PreferencePair],
    schedule: SegmentSchedule,
    config: &TpoConfig,
    lora: &LoraConfig,
    seed: u64,
) -> Result<TpoOutcome, TpoError> {
    config.validate()?;
    if prefs.is_empty() {
        return Err(TpoError::EmptyDataset);
    }
    let variant = config.variant;
    let pool = |d: Dimension| -> Vec<usize> { (0..prefs.len()).filter(|&i| prefs[i].dim == d).collect() };
    let (motion_pool, fidelity_pool) = (pool(Dimension::Motion), pool(Dimension::Fidelity));
    for &d in variant.required_dimensions() {
        let empty = match d {
            Dimension::Motion => motion_pool.is_empty(),
            Dimension::Fidelity => fidelity_pool.is_empty(),
        };
        if empty {
            return Err(TpoError::MissingDimension {
                variant,
                dim: d.as_str(),
            });
        }
    }

    let params = config.loss_params();
    let adam = |lr: f64| AdamWConfig {
        lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut policy = if variant.full_finetune() {
        let net = base.clone();
        let opt = AdamW::new(adam(config.full_lr), &net);
        Policy::Full(Box::new(net), opt)
    } else {
        let slots = if variant == TpoVariant::SingleLora { 1 } else { 2 };
        let mut v = Vec::with_capacity(slots);
        for i in 0..slots {
            let set = attach_lora(base, lora.rank, lora.alpha, seeds::derive(seed, Purpose::LoraInit, i as u64))?;
            let opt = AdamW::new(adam(config.lr), &set);
            v.push((set, opt));
        }
        Policy::Adapters(v)
    };
    let slot_of = |d: Dimension| match (variant, d) {
        (TpoVariant::SingleLora, _) => 0,
        (_, Dimension::Motion) => 0,
        (_, Dimension::Fidelity) => 1,
    };

    let mut rng = seeds::rng_for(seed, Purpose::TpoTrain, 0);
    let mut cursors = [
        Cursor::new(motion_pool, &mut rng),
        Cursor::new(fidelity_pool, &mut rng),
        Cursor::new((0..prefs.len()).collect(), &mut rng),
    ];
    let steps = config.total_steps(prefs.len());
    let mut log = Vec::with_capacity(steps);

    for step in 0..steps {
        let dim = if variant.mixed_pairs() {
            None
        } else {
            Some(match variant {
                TpoVariant::WithoutFidelityLora => Dimension::Motion,
                TpoVariant::WithoutMotionLora => Dimension::Fidelity,
                _ => {
                    if rng.random::<f64>() < config.dim_prob {
                        Dimension::Motion
                    } else {
                        Dimension::Fidelity
                    }
                }
            })
        };
        let jobs: Vec<PairJob> = (0..config.batch)
            .map(|_| {
                let pair = match dim {
                    Some(Dimension::Motion) => cursors[0].next(&mut rng),
                    Some(Dimension::Fidelity) => cursors[1].next(&mut rng),
                    None => cursors[2].next(&mut rng),
                };
                let segmented = dim.is_some() && variant != TpoVariant::WithoutTimestepSegment;
                let t = match dim {
                    Some(d) if segmented => schedule.sample_t(d, &mut rng),
                    _ => rng.random_range(0.0..1.0),
                };
                let slot = match (variant, dim) {
                    (TpoVariant::WithoutTimestepSegment, _) => slot_of(schedule.dimension_at(t)),
                    (_, Some(d)) => slot_of(d),
                    (_, None) => 0,
                };
                let z0 = standard_normal(&mut rng, SEQ_LEN);
                PairJob { pair, t, z0, slot }
            })
            .collect();

        let results = par::map_slice(&jobs, |job| -> Result<(f64, Vec<Tensor>), TpoError> {
            let pair = &prefs[job.pair];
            let reference = win_lose_losses(base, None, pair, job.t, &job.z0)?;
            let (net, lora, train) = match &policy {
                Policy::Full(net, _) => (net.as_ref(), None, Trainable::Base),
                Policy::Adapters(slots) => (base, Some(&slots[job.slot].0), Trainable::Adapter),
            };
            let mut tape = Tape::new();
            let (loss, bound) = pair_objective(&mut tape, net, lora, train, pair, job.t, &job.z0, reference, &params)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            Ok((value, bound.gradients(&grads)))
        });

        let n_slots = match &policy {
            Policy::Adapters(s) => s.len(),
            Policy::Full(..) => 1,
        };
        let mut acc: Vec<Option<Vec<Tensor>>> = vec![None; n_slots];
        let mut total = 0.0;
        for (job, r) in jobs.iter().zip(results) {
            let (loss, grads) = r.map_err(|e| match e {
                TpoError::Net(NetError::Tape(crate::autodiff::AutodiffError::NonFinite { .. })) => {
                    TpoError::NonFinite { step }
                }
                other => other,
            })?;
            total += loss;
            let slot = if matches!(policy, Policy::Full(..)) { 0 } else { job.slot };
            match acc[slot].as_mut() {
                None => acc[slot] = Some(grads),
                Some(a) => add_into(a, &grads),
            }
        }
        let loss = total / jobs.len() as f64;
        if !loss.is_finite() {
            return Err(TpoError::NonFinite { step });
        }
        let inv = 1.0 / jobs.len() as f64;
        match &mut policy {
            Policy::Full(net, opt) => {
                let mut g = acc[0].take().expect("full fine-tune gradient");
                scale_all(&mut g, inv);
                opt.step(net.as_mut(), &g);
            }
            Policy::Adapters(slots) => {
                for (slot, g) in acc.into_iter().enumerate() {
                    if let Some(mut g) = g {
                        scale_all(&mut g, inv);
                        let (set, opt) = &mut slots[slot];
                        opt.step(set, &g);
                    }
                }
            }
        }
        log.push(TpoStepLog {
            step,
            dimension: dim,
            t_mean: jobs.iter().map(|j| j.t).sum::<f64>() / jobs.len() as f64,
            loss,
        });
    }

    let model = match policy {
        Policy::Full(net, _) => Model::base(*net),
        Policy::Adapters(mut slots) => {
            if variant == TpoVariant::SingleLora {
                Model {
                    net: base.clone(),
                    experts: Experts::Single(slots.remove(0).0),
                }
            } else {
                let fidelity = slots.pop().map(|s| s.0);
                let motion = slots.pop().map(|s| s.0);
                Model {
                    net: base.clone(),
                    experts: Experts::Gated(LoraPair {
                        motion,
                        fidelity,
                        schedule,
                    }),
                }
            }
        }
    };
    Ok(TpoOutcome { model, log })
}

fn scale_all(g: &mut [Tensor], s: f64) {
    for t in g {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

/// Writes the training log as `step,dimension,t,loss` CSV text.
pub fn log_csv(log: &[TpoStepLog]) -> String {
    let mut s = String::from("step,dimension,t,loss\n");
    for r in log {
        let d = r.dimension.map_or("Mixed", |d| d.as_str());
        s.push_str(&format!("{},{},{},{}\n", r.step, d, r.t_mean, r.loss));
    }
    s
}
