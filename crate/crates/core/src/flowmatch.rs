//! Flow-matching objective, base-model training, and the guided Euler sampler.
//!
//! Time runs from `t = 0` (pure noise) to `t = 1` (data):
//! `z_t = (1−t)·z_0 + t·z_1`, target velocity `z_1 − z_0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::optim::{AdamW, AdamWConfig};
use crate::par;
use crate::seeds::{self, Purpose};
use crate::synthgen::{Condition, DataRecord, Sequence, COND_DIM, SEQ_LEN};
use crate::velonet::{Batch, LoraSet, Model, NetError, Trainable, VelocityNet};

/// Rows per tape when a batch is split across workers. Gradient sums are
/// independent of the thread count.
pub const TAPE_CHUNK: usize = 8;
pub const DIVERGENCE_LOSS: f64 = 1e3;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("flow batch: {0}")]
    Batch(String),
    #[error("non-finite loss (t range {t_min:.4}..{t_max:.4}, output norm {out_norm:.4e}, target norm {target_norm:.4e})")]
    NonFiniteLoss {
        t_min: f64,
        t_max: f64,
        out_norm: f64,
        target_norm: f64,
    },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("training data is empty")]
    EmptyDataset,
    #[error("sampler: {0}")]
    SamplerConfig(String),
    #[error("sampler state became non-finite at step {step}")]
    NonFiniteState { step: usize },
}

impl From<AutodiffError> for FlowError {
    fn from(e: AutodiffError) -> Self {
        FlowError::Net(NetError::Tape(e))
    }
}

/// A batch of flow-matching examples. Rows where `cond_mask` is false see the
/// zero condition.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub z1: Vec<f64>,
    pub z0: Vec<f64>,
    pub t: Vec<f64>,
    pub cond: Vec<f64>,
    pub cond_mask: Vec<bool>,
}

impl FlowBatch {
    pub fn rows(&self) -> usize {
        self.t.len()
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let m = self.rows();
        if m == 0 {
            return Err(FlowError::Batch("empty batch".into()));
        }
        if self.z1.len() != m * SEQ_LEN
            || self.z0.len() != m * SEQ_LEN
            || self.cond.len() != m * COND_DIM
            || self.cond_mask.len() != m
        {
            return Err(FlowError::Batch(format!("inconsistent sizes for {m} rows")));
        }
        if let Some(t) = self.t.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(FlowError::Batch(format!("t = {t} outside [0, 1)")));
        }
        Ok(())
    }

    /// Network inputs and regression targets for rows `range`.
    fn slice(&self, range: std::ops::Range<usize>) -> (Batch, Vec<f64>) {
        let mut z = Vec::with_capacity(range.len() * SEQ_LEN);
        let mut target = Vec::with_capacity(range.len() * SEQ_LEN);
        let mut cond = Vec::with_capacity(range.len() * COND_DIM);
        for r in range.clone() {
            let t = self.t[r];
            let (x1, x0) = (&self.z1[r * SEQ_LEN..(r + 1) * SEQ_LEN], &self.z0[r * SEQ_LEN..(r + 1) * SEQ_LEN]);
            z.extend(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b));
            target.extend(x0.iter().zip(x1).map(|(a, b)| b - a));
            if self.cond_mask[r] {
                cond.extend_from_slice(&self.cond[r * COND_DIM..(r + 1) * COND_DIM]);
            } else {
                cond.extend([0.0; COND_DIM]);
            }
        }
        (
            Batch {
                z,
                t: self.t[range].to_vec(),
                cond,
            },
            target,
        )
    }
}

/// `‖v − (z_1 − z_0)‖²/64` per row.
pub fn per_row_loss(v: &[f64], target: &[f64]) -> Vec<f64> {
    v.chunks(SEQ_LEN)
        .zip(target.chunks(SEQ_LEN))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / SEQ_LEN as f64)
        .collect()
}

/// Batch-mean flow-matching loss without gradients.
pub fn fm_loss_value(net: &VelocityNet, lora: Option<&LoraSet>, batch: &FlowBatch) -> Result<f64, FlowError> {
    batch.validate()?;
    let chunks = par::chunk_ranges(batch.rows(), 64);
    let partial = par::map_slice(&chunks, |range| -> Result<f64, FlowError> {
        let (inputs, target) = batch.slice(range.clone());
        let v = net.forward(lora, &inputs)?;
        Ok(per_row_loss(&v, &target).iter().sum())
    });
    let mut total = 0.0;
    for p in partial {
        total += p?;
    }
    let loss = total / batch.rows() as f64;
    check_loss(loss, batch, net, lora)?;
    Ok(loss)
}

fn check_loss(loss: f64, batch: &FlowBatch, net: &VelocityNet, lora: Option<&LoraSet>) -> Result<(), FlowError> {
    if loss.is_finite() {
        return Ok(());
    }
    let (inputs, target) = batch.slice(0..batch.rows());
    let out = net.forward(lora, &inputs).unwrap_or_default();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Err(FlowError::NonFiniteLoss {
        t_min: batch.t.iter().copied().fold(f64::INFINITY, f64::min),
        t_max: batch.t.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        out_norm: norm(&out),
        target_norm: norm(&target),
    })
}

/// Batch-mean flow-matching loss and its gradient with respect to whichever
/// module `train` selects (the base network or the adapter).
pub fn fm_loss(
    net: &VelocityNet,
    lora: Option<&LoraSet>,
    train: Trainable,
    batch: &FlowBatch,
) -> Result<(f64, Vec<Tensor>), FlowError> {
    batch.validate()?;
    let total_rows = batch.rows() as f64;
    let chunks = par::chunk_ranges(batch.rows(), TAPE_CHUNK);
    let partial = par::map_slice(&chunks, |range| -> Result<(f64, Vec<Tensor>), FlowError> {
        let (inputs, target) = batch.slice(range.clone());
        let rows = range.len();
        let mut tape = Tape::new();
        let (out, bound) = net.forward_tape(&mut tape, lora, train, &inputs)?;
        let target = tape.constant(Tensor::matrix(rows, SEQ_LEN, target));
        let diff = tape.sub(out, target)?;
        let sq = tape.square(diff)?;
        let s = tape.sum(sq)?;
        let loss = tape.scale(s, 1.0 / (SEQ_LEN as f64 * total_rows))?;
        let value = tape.value(loss).item();
        if train == Trainable::Nothing {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, bound.gradients(&grads)))
    });
    let mut loss = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for p in partial {
        let (l, g) = p?;
        loss += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => add_into(a, &g),
        }
    }
    check_loss(loss, batch, net, lora)?;
    Ok((loss, acc.unwrap_or_default()))
}

pub(crate) fn add_into(acc: &mut [Tensor], g: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

pub fn standard_normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps.
    pub warmup_steps: usize,
    /// Cosine-decay the learning rate to `lr·final_lr_frac` over the run.
    pub final_lr_frac: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1.5e-2,
            cond_dropout: 0.1,
            weight_decay: 0.01,
            warmup_steps: 300,
            final_lr_frac: 0.02,
        }
    }
}

impl BaseTrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps);
        if span <= 1 {
            return self.lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (span - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub t_mean: f64,
    pub loss: f64,
}

/// Draws a training batch from `data`.
pub fn draw_batch<R: Rng>(rng: &mut R, data: &[DataRecord], rows: usize, cond_dropout: f64) -> FlowBatch {
    let mut b = FlowBatch {
        z1: Vec::with_capacity(rows * SEQ_LEN),
        z0: Vec::with_capacity(rows * SEQ_LEN),
        t: Vec::with_capacity(rows),
        cond: Vec::with_capacity(rows * COND_DIM),
        cond_mask: Vec::with_capacity(rows),
    };
    for _ in 0..rows {
        let rec = &data[rng.random_range(0..data.len())];
        b.z1.extend_from_slice(rec.x.as_slice());
        b.cond.extend_from_slice(rec.cond.values());
        b.t.push(rng.random_range(0.0..1.0));
        b.z0.extend(standard_normal(rng, SEQ_LEN));
        b.cond_mask.push(rng.random::<f64>() >= cond_dropout);
    }
    b
}

/// Fixed evaluation batch: every record once, with seeded `t` and noise.
pub fn heldout_batch(data: &[DataRecord], seed: u64) -> FlowBatch {
    let mut rng = seeds::rng(seed);
    let mut b = FlowBatch {
        z1: Vec::new(),
        z0: Vec::new(),
        t: Vec::new(),
        cond: Vec::new(),
        cond_mask: Vec::new(),
    };
    for rec in data {
        b.z1.extend_from_slice(rec.x.as_slice());
        b.cond.extend_from_slice(rec.cond.values());
        b.t.push(rng.random_range(0.0..1.0));
        b.z0.extend(standard_normal(&mut rng, SEQ_LEN));
        b.cond_mask.push(true);
    }
    b
}

/// Trains `net` in place with AdamW on uniformly drawn `(record, t, z_0)`.
/// Returns the per-step loss history.
pub fn train_base(
    net: &mut VelocityNet,
    data: &[DataRecord],
    config: &BaseTrainConfig,
    seed: u64,
) -> Result<Vec<LossRow>, FlowError> {
    if data.is_empty() {
        return Err(FlowError::EmptyDataset);
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        net,
    );
    let mut rng = seeds::rng_for(seed, Purpose::BaseTrain, 0);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = draw_batch(&mut rng, data, config.batch, config.cond_dropout);
        let (loss, grads) = fm_loss(net, None, Trainable::Base, &batch)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(FlowError::Diverged { step, loss });
        }
        opt.step_with_lr(net, &grads, config.lr_at(step));
        history.push(LossRow {
            step,
            t_mean: batch.t.iter().sum::<f64>() / batch.rows() as f64,
            loss,
        });
    }
    Ok(history)
}

/// One-shot estimate of the final sample from an intermediate state:
/// `ẑ_1 = z_t + (1 − t)·v`.
pub fn predict_clean(z_t: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    z_t.iter().zip(v).map(|(z, v)| z + (1.0 - t) * v).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub cfg_w: f64,
    /// Leading Euler updates that are skipped (time advances, state does not).
    pub skip_k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            cfg_w: 2.0,
            skip_k: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.n_steps == 0 {
            return Err(FlowError::SamplerConfig("n_steps must be at least 1".into()));
        }
        if self.skip_k >= self.n_steps {
            return Err(FlowError::SamplerConfig(format!(
                "skip_k {} must be below n_steps {}",
                self.skip_k, self.n_steps
            )));
        }
        if !(self.cfg_w >= 0.0) || !self.cfg_w.is_finite() {
            return Err(FlowError::SamplerConfig(format!("cfg_w {} must be >= 0", self.cfg_w)));
        }
        Ok(())
    }

    pub fn executed_steps(&self) -> usize {
        self.n_steps - self.skip_k
    }

    /// Network evaluations per sample: two per executed step under guidance,
    /// one when `cfg_w == 1`.
    pub fn nfe(&self) -> usize {
        let per_step = if self.cfg_w == 1.0 { 1 } else { 2 };
        per_step * self.executed_steps()
    }

    /// Time of step `k`: `k / n_steps`.
    pub fn time_of(&self, k: usize) -> f64 {
        k as f64 / self.n_steps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory {
    /// `(t, z)` starting with the raw noise at `t = 0`, then the state after
    /// each executed step.
    pub states: Vec<(f64, Vec<f64>)>,
    /// `ẑ_1` computed at each executed step, before its update.
    pub clean_estimates: Vec<Vec<f64>>,
    /// Time at which each clean estimate was taken.
    pub eval_times: Vec<f64>,
    pub n_steps: usize,
    pub cfg_weight: f64,
    pub skipped_steps: usize,
    /// Counted network evaluations.
    pub nfe: usize,
}

impl SampleTrajectory {
    pub fn final_sample(&self) -> &[f64] {
        &self.states.last().expect("trajectory has a state").1
    }

    pub fn final_sequence(&self) -> Sequence {
        Sequence::new(self.final_sample().to_vec()).expect("finite trajectory")
    }
}

/// Anything that yields a velocity for a batch at a shared `t`. Implemented by
/// [`Model`]; tests use closed-form fields.
pub trait VelocityField: Sync {
    fn velocity(&self, batch: &Batch) -> Result<Vec<f64>, FlowError>;
}

impl VelocityField for Model {
    fn velocity(&self, batch: &Batch) -> Result<Vec<f64>, FlowError> {
        Ok(Model::velocity(self, batch)?)
    }
}

/// Seeded standard-normal starting noise for one trajectory.
pub fn initial_noise(seed: u64) -> Vec<f64> {
    standard_normal(&mut seeds::rng(seed), SEQ_LEN)
}

/// Integrates a group of trajectories together (one row each). Rows never
/// interact, so the grouping does not change any result.
fn integrate_group<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[Condition],
    noises: &[Vec<f64>],
    config: &SamplerConfig,
) -> Result<Vec<SampleTrajectory>, FlowError> {
    let m = conds.len();
    let dt = 1.0 / config.n_steps as f64;
    let mut z: Vec<f64> = noises.iter().flatten().copied().collect();
    let cond_flat: Vec<f64> = conds.iter().flat_map(|c| c.values().iter().copied()).collect();
    let zero_cond = vec![0.0; m * COND_DIM];

    let mut trajs: Vec<SampleTrajectory> = noises
        .iter()
        .map(|n| SampleTrajectory {
            states: vec![(0.0, n.clone())],
            clean_estimates: Vec::with_capacity(config.executed_steps()),
            eval_times: Vec::with_capacity(config.executed_steps()),
            n_steps: config.n_steps,
            cfg_weight: config.cfg_w,
            skipped_steps: config.skip_k,
            nfe: 0,
        })
        .collect();

    for k in config.skip_k..config.n_steps {
        let t = config.time_of(k);
        let tvec = vec![t; m];
        let cond_batch = Batch {
            z: z.clone(),
            t: tvec.clone(),
            cond: cond_flat.clone(),
        };
        let v_cond = field.velocity(&cond_batch)?;
        let mut evals = 1;
        let v = if config.cfg_w == 1.0 {
            v_cond
        } else {
            let uncond_batch = Batch {
                z: z.clone(),
                t: tvec,
                cond: zero_cond.clone(),
            };
            let v_uncond = field.velocity(&uncond_batch)?;
            evals += 1;
            v_uncond
                .iter()
                .zip(&v_cond)
                .map(|(u, c)| u + config.cfg_w * (c - u))
                .collect()
        };
        for (r, traj) in trajs.iter_mut().enumerate() {
            let zr = &mut z[r * SEQ_LEN..(r + 1) * SEQ_LEN];
            let vr = &v[r * SEQ_LEN..(r + 1) * SEQ_LEN];
            traj.clean_estimates.push(predict_clean(zr, t, vr));
            traj.eval_times.push(t);
            for (zi, vi) in zr.iter_mut().zip(vr) {
                *zi += dt * vi;
            }
            if zr.iter().any(|x| !x.is_finite()) {
                return Err(FlowError::NonFiniteState { step: k });
            }
            traj.states.push((config.time_of(k + 1), zr.to_vec()));
            traj.nfe += evals;
        }
    }
    Ok(trajs)
}

/// Rows per sampling group.
pub const SAMPLE_GROUP: usize = 16;

/// Samples one trajectory per `(condition, noise)`, fanning groups out over
/// the worker pool.
pub fn sample_from_noise<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[Condition],
    noises: &[Vec<f64>],
    config: &SamplerConfig,
) -> Result<Vec<SampleTrajectory>, FlowError> {
    config.validate()?;
    if conds.len() != noises.len() {
        return Err(FlowError::SamplerConfig("one noise vector per condition".into()));
    }
    if noises.iter().any(|n| n.len() != SEQ_LEN) {
        return Err(FlowError::SamplerConfig(format!("noise vectors must have {SEQ_LEN} values")));
    }
    let groups = par::chunk_ranges(conds.len(), SAMPLE_GROUP);
    let results = par::map_slice(&groups, |r| integrate_group(field, &conds[r.clone()], &noises[r.clone()], config));
    let mut out = Vec::with_capacity(conds.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Batched [`sample`]: noise for row `i` is drawn from `seeds[i]`.
pub fn sample_many<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[Condition],
    seeds: &[u64],
    config: &SamplerConfig,
) -> Result<Vec<SampleTrajectory>, FlowError> {
    let noises: Vec<Vec<f64>> = seeds.iter().map(|&s| initial_noise(s)).collect();
    sample_from_noise(field, conds, &noises, config)
}

/// Guided Euler sampling of one trajectory from seeded noise. When the model
/// carries gated experts, the adapter is chosen per step from its `t`.
pub fn sample(model: &Model, cond: &Condition, config: &SamplerConfig, seed: u64) -> Result<SampleTrajectory, FlowError> {
    Ok(sample_many(model, std::slice::from_ref(cond), &[seed], config)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use crate::synthgen::{gen_dataset, sample_condition};
    use crate::velonet::{attach_lora, Architecture, ParamStore};

    struct Constant(Vec<f64>);
    impl VelocityField for Constant {
        fn velocity(&self, batch: &Batch) -> Result<Vec<f64>, FlowError> {
            Ok(self.0.iter().copied().cycle().take(batch.z.len()).collect())
        }
    }

    /// Returns the condition's first component in every coordinate, so the
    /// guided combination is easy to predict.
    struct CondEcho;
    impl VelocityField for CondEcho {
        fn velocity(&self, batch: &Batch) -> Result<Vec<f64>, FlowError> {
            Ok(batch
                .cond
                .chunks(COND_DIM)
                .flat_map(|c| std::iter::repeat_n(c[0] + 1.0, SEQ_LEN))
                .collect())
        }
    }

    fn tiny_batch(rows: usize, seed: u64) -> FlowBatch {
        let data = gen_dataset(seed, Purpose::TrainData, rows);
        let mut rng = seeds::rng(seed + 1);
        draw_batch(&mut rng, &data, rows, 0.25)
    }

    #[test]
    fn zero_loss_when_output_is_target() {
        let v = vec![0.5; 2 * SEQ_LEN];
        assert_eq!(per_row_loss(&v, &v), vec![0.0, 0.0]);
    }

    #[test]
    fn unit_loss_for_zero_output_and_ones_target() {
        // z_0 = 0, z_1 = 1: target is all ones, zero output gives 64/64
        let target = vec![1.0; SEQ_LEN];
        let out = vec![0.0; SEQ_LEN];
        assert_eq!(per_row_loss(&out, &target), vec![1.0]);
    }

    #[test]
    fn tape_and_plain_losses_agree() {
        let net = VelocityNet::new(Architecture::default(), 2);
        let b = tiny_batch(13, 3);
        let (l, g) = fm_loss(&net, None, Trainable::Base, &b).unwrap();
        let plain = fm_loss_value(&net, None, &b).unwrap();
        assert!((l - plain).abs() < 1e-12 * plain.max(1.0));
        assert_eq!(g.len(), 8);
    }

    #[test]
    fn fm_gradient_matches_finite_differences() {
        let net = VelocityNet::new(Architecture::default(), 21);
        let b = tiny_batch(4, 8);
        let (_, grads) = fm_loss(&net, None, Trainable::Base, &b).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
        let point = net.flatten();
        let mut rng = seeds::rng(99);
        let coords: Vec<usize> = (0..100).map(|_| rng.random_range(0..point.len())).collect();
        let value = |p: &[f64]| {
            let mut probe = net.clone();
            probe.assign_flat(p);
            Ok(fm_loss_value(&probe, None, &b).unwrap())
        };
        let err = check_gradient(value, &analytic, &point, &coords, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let net = VelocityNet::new(Architecture::default(), 21);
        let mut lora = attach_lora(&net, 4, 8.0, 5).unwrap();
        let mut rng = seeds::rng(3);
        for t in lora.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        let b = tiny_batch(4, 8);
        let (_, grads) = fm_loss(&net, Some(&lora), Trainable::Adapter, &b).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
        let point = lora.flatten();
        let coords: Vec<usize> = (0..100).map(|_| rng.random_range(0..point.len())).collect();
        let value = |p: &[f64]| {
            let mut probe = lora.clone();
            probe.assign_flat(p);
            Ok(fm_loss_value(&net, Some(&probe), &b).unwrap())
        };
        let err = check_gradient(value, &analytic, &point, &coords, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn predict_clean_cases() {
        assert_eq!(predict_clean(&[1.0], 0.5, &[2.0]), vec![2.0]);
        // t = 0: z_t = z_0 and v = z_1 − z_0 recover z_1
        assert_eq!(predict_clean(&[-0.5], 0.0, &[3.0]), vec![2.5]);
        let near_one = predict_clean(&[0.7], 1.0 - 1e-12, &[5.0]);
        assert!((near_one[0] - 0.7).abs() < 1e-10);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut net = VelocityNet::new(Architecture::default(), 1);
        let err = train_base(&mut net, &[], &BaseTrainConfig::default(), 1).unwrap_err();
        assert!(matches!(err, FlowError::EmptyDataset));
    }

    #[test]
    fn zero_lr_leaves_base_unchanged() {
        let data = gen_dataset(1, Purpose::TrainData, 32);
        let mut net = VelocityNet::new(Architecture::default(), 1);
        let before = net.clone();
        let cfg = BaseTrainConfig {
            steps: 3,
            batch: 8,
            lr: 0.0,
            ..BaseTrainConfig::default()
        };
        train_base(&mut net, &data, &cfg, 1).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let u: Vec<f64> = (0..SEQ_LEN).map(|i| i as f64 * 0.25 - 3.0).collect();
        let field = Constant(u.clone());
        let c = Condition::zero();
        for n in [1, 2, 7, 50] {
            let cfg = SamplerConfig {
                n_steps: n,
                cfg_w: 2.0,
                skip_k: 0,
            };
            let tr = sample_many(&field, &[c], &[5], &cfg).unwrap().remove(0);
            let z0 = initial_noise(5);
            for i in 0..SEQ_LEN {
                assert!((tr.final_sample()[i] - (z0[i] + u[i])).abs() < 1e-12);
            }
            assert_eq!(tr.states.len(), n + 1);
            // ẑ_1 is the endpoint from every state
            for est in &tr.clean_estimates {
                for i in 0..SEQ_LEN {
                    assert!((est[i] - (z0[i] + u[i])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_guidance_uses_only_the_conditional_branch() {
        let c = Condition::new([0.5, 0.0, 0.0, 0.0]).unwrap();
        let cfg = SamplerConfig {
            n_steps: 4,
            cfg_w: 1.0,
            skip_k: 0,
        };
        let tr = sample_many(&CondEcho, &[c], &[1], &cfg).unwrap().remove(0);
        let z0 = initial_noise(1);
        assert!((tr.final_sample()[0] - (z0[0] + 1.5)).abs() < 1e-12);
        assert_eq!(tr.nfe, 4);

        // w = 3: v = 1 + 3·(1.5 − 1) = 2.5
        let cfg = SamplerConfig { cfg_w: 3.0, ..cfg };
        let tr = sample_many(&CondEcho, &[c], &[1], &cfg).unwrap().remove(0);
        assert!((tr.final_sample()[0] - (z0[0] + 2.5)).abs() < 1e-12);
        assert_eq!(tr.nfe, 8);
    }

    #[test]
    fn skip_accounting() {
        let cfg = SamplerConfig {
            n_steps: 50,
            cfg_w: 2.0,
            skip_k: 10,
        };
        assert_eq!(cfg.nfe(), 80);
        let tr = sample_many(&Constant(vec![1.0; SEQ_LEN]), &[Condition::zero()], &[3], &cfg)
            .unwrap()
            .remove(0);
        assert_eq!(tr.nfe, 80);
        assert_eq!(tr.eval_times[0], 0.2);
        assert_eq!(tr.states.len(), 50 - 10 + 1);
        assert_eq!(tr.states[0].0, 0.0);
        assert!(tr.states.windows(2).all(|w| w[0].0 < w[1].0));
        assert!((tr.eval_times.last().unwrap() - (1.0 - 1.0 / 50.0)).abs() < 1e-15);
        // skipped steps leave the noise untouched: 40 steps of 1/50 each
        let z0 = initial_noise(3);
        assert!((tr.final_sample()[0] - (z0[0] + 0.8)).abs() < 1e-12);
    }

    #[test]
    fn invalid_sampler_configs_rejected() {
        let f = Constant(vec![0.0; SEQ_LEN]);
        for cfg in [
            SamplerConfig { n_steps: 0, cfg_w: 1.0, skip_k: 0 },
            SamplerConfig { n_steps: 5, cfg_w: 1.0, skip_k: 5 },
            SamplerConfig { n_steps: 5, cfg_w: -1.0, skip_k: 0 },
        ] {
            assert!(sample_many(&f, &[Condition::zero()], &[1], &cfg).is_err());
        }
    }

    #[test]
    fn batched_sampling_matches_single_and_is_deterministic() {
        let net = VelocityNet::new(Architecture::default(), 5);
        let model = Model::base(net);
        let mut rng = seeds::rng(4);
        let conds: Vec<Condition> = (0..20).map(|_| sample_condition(&mut rng)).collect();
        let seeds: Vec<u64> = (0..20).collect();
        let cfg = SamplerConfig {
            n_steps: 6,
            cfg_w: 2.0,
            skip_k: 1,
        };
        let batched = sample_many(&model, &conds, &seeds, &cfg).unwrap();
        assert_eq!(batched, sample_many(&model, &conds, &seeds, &cfg).unwrap());
        for i in [0, 7, 19] {
            let single = sample(&model, &conds[i], &cfg, seeds[i]).unwrap();
            assert_eq!(single, batched[i]);
        }
    }
}
