//! Per-step curves of intermediate clean estimates, the step-skip probe, and
//! set-level evaluation of a sampler configuration.

use serde::{Deserialize, Serialize};

use super::metrics::{fidelity_score_raw, frechet_from_features, low_band_divergence, motion_score_raw, Frechet};
use super::stats::{iqr, median, spearman};
use crate::flowmatch::{initial_noise, sample_from_noise, FlowError, SamplerConfig, SampleTrajectory, VelocityField};
use crate::seeds::{self, Purpose};
use crate::synthgen::{gen_clean, Condition, SEQ_LEN};

/// Mean scores of the clean estimates at one executed step. `step` counts
/// executed steps from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub t: f64,
    pub motion_mean: f64,
    pub fidelity_mean: f64,
    pub n: usize,
}

/// Noise seed for trajectory `(cond_index, seed)`.
pub fn noise_seed(seed: u64, cond_index: usize) -> u64 {
    seeds::derive(seed, Purpose::EvalNoise, cond_index as u64)
}

/// One trajectory per `(condition, seed)`, conditions varying fastest.
fn grid_trajectories<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[Condition],
    seeds_: &[u64],
    config: &SamplerConfig,
) -> Result<Vec<SampleTrajectory>, FlowError> {
    let mut all_conds = Vec::with_capacity(conds.len() * seeds_.len());
    let mut noises = Vec::with_capacity(conds.len() * seeds_.len());
    for &s in seeds_ {
        for (i, c) in conds.iter().enumerate() {
            all_conds.push(*c);
            noises.push(initial_noise(noise_seed(s, i)));
        }
    }
    sample_from_noise(field, &all_conds, &noises, config)
}

/// Mean motion and fidelity scores of `ẑ_1` at every executed step, over all
/// `(condition, seed)` trajectories.
pub fn timestep_analysis<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[Condition],
    seeds_: &[u64],
    config: &SamplerConfig,
) -> Result<Vec<CurveRow>, FlowError> {
    let trajs = grid_trajectories(field, conds, seeds_, config)?;
    Ok(curves_from(&trajs))
}

pub fn curves_from(trajs: &[SampleTrajectory]) -> Vec<CurveRow> {
    let Some(first) = trajs.first() else {
        return Vec::new();
    };
    let n = trajs.len();
    (0..first.clean_estimates.len())
        .map(|k| {
            let (mut m, mut f) = (0.0, 0.0);
            for tr in trajs {
                m += motion_score_raw(&tr.clean_estimates[k]);
                f += fidelity_score_raw(&tr.clean_estimates[k]);
            }
            CurveRow {
                step: k + 1,
                t: first.eval_times[k],
                motion_mean: m / n as f64,
                fidelity_mean: f / n as f64,
                n,
            }
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("step,t,motion_mean,fidelity_mean,n\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.t, r.motion_mean, r.fidelity_mean, r.n
        ));
    }
    s
}

/// First step from which the motion curve stays at or above `frac` of its
/// final value.
pub fn motion_reach_step(rows: &[CurveRow], frac: f64) -> Option<usize> {
    let last = rows.last()?.motion_mean;
    let mut step = None;
    for r in rows.iter().rev() {
        if r.motion_mean >= frac * last {
            step = Some(r.step);
        } else {
            break;
        }
    }
    step
}

/// First step from which the motion curve stays within `tol·|final|` of its
/// final value.
pub fn motion_band_step(rows: &[CurveRow], tol: f64) -> Option<usize> {
    let last = rows.last()?.motion_mean;
    let mut step = None;
    for r in rows.iter().rev() {
        if (r.motion_mean - last).abs() <= tol * last.abs() {
            step = Some(r.step);
        } else {
            break;
        }
    }
    step
}

/// Spearman correlation between step index and mean fidelity score.
pub fn fidelity_trend(rows: &[CurveRow]) -> f64 {
    let steps: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let fid: Vec<f64> = rows.iter().map(|r| r.fidelity_mean).collect();
    spearman(&steps, &fid)
}

/// Full and skipped runs from the same noise, per `(condition, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipPair {
    pub cond_index: usize,
    pub seed: u64,
    pub fidelity_full: f64,
    pub fidelity_skip: f64,
    pub motion_full: f64,
    pub motion_skip: f64,
    /// Low-band distance between the skipped and the full final samples.
    pub low_band_divergence: f64,
    /// Low-band distance between the full run and a full run from slightly
    /// perturbed noise.
    pub resample_divergence: f64,
}

impl SkipPair {
    pub fn fidelity_delta(&self) -> f64 {
        (self.fidelity_skip - self.fidelity_full).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skip_k: usize,
    pub n_steps: usize,
    pub pairs: Vec<SkipPair>,
    pub median_fidelity_full: f64,
    pub median_fidelity_skip: f64,
    pub fidelity_iqr_full: f64,
    pub median_fidelity_delta: f64,
    pub median_low_band_divergence: f64,
    pub median_resample_divergence: f64,
}

/// Weight of the fresh draw in the perturbed noise `√(1−ε²)·z_0 + ε·ξ`.
pub const RESAMPLE_EPS: f64 = 0.1;

fn perturbed(noise: &[f64], seed: u64) -> Vec<f64> {
    let fresh = initial_noise(seed);
    let keep = (1.0 - RESAMPLE_EPS * RESAMPLE_EPS).sqrt();
    noise.iter().zip(&fresh).map(|(a, b)| keep * a + RESAMPLE_EPS * b).collect()
}

/// Samples every `(condition, seed)` with `skip_k = round(skip_fraction·n)`
/// and without skipping, from identical noise, plus a full run from perturbed
/// noise as the divergence floor.
pub fn skip_experiment<F: VelocityField + ?Sized>(
    field: &F,
    skip_fraction: f64,
    conds: &[Condition],
    seeds_: &[u64],
    config: &SamplerConfig,
) -> Result<SkipReport, FlowError> {
    if !(skip_fraction > 0.0 && skip_fraction < 1.0) {
        return Err(FlowError::SamplerConfig(format!(
            "skip fraction {skip_fraction} must lie in (0, 1)"
        )));
    }
    let skip_k = (skip_fraction * config.n_steps as f64).round() as usize;
    let full_cfg = SamplerConfig { skip_k: 0, ..*config };
    let skip_cfg = SamplerConfig { skip_k, ..*config };

    let mut all_conds = Vec::new();
    let mut noises = Vec::new();
    let mut alt = Vec::new();
    let mut index = Vec::new();
    for &s in seeds_ {
        for (i, c) in conds.iter().enumerate() {
            let z0 = initial_noise(noise_seed(s, i));
            alt.push(perturbed(&z0, seeds::derive(s, Purpose::Analysis, i as u64)));
            noises.push(z0);
            all_conds.push(*c);
            index.push((i, s));
        }
    }
    let full = sample_from_noise(field, &all_conds, &noises, &full_cfg)?;
    let skipped = sample_from_noise(field, &all_conds, &noises, &skip_cfg)?;
    let resampled = sample_from_noise(field, &all_conds, &alt, &full_cfg)?;

    let pairs: Vec<SkipPair> = index
        .iter()
        .enumerate()
        .map(|(j, &(cond_index, seed))| {
            let (a, b, r) = (full[j].final_sample(), skipped[j].final_sample(), resampled[j].final_sample());
            SkipPair {
                cond_index,
                seed,
                fidelity_full: fidelity_score_raw(a),
                fidelity_skip: fidelity_score_raw(b),
                motion_full: motion_score_raw(a),
                motion_skip: motion_score_raw(b),
                low_band_divergence: low_band_divergence(a, b),
                resample_divergence: low_band_divergence(a, r),
            }
        })
        .collect();
    let col = |f: fn(&SkipPair) -> f64| pairs.iter().map(f).collect::<Vec<f64>>();
    let fid_full = col(|p| p.fidelity_full);
    Ok(SkipReport {
        skip_k,
        n_steps: config.n_steps,
        median_fidelity_full: median(&fid_full),
        median_fidelity_skip: median(&col(|p| p.fidelity_skip)),
        fidelity_iqr_full: iqr(&fid_full),
        median_fidelity_delta: median(&col(SkipPair::fidelity_delta)),
        median_low_band_divergence: median(&col(|p| p.low_band_divergence)),
        median_resample_divergence: median(&col(|p| p.resample_divergence)),
        pairs,
    })
}

/// Per-sample scores of one model on an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub motion: Vec<f64>,
    pub fidelity: Vec<f64>,
    pub fd: Frechet,
    pub nfe: usize,
}

impl EvalSet {
    pub fn median_motion(&self) -> f64 {
        median(&self.motion)
    }

    pub fn median_fidelity(&self) -> f64 {
        median(&self.fidelity)
    }
}

/// Samples one trajectory per condition (noise from `seed`) and scores the
/// final samples. The Fréchet distance is taken against clean data for the
/// same conditions.
pub fn evaluate<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[Condition],
    seed: u64,
    config: &SamplerConfig,
) -> Result<EvalSet, FlowError> {
    let trajs = grid_trajectories(field, conds, &[seed], config)?;
    let mut motion = Vec::with_capacity(trajs.len());
    let mut fidelity = Vec::with_capacity(trajs.len());
    for tr in &trajs {
        motion.push(motion_score_raw(tr.final_sample()));
        fidelity.push(fidelity_score_raw(tr.final_sample()));
    }
    let gen: Vec<[f64; 2]> = motion.iter().zip(&fidelity).map(|(m, f)| [*m, *f]).collect();
    let clean: Vec<[f64; 2]> = conds
        .iter()
        .map(|c| {
            let x = gen_clean(c);
            [motion_score_raw(x.as_slice()), fidelity_score_raw(x.as_slice())]
        })
        .collect();
    debug_assert!(trajs.iter().all(|t| t.final_sample().len() == SEQ_LEN));
    Ok(EvalSet {
        motion,
        fidelity,
        fd: frechet_from_features(&gen, &clean),
        nfe: trajs.first().map_or(0, |t| t.nfe),
    })
}
