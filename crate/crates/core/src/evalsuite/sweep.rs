//! Grid sweeps over the switch point, adapter rank, sampling budget and
//! training recipe. Every `(grid point, seed)` job is independent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::analysis::evaluate;
use super::stats::{mean, ranks, std_dev};
use crate::flowmatch::SamplerConfig;
use crate::par;
use crate::synthgen::{Condition, PreferencePair};
use crate::tpo::{train_tpo, LoraConfig, SegmentSchedule, TpoConfig, TpoVariant};
use crate::velonet::{Model, VelocityNet};

pub const SWITCH_GRID: [f64; 6] = [0.1, 0.15, 0.2, 0.25, 0.3, 0.4];
pub const RANK_GRID: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("unknown sweep kind `{0}`")]
    UnknownKind(String),
    #[error("empty grid")]
    EmptyGrid,
    #[error("bad grid value `{value}` for {kind} sweep: {reason}")]
    BadValue {
        kind: SweepKind,
        value: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepKind {
    Switch,
    Rank,
    Nfe,
    Ablation,
}

impl SweepKind {
    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::Switch => "switch",
            SweepKind::Rank => "rank",
            SweepKind::Nfe => "nfe",
            SweepKind::Ablation => "ablation",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = SweepError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [SweepKind::Switch, SweepKind::Rank, SweepKind::Nfe, SweepKind::Ablation]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SweepError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GridValue {
    Switch(f64),
    Rank(usize),
    Nfe(usize),
    Variant(TpoVariant),
}

impl fmt::Display for GridValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridValue::Switch(v) => write!(f, "{v}"),
            GridValue::Rank(r) => write!(f, "{r}"),
            GridValue::Nfe(n) => write!(f, "{n}"),
            GridValue::Variant(v) => write!(f, "{v}"),
        }
    }
}

/// The default grid for `kind`. The NFE grid runs from the full budget
/// `2·n_steps` down in steps of 10% of it.
pub fn default_grid(kind: SweepKind, n_steps: usize) -> Vec<GridValue> {
    match kind {
        SweepKind::Switch => SWITCH_GRID.iter().map(|&f| GridValue::Switch(f)).collect(),
        SweepKind::Rank => RANK_GRID.iter().map(|&r| GridValue::Rank(r)).collect(),
        SweepKind::Nfe => {
            let full = 2 * n_steps;
            (1..=10).rev().map(|i| GridValue::Nfe(full * i / 10)).collect()
        }
        SweepKind::Ablation => TpoVariant::ALL.iter().map(|&v| GridValue::Variant(v)).collect(),
    }
}

/// Parses and validates grid values. `max_rank` bounds the rank grid and
/// `n_steps` bounds the NFE grid.
pub fn parse_grid(kind: SweepKind, items: &[&str], max_rank: usize, n_steps: usize) -> Result<Vec<GridValue>, SweepError> {
    if items.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    let bad = |value: &str, reason: String| SweepError::BadValue {
        kind,
        value: value.to_string(),
        reason,
    };
    items
        .iter()
        .map(|raw| {
            let s = raw.trim();
            match kind {
                SweepKind::Switch => {
                    let f: f64 = s.parse().map_err(|_| bad(s, "not a number".into()))?;
                    if !(f > 0.0 && f < 1.0) {
                        return Err(bad(s, "must lie in (0, 1)".into()));
                    }
                    Ok(GridValue::Switch(f))
                }
                SweepKind::Rank => {
                    let r: usize = s.parse().map_err(|_| bad(s, "not an integer".into()))?;
                    if r == 0 || r > max_rank {
                        return Err(bad(s, format!("must lie in [1, {max_rank}]")));
                    }
                    Ok(GridValue::Rank(r))
                }
                SweepKind::Nfe => {
                    let n: usize = s.parse().map_err(|_| bad(s, "not an integer".into()))?;
                    if n == 0 || n > 2 * n_steps {
                        return Err(bad(s, format!("must lie in [1, {}]", 2 * n_steps)));
                    }
                    if n % 2 != 0 {
                        return Err(bad(s, "guided sampling spends two evaluations per step".into()));
                    }
                    Ok(GridValue::Nfe(n))
                }
                SweepKind::Ablation => s
                    .parse::<TpoVariant>()
                    .map(GridValue::Variant)
                    .map_err(|e| bad(s, e.to_string())),
            }
        })
        .collect()
}

/// Everything a sweep job needs besides its grid value and seed.
#[derive(Debug, Clone, Copy)]
pub struct SweepSetup<'a> {
    pub base: &'a VelocityNet,
    pub prefs: &'a [PreferencePair],
    pub eval_conds: &'a [Condition],
    pub tpo: TpoConfig,
    pub lora: LoraConfig,
    pub schedule: SegmentSchedule,
    pub sampler: SamplerConfig,
}

/// One `(grid point, seed)` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variant: String,
    pub param: String,
    pub seed: u64,
    pub motion: f64,
    pub fidelity: f64,
    pub fd: f64,
    pub nfe: usize,
    pub status: String,
}

impl MetricRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn failed(variant: String, param: String, seed: u64, reason: &str) -> Self {
        Self {
            variant,
            param,
            seed,
            motion: f64::NAN,
            fidelity: f64::NAN,
            fd: f64::NAN,
            nfe: 0,
            status: format!("failed: {}", reason.replace([',', '\n'], ";")),
        }
    }
}

fn scored(variant: String, param: String, seed: u64, model: &Model, setup: &SweepSetup, sampler: &SamplerConfig) -> MetricRecord {
    match evaluate(model, setup.eval_conds, seed, sampler) {
        Ok(e) => MetricRecord {
            variant,
            param,
            seed,
            motion: e.median_motion(),
            fidelity: e.median_fidelity(),
            fd: e.fd.value,
            nfe: e.nfe,
            status: "ok".into(),
        },
        Err(err) => MetricRecord::failed(variant, param, seed, &err.to_string()),
    }
}

fn run_job(kind: SweepKind, value: GridValue, seed: u64, setup: &SweepSetup) -> Vec<MetricRecord> {
    let param = value.to_string();
    let mut tpo = setup.tpo;
    let mut lora = setup.lora;
    let mut schedule = setup.schedule;
    let mut sampler = setup.sampler;
    match value {
        GridValue::Switch(f) => match SegmentSchedule::new(f) {
            Ok(s) => schedule = s,
            Err(e) => return vec![MetricRecord::failed(tpo.variant.to_string(), param, seed, &e.to_string())],
        },
        GridValue::Rank(r) => lora.rank = r,
        GridValue::Nfe(n) => sampler = SamplerConfig { n_steps: n / 2, skip_k: 0, ..sampler },
        GridValue::Variant(v) => tpo.variant = v,
    }
    let variant = tpo.variant.to_string();
    let mut rows = Vec::with_capacity(2);
    match train_tpo(setup.base, setup.prefs, schedule, &tpo, &lora, seed) {
        Ok(out) => rows.push(scored(variant, param.clone(), seed, &out.model, setup, &sampler)),
        Err(e) => rows.push(MetricRecord::failed(variant, param.clone(), seed, &e.to_string())),
    }
    if kind == SweepKind::Nfe {
        let base = Model::base(setup.base.clone());
        rows.push(scored("base".into(), param, seed, &base, setup, &sampler));
    }
    rows
}

/// Trains and evaluates every `(grid point, seed)`. Failures become rows with
/// a `failed` status; the sweep itself only fails on an empty grid.
pub fn run_sweep(kind: SweepKind, grid: &[GridValue], seeds: &[u64], setup: &SweepSetup) -> Result<Vec<MetricRecord>, SweepError> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    let jobs: Vec<(GridValue, u64)> = grid.iter().flat_map(|&g| seeds.iter().map(move |&s| (g, s))).collect();
    let rows = par::map_slice(&jobs, |&(g, s)| run_job(kind, g, s, setup));
    Ok(rows.into_iter().flatten().collect())
}

pub fn records_csv(rows: &[MetricRecord]) -> String {
    let mut s = String::from("variant,param,seed,motion,fidelity,fd,nfe,status\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant, r.param, r.seed, r.motion, r.fidelity, r.fd, r.nfe, r.status
        ));
    }
    s
}

/// Mean ± standard deviation over the successful seeds of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub param: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub motion_mean: f64,
    pub motion_std: f64,
    pub fidelity_mean: f64,
    pub fidelity_std: f64,
    pub fd_mean: f64,
    pub fd_std: f64,
}

/// Groups rows by `(variant, param)` in first-seen order.
pub fn summarize(rows: &[MetricRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.variant.clone(), r.param.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(variant, param)| {
            let group: Vec<&MetricRecord> = rows
                .iter()
                .filter(|r| r.variant == variant && r.param == param)
                .collect();
            let ok: Vec<&&MetricRecord> = group.iter().filter(|r| r.ok()).collect();
            let col = |f: fn(&MetricRecord) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (m, f, d) = (col(|r| r.motion), col(|r| r.fidelity), col(|r| r.fd));
            let mean_or_nan = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { mean(xs) };
            SummaryRow {
                n_ok: ok.len(),
                n_failed: group.len() - ok.len(),
                motion_mean: mean_or_nan(&m),
                motion_std: std_dev(&m),
                fidelity_mean: mean_or_nan(&f),
                fidelity_std: std_dev(&f),
                fd_mean: mean_or_nan(&d),
                fd_std: std_dev(&d),
                variant,
                param,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("variant,param,n_ok,n_failed,motion_mean,motion_std,fidelity_mean,fidelity_std,fd_mean,fd_std\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.param,
            r.n_ok,
            r.n_failed,
            r.motion_mean,
            r.motion_std,
            r.fidelity_mean,
            r.fidelity_std,
            r.fd_mean,
            r.fd_std
        ));
    }
    s
}

/// Mean of per-metric ranks (1 = best) over motion (higher is better),
/// fidelity (higher is better) and Fréchet distance (lower is better).
pub fn combined_ranks(rows: &[SummaryRow]) -> Vec<f64> {
    let neg = |f: fn(&SummaryRow) -> f64| rows.iter().map(|r| -f(r)).collect::<Vec<f64>>();
    let motion = ranks(&neg(|r| r.motion_mean));
    let fidelity = ranks(&neg(|r| r.fidelity_mean));
    let fd = ranks(&rows.iter().map(|r| r.fd_mean).collect::<Vec<f64>>());
    (0..rows.len())
        .map(|i| (motion[i] + fidelity[i] + fd[i]) / 3.0)
        .collect()
}
