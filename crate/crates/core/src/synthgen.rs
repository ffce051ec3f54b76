//! Synthetic conditional signals with separable motion and fidelity attributes,
//! preference pairs built by degrading exactly one attribute, and JSON-Lines
//! persistence.
//!
//! A clean sample for condition `c` is
//!
//! ```text
//! x[i] = A·sin(2π·f·i/64 + φ) + 0.15·sin(2π·16·i/64 + ψ)
//! A = 1 + 0.5·c[0],  f = 2 + round(c[1] + 1),  φ = π·c[2],  ψ = π·c[3]
//! ```
//!
//! The first term is the motion carrier (DFT bins 2–4), the second is a fixed
//! texture tone in bin 16. Fidelity damage lives in bins 5–15 only, so the two
//! scores in [`crate::evalsuite::metrics`] never see each other's edits.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::{self, Purpose};

pub const SEQ_LEN: usize = 64;
pub const COND_DIM: usize = 4;
pub const TEXTURE_AMPLITUDE: f64 = 0.15;
pub const TEXTURE_BIN: f64 = 16.0;
/// Bins that receive fidelity damage.
pub const DAMAGE_BINS: std::ops::RangeInclusive<usize> = 5..=15;
pub const DEFAULT_MOTION_DAMPING: f64 = 0.3;
pub const DEFAULT_NOISE_LEVEL: f64 = 0.2;
/// Range of `c[0]` used by [`sample_condition`]; keeps the weakest carrier
/// strong enough that damped pairs stay separated by more than 0.05.
pub const AMPLITUDE_COND_RANGE: f64 = 0.9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("condition component {index} = {value} outside [-1, 1]")]
    ConditionRange { index: usize, value: f64 },
    #[error("sequence must have {SEQ_LEN} finite values, got {len} (first bad index {bad:?})")]
    BadSequence { len: usize, bad: Option<usize> },
    #[error("motion damping {0} outside [0, 1)")]
    Damping(f64),
    #[error("noise level {0} must be finite and non-negative")]
    NoiseLevel(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Conditioning vector with every component in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; COND_DIM]", into = "[f64; COND_DIM]")]
pub struct Condition([f64; COND_DIM]);

impl Condition {
    pub fn new(c: [f64; COND_DIM]) -> Result<Self, DataError> {
        for (index, &value) in c.iter().enumerate() {
            if !(-1.0..=1.0).contains(&value) {
                return Err(DataError::ConditionRange { index, value });
            }
        }
        Ok(Self(c))
    }

    /// The all-zero vector; also what the network sees when the condition is
    /// dropped.
    pub fn zero() -> Self {
        Self([0.0; COND_DIM])
    }

    pub fn values(&self) -> &[f64; COND_DIM] {
        &self.0
    }

    pub fn amplitude(&self) -> f64 {
        1.0 + 0.5 * self.0[0]
    }

    /// Carrier frequency in DFT bins, one of 2, 3 or 4.
    pub fn frequency(&self) -> f64 {
        2.0 + (self.0[1] + 1.0).round()
    }

    pub fn carrier_phase(&self) -> f64 {
        PI * self.0[2]
    }

    pub fn texture_phase(&self) -> f64 {
        PI * self.0[3]
    }
}

impl TryFrom<[f64; COND_DIM]> for Condition {
    type Error = DataError;
    fn try_from(c: [f64; COND_DIM]) -> Result<Self, DataError> {
        Self::new(c)
    }
}

impl From<Condition> for [f64; COND_DIM] {
    fn from(c: Condition) -> Self {
        c.0
    }
}

/// A length-64 signal with finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Sequence(Vec<f64>);

impl Sequence {
    pub fn new(x: Vec<f64>) -> Result<Self, DataError> {
        let bad = x.iter().position(|v| !v.is_finite());
        if x.len() != SEQ_LEN || bad.is_some() {
            return Err(DataError::BadSequence { len: x.len(), bad });
        }
        Ok(Self(x))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Sequence {
    type Error = DataError;
    fn try_from(x: Vec<f64>) -> Result<Self, DataError> {
        Self::new(x)
    }
}

impl From<Sequence> for Vec<f64> {
    fn from(s: Sequence) -> Self {
        s.0
    }
}

/// Quality dimension a preference pair disagrees on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Motion,
    Fidelity,
}

impl Dimension {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dimension::Motion => "Motion",
            Dimension::Fidelity => "Fidelity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub win: Sequence,
    pub lose: Sequence,
    pub cond: Condition,
    pub dim: Dimension,
    pub seed: u64,
}

/// One clean training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub x: Sequence,
    pub cond: Condition,
    pub seed: u64,
}

/// Parameters of the two degradations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub motion_damping: f64,
    pub noise_level: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            motion_damping: DEFAULT_MOTION_DAMPING,
            noise_level: DEFAULT_NOISE_LEVEL,
        }
    }
}

fn tone(bin: f64, amp: f64, phase: f64) -> impl Iterator<Item = f64> {
    (0..SEQ_LEN).map(move |i| amp * (2.0 * PI * bin * i as f64 / SEQ_LEN as f64 + phase).sin())
}

/// The low-frequency motion term of a clean sample.
pub fn carrier(cond: &Condition) -> Vec<f64> {
    tone(cond.frequency(), cond.amplitude(), cond.carrier_phase()).collect()
}

/// The fixed bin-16 texture term of a clean sample.
pub fn texture(cond: &Condition) -> Vec<f64> {
    tone(TEXTURE_BIN, TEXTURE_AMPLITUDE, cond.texture_phase()).collect()
}

pub fn gen_clean(cond: &Condition) -> Sequence {
    let x = carrier(cond)
        .into_iter()
        .zip(texture(cond))
        .map(|(a, b)| a + b)
        .collect();
    Sequence(x)
}

/// Draws a condition: amplitude control uniform on `[-0.9, 0.9]`, frequency
/// control on `{-1, 0, 1}`, both phases uniform on `[-1, 1]`.
pub fn sample_condition<R: Rng>(rng: &mut R) -> Condition {
    let amp = rng.random_range(-AMPLITUDE_COND_RANGE..=AMPLITUDE_COND_RANGE);
    let freq = rng.random_range(-1i32..=1) as f64;
    let phi = rng.random_range(-1.0..=1.0);
    let psi = rng.random_range(-1.0..=1.0);
    Condition([amp, freq, phi, psi])
}

/// Rescales the carrier of `x` by `damping`, leaving the texture untouched.
/// For a clean `x` the result is `damping·carrier(cond) + texture(cond)`.
pub fn degrade_motion(x: &Sequence, cond: &Condition, damping: f64) -> Result<Sequence, DataError> {
    if !(0.0..1.0).contains(&damping) {
        return Err(DataError::Damping(damping));
    }
    let car = carrier(cond);
    let out = x
        .0
        .iter()
        .zip(car)
        .map(|(v, c)| v - (1.0 - damping) * c)
        .collect();
    Ok(Sequence(out))
}

/// Adds noise confined to DFT bins 5–15: one sinusoid per bin with amplitude
/// `noise_level/√11` and a seeded random phase.
pub fn degrade_fidelity(x: &Sequence, seed: u64, noise_level: f64) -> Result<Sequence, DataError> {
    if !noise_level.is_finite() || noise_level < 0.0 {
        return Err(DataError::NoiseLevel(noise_level));
    }
    if noise_level == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = seeds::rng(seed);
    let n_bins = DAMAGE_BINS.count() as f64;
    let amp = noise_level / n_bins.sqrt();
    let mut out = x.0.clone();
    for bin in DAMAGE_BINS {
        let phase = rng.random_range(0.0..2.0 * PI);
        for (o, v) in out.iter_mut().zip(tone(bin as f64, amp, phase)) {
            *o += v;
        }
    }
    Ok(Sequence(out))
}

/// Builds a pair whose winner is a clean sample and whose loser is the same
/// sample degraded along `dim`. A pure function of `(seed, dim, params)`.
pub fn make_pref_pair(seed: u64, dim: Dimension, params: &DegradeParams) -> Result<PreferencePair, DataError> {
    let mut rng = seeds::rng(seed);
    let cond = sample_condition(&mut rng);
    let win = gen_clean(&cond);
    let lose = match dim {
        Dimension::Motion => degrade_motion(&win, &cond, params.motion_damping)?,
        Dimension::Fidelity => {
            let noise_seed = rng.random::<u64>();
            degrade_fidelity(&win, noise_seed, params.noise_level)?
        }
    };
    Ok(PreferencePair {
        win,
        lose,
        cond,
        dim,
        seed,
    })
}

/// `n` pairs, alternating Motion and Fidelity.
pub fn gen_pref_dataset(root_seed: u64, n: usize, params: &DegradeParams) -> Result<Vec<PreferencePair>, DataError> {
    (0..n)
        .map(|i| {
            let dim = if i % 2 == 0 {
                Dimension::Motion
            } else {
                Dimension::Fidelity
            };
            make_pref_pair(seeds::derive(root_seed, Purpose::Prefs, i as u64), dim, params)
        })
        .collect()
}

pub fn gen_record(seed: u64) -> DataRecord {
    let mut rng = seeds::rng(seed);
    let cond = sample_condition(&mut rng);
    DataRecord {
        x: gen_clean(&cond),
        cond,
        seed,
    }
}

/// `n` clean samples keyed by `(root_seed, purpose, index)`.
pub fn gen_dataset(root_seed: u64, purpose: Purpose, n: usize) -> Vec<DataRecord> {
    (0..n)
        .map(|i| gen_record(seeds::derive(root_seed, purpose, i as u64)))
        .collect()
}

/// Writes one JSON object per line. Returns the number of records written.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<usize, DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| DataError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(records.len())
}

/// Reads one JSON object per line; blank lines are skipped. Errors carry the
/// 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[PreferencePair]) -> Result<usize, DataError> {
    write_jsonl(path, records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<PreferencePair>, DataError> {
    read_jsonl(path)
}
