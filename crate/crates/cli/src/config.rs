//! Run configuration: a flat `dotted.key = value` text format layered over
//! defaults, plus the JSON form embedded in `run.json`.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use segpref_core::flowmatch::{BaseTrainConfig, SamplerConfig};
use segpref_core::synthgen::DegradeParams;
use segpref_core::velonet::Architecture;
use segpref_core::tpo::{LoraConfig, SegmentSchedule, TpoConfig, TpoVariant};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_prefs: usize,
    pub lambda: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TpoSection {
    pub beta: f64,
    pub dim_prob: f64,
    pub lr: f64,
    pub full_lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub tau: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub n_steps: usize,
    pub cfg_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub f_switch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out conditions used by `eval`, `analyze-timesteps` and sweeps.
    pub n_conds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Seeds `seed, seed + 1, ...` per grid point.
    pub n_seeds: usize,
    /// Comma-separated grid; empty means the default grid of the sweep kind.
    pub grid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub base_train: BaseTrainSection,
    pub tpo: TpoSection,
    pub sample: SampleSection,
    pub schedule: ScheduleSection,
    pub lora: LoraSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let base = BaseTrainConfig::default();
        let tpo = TpoConfig::default();
        let sampler = SamplerConfig::default();
        let lora = LoraConfig::default();
        let degrade = DegradeParams::default();
        Self {
            seed: 1,
            data: DataSection {
                n_train: 5000,
                n_prefs: 2000,
                lambda: degrade.motion_damping,
                sigma: degrade.noise_level,
            },
            base_train: BaseTrainSection {
                steps: base.steps,
                batch: base.batch,
                lr: base.lr,
                cond_dropout: base.cond_dropout,
            },
            tpo: TpoSection {
                beta: tpo.beta,
                dim_prob: tpo.dim_prob,
                lr: tpo.lr,
                full_lr: tpo.full_lr,
                epochs: tpo.epochs,
                batch: tpo.batch,
                tau: tpo.tau,
                gamma: tpo.gamma,
                weight_decay: tpo.weight_decay,
                variant: tpo.variant.to_string(),
            },
            sample: SampleSection {
                n_steps: sampler.n_steps,
                cfg_w: sampler.cfg_w,
            },
            schedule: ScheduleSection {
                f_switch: SegmentSchedule::default().f_switch(),
            },
            lora: LoraSection {
                rank: lora.rank,
                alpha: lora.alpha,
            },
            eval: EvalSection { n_conds: 200 },
            sweep: SweepSection {
                n_seeds: 3,
                grid: String::new(),
            },
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Largest adapter rank the default architecture accepts.
pub fn max_rank() -> usize {
    let arch = Architecture::default();
    arch.hidden.min(arch.seq_len)
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    let unquoted = raw
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(raw);
    *node = match node {
        Value::Object(_) => bail!("`{key}` is a section, not a key"),
        Value::String(_) => Value::String(unquoted.to_string()),
        Value::Number(n) if n.is_u64() => {
            let v: u64 = raw
                .parse()
                .map_err(|_| anyhow!("`{key}` expects a non-negative integer, got `{raw}`"))?;
            Value::from(v)
        }
        Value::Number(_) => {
            let v: f64 = raw
                .parse()
                .map_err(|_| anyhow!("`{key}` expects a number, got `{raw}`"))?;
            serde_json::Number::from_f64(v)
                .map(Value::Number)
                .ok_or_else(|| anyhow!("`{key}` must be finite"))?
        }
        other => bail!("`{key}` has unsupported type {other}"),
    };
    Ok(())
}

impl RunConfig {
    /// Applies `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        set_path(&mut v, key, value)?;
        *self = serde_json::from_value(v)?;
        Ok(())
    }

    /// Reads either the text format or a `run.json` record.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if text.trim_start().starts_with('{') {
            let mut v: Map<String, Value> = serde_json::from_str(&text)?;
            let cfg = v
                .remove("config")
                .ok_or_else(|| anyhow!("{} has no `config` object", path.display()))?;
            return Ok(serde_json::from_value(cfg)?);
        }
        Self::from_text(&text)
    }

    pub fn variant(&self) -> Result<TpoVariant> {
        Ok(self.tpo.variant.parse()?)
    }

    pub fn base_train(&self) -> BaseTrainConfig {
        BaseTrainConfig {
            steps: self.base_train.steps,
            batch: self.base_train.batch,
            lr: self.base_train.lr,
            cond_dropout: self.base_train.cond_dropout,
            ..BaseTrainConfig::default()
        }
    }

    pub fn tpo_config(&self) -> Result<TpoConfig> {
        let t = &self.tpo;
        Ok(TpoConfig {
            beta: t.beta,
            dim_prob: t.dim_prob,
            lr: t.lr,
            full_lr: t.full_lr,
            epochs: t.epochs,
            batch: t.batch,
            tau: t.tau,
            gamma: t.gamma,
            weight_decay: t.weight_decay,
            variant: self.variant()?,
        })
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.sample.n_steps,
            cfg_w: self.sample.cfg_w,
            skip_k: 0,
        }
    }

    pub fn schedule(&self) -> Result<SegmentSchedule> {
        Ok(SegmentSchedule::new(self.schedule.f_switch)?)
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora.rank,
            alpha: self.lora.alpha,
        }
    }

    pub fn degrade(&self) -> DegradeParams {
        DegradeParams {
            motion_damping: self.data.lambda,
            noise_level: self.data.sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_train == 0 {
            bail!("data.n_train must be at least 1");
        }
        if d.n_prefs == 0 {
            bail!("data.n_prefs must be at least 1");
        }
        if !(0.0..=1.0).contains(&d.lambda) {
            bail!("data.lambda {} must lie in [0, 1]", d.lambda);
        }
        if !(d.sigma >= 0.0) {
            bail!("data.sigma {} must be >= 0", d.sigma);
        }
        let b = &self.base_train;
        if b.steps == 0 || b.batch == 0 {
            bail!("base_train.steps and base_train.batch must be at least 1");
        }
        if !(b.lr >= 0.0) {
            bail!("base_train.lr {} must be >= 0", b.lr);
        }
        if !(0.0..=1.0).contains(&b.cond_dropout) {
            bail!("base_train.cond_dropout {} must lie in [0, 1]", b.cond_dropout);
        }
        self.tpo_config()?.validate()?;
        self.sampler().validate()?;
        self.schedule()?;
        if self.lora.rank == 0 || self.lora.rank > max_rank() || !(self.lora.alpha > 0.0) {
            bail!("lora.rank must lie in [1, {}] and lora.alpha must be > 0", max_rank());
        }
        if self.eval.n_conds < segpref_core::evalsuite::metrics::MIN_FRECHET_SAMPLES {
            bail!(
                "eval.n_conds must be at least {}",
                segpref_core::evalsuite::metrics::MIN_FRECHET_SAMPLES
            );
        }
        if self.sweep.n_seeds == 0 {
            bail!("sweep.n_seeds must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    flatten(&key, child, out);
                }
            }
            Value::String(s) => out.push((prefix.to_string(), s.clone())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }

    fn to_text(cfg: &RunConfig) -> String {
        let mut rows = Vec::new();
        flatten("", &serde_json::to_value(cfg).unwrap(), &mut rows);
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    #[test]
    fn text_overrides_defaults() {
        let cfg = RunConfig::from_text("# comment\ntpo.beta = 25\nseed=7\n\ntpo.variant = \"ipo\"\n").unwrap();
        assert_eq!(cfg.tpo.beta, 25.0);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.tpo.variant, "ipo");
        assert_eq!(cfg.data.n_train, 5000);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(RunConfig::from_text("tpo.betta = 1").is_err());
        assert!(RunConfig::from_text("tpo = 1").is_err());
        assert!(RunConfig::from_text("seed = -3").is_err());
        assert!(RunConfig::from_text("seed 3").is_err());
        assert!(RunConfig::from_text("tpo.beta = fast").is_err());
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("schedule.f_switch", "0.3").unwrap();
        cfg.set("out_dir", "/tmp/x y").unwrap();
        let back = RunConfig::from_text(&to_text(&cfg)).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_validate_and_bad_values_do_not() {
        RunConfig::default().validate().unwrap();
        for (k, v) in [
            ("schedule.f_switch", "1.0"),
            ("tpo.variant", "nope"),
            ("tpo.beta", "0"),
            ("sample.n_steps", "0"),
            ("eval.n_conds", "3"),
            ("data.lambda", "1.5"),
        ] {
            let mut cfg = RunConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k} = {v} accepted");
        }
    }
}
