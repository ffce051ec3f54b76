//! One function per subcommand. Each reads its inputs from the output
//! directory, writes its artifacts there and returns the `Run` bookkeeping.

use std::fmt::Write as _;

use anyhow::Context;
use segpref_core::evalsuite::analysis::{
    curve_csv, evaluate, fidelity_trend, motion_band_step, motion_reach_step, skip_experiment, timestep_analysis,
    CurveRow, EvalSet,
};
use segpref_core::evalsuite::stats::sign_test;
use segpref_core::evalsuite::svg::{line_chart, Series};
use segpref_core::evalsuite::sweep::{
    combined_ranks, default_grid, parse_grid, records_csv, run_sweep, summarize, summary_csv, GridValue, MetricRecord,
    SweepKind, SweepSetup,
};
use segpref_core::flowmatch::{fm_loss_value, heldout_batch, train_base, SamplerConfig};
use segpref_core::seeds::{self, Purpose};
use segpref_core::synthgen::{
    gen_dataset, gen_pref_dataset, read_dataset, read_jsonl, sample_condition, write_dataset, write_jsonl, Condition,
    DataRecord,
};
use segpref_core::tpo::{log_csv, train_tpo};
use segpref_core::velonet::{load_params, serialize_params, Architecture, Model, VelocityNet};
use serde_json::json;

use crate::artifacts::{self, Run, BASE_PARAMS, EVAL_CONDS, HELDOUT_DATA, PREFS, TRAIN_DATA};
use crate::config::{max_rank, RunConfig};
use crate::failure::Failure;

pub const HELDOUT_SIZE: usize = 500;
/// Analysis curves use at most this many evaluation conditions.
pub const ANALYSIS_CONDS: usize = 100;
const HELDOUT_NOISE_INDEX: u64 = u64::MAX;

type CmdResult = Result<Run, Failure>;

fn json_bytes(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s.into_bytes()
}

fn load_model(run: &mut Run, rel: &str, producer: &str) -> Result<Model, Failure> {
    let path = run.input(rel, producer)?;
    Ok(load_params(&path, &Architecture::default()).with_context(|| format!("loading {}", path.display()))?)
}

fn load_conds(run: &mut Run) -> Result<Vec<Condition>, Failure> {
    let path = run.input(EVAL_CONDS, "gen-data")?;
    Ok(read_jsonl(&path)?)
}

fn write_jsonl_output<T: serde::Serialize>(run: &mut Run, rel: &str, rows: &[T]) -> anyhow::Result<()> {
    let path = run.prepare(rel)?;
    write_jsonl(&path, rows)?;
    run.record_output(rel)
}

pub fn gen_data(cfg: &RunConfig) -> CmdResult {
    let mut run = Run::new(&cfg.out_dir, "gen-data");
    let train = gen_dataset(cfg.seed, Purpose::TrainData, cfg.data.n_train);
    write_jsonl_output(&mut run, TRAIN_DATA, &train)?;
    let held = gen_dataset(cfg.seed, Purpose::HeldOut, HELDOUT_SIZE);
    write_jsonl_output(&mut run, HELDOUT_DATA, &held)?;
    let mut rng = seeds::rng_for(cfg.seed, Purpose::EvalConds, 0);
    let conds: Vec<Condition> = (0..cfg.eval.n_conds).map(|_| sample_condition(&mut rng)).collect();
    write_jsonl_output(&mut run, EVAL_CONDS, &conds)?;
    Ok(run)
}

pub fn build_prefs(cfg: &RunConfig) -> CmdResult {
    let mut run = Run::new(&cfg.out_dir, "build-prefs");
    let prefs = gen_pref_dataset(cfg.seed, cfg.data.n_prefs, &cfg.degrade())?;
    let path = run.prepare(PREFS)?;
    write_dataset(&path, &prefs)?;
    run.record_output(PREFS)?;
    Ok(run)
}

pub fn train_base_cmd(cfg: &RunConfig) -> CmdResult {
    let mut run = Run::new(&cfg.out_dir, "train-base");
    let data: Vec<DataRecord> = read_jsonl(&run.input(TRAIN_DATA, "gen-data")?)?;
    let held: Vec<DataRecord> = read_jsonl(&run.input(HELDOUT_DATA, "gen-data")?)?;
    let hb = heldout_batch(&held, seeds::derive(cfg.seed, Purpose::HeldOut, HELDOUT_NOISE_INDEX));

    let mut net = VelocityNet::new(Architecture::default(), seeds::derive(cfg.seed, Purpose::BaseInit, 0));
    let initial = fm_loss_value(&net, None, &hb)?;
    let history = train_base(&mut net, &data, &cfg.base_train(), cfg.seed)?;
    let fin = fm_loss_value(&net, None, &hb)?;

    let path = run.prepare(BASE_PARAMS)?;
    serialize_params(&Model::base(net), &path)?;
    run.record_output(BASE_PARAMS)?;

    let mut csv = String::from("step,t_mean,loss\n");
    for r in &history {
        let _ = writeln!(csv, "{},{},{}", r.step, r.t_mean, r.loss);
    }
    run.write("curves/base_loss.csv", csv.as_bytes())?;
    let svg = line_chart(
        "base training loss",
        "step",
        "flow-matching loss",
        &[Series {
            label: "train".into(),
            points: history.iter().map(|r| (r.step as f64, r.loss)).collect(),
        }],
    );
    run.write("curves/base_loss.svg", svg.as_bytes())?;
    let report = json!({
        "steps": history.len(),
        "heldout_initial": initial,
        "heldout_final": fin,
        "heldout_ratio": fin / initial,
    });
    run.write("curves/base_report.json", &json_bytes(&report))?;
    Ok(run)
}

fn curve_series(label: &str, rows: &[CurveRow], f: fn(&CurveRow) -> f64) -> Series {
    Series {
        label: label.into(),
        points: rows.iter().map(|r| (r.t, f(r))).collect(),
    }
}

pub fn analyze_timesteps(cfg: &RunConfig) -> CmdResult {
    let mut run = Run::new(&cfg.out_dir, "analyze-timesteps");
    let model = load_model(&mut run, BASE_PARAMS, "train-base")?;
    let mut conds = load_conds(&mut run)?;
    conds.truncate(ANALYSIS_CONDS);
    let sampler = cfg.sampler();
    let seeds_ = [cfg.seed];
    let full = timestep_analysis(&model, &conds, &seeds_, &sampler)?;
    let frac = cfg.schedule.f_switch;
    let skip_k = (frac * sampler.n_steps as f64).round() as usize;
    let skipped = timestep_analysis(&model, &conds, &seeds_, &SamplerConfig { skip_k, ..sampler })?;
    run.write("curves/timesteps.csv", curve_csv(&full).as_bytes())?;
    run.write("curves/timesteps_skip.csv", curve_csv(&skipped).as_bytes())?;
    let skip_label = format!("skip first {skip_k}");
    let motion = line_chart(
        "motion of intermediate clean estimates",
        "t",
        "mean motion score",
        &[
            curve_series("full", &full, |r| r.motion_mean),
            curve_series(&skip_label, &skipped, |r| r.motion_mean),
        ],
    );
    run.write("curves/timesteps_motion.svg", motion.as_bytes())?;
    let fidelity = line_chart(
        "fidelity of intermediate clean estimates",
        "t",
        "mean fidelity score",
        &[
            curve_series("full", &full, |r| r.fidelity_mean),
            curve_series(&skip_label, &skipped, |r| r.fidelity_mean),
        ],
    );
    run.write("curves/timesteps_fidelity.svg", fidelity.as_bytes())?;

    let report = skip_experiment(&model, frac, &conds, &seeds_, &sampler)?;
    let mut csv = String::from(
        "cond_index,seed,fidelity_full,fidelity_skip,motion_full,motion_skip,low_band_divergence,resample_divergence\n",
    );
    for p in &report.pairs {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            p.cond_index,
            p.seed,
            p.fidelity_full,
            p.fidelity_skip,
            p.motion_full,
            p.motion_skip,
            p.low_band_divergence,
            p.resample_divergence
        );
    }
    run.write("curves/skip_pairs.csv", csv.as_bytes())?;
    let summary = json!({
        "n_steps": sampler.n_steps,
        "cfg_w": sampler.cfg_w,
        "motion_reach_step_90": motion_reach_step(&full, 0.9),
        "motion_band_step_10": motion_band_step(&full, 0.1),
        "fidelity_spearman": fidelity_trend(&full),
        "skip": {
            "skip_k": report.skip_k,
            "median_fidelity_full": report.median_fidelity_full,
            "median_fidelity_skip": report.median_fidelity_skip,
            "fidelity_iqr_full": report.fidelity_iqr_full,
            "median_fidelity_delta": report.median_fidelity_delta,
            "median_low_band_divergence": report.median_low_band_divergence,
            "median_resample_divergence": report.median_resample_divergence,
        },
    });
    run.write("curves/analysis.json", &json_bytes(&summary))?;
    Ok(run)
}

pub fn train_tpo_cmd(cfg: &RunConfig) -> CmdResult {
    let variant = cfg.tpo.variant.clone();
    let mut run = Run::new(&cfg.out_dir, "train-tpo");
    let base = load_model(&mut run, BASE_PARAMS, "train-base")?;
    let prefs = read_dataset(&run.input(PREFS, "build-prefs")?)?;
    let out = train_tpo(&base.net, &prefs, cfg.schedule()?, &cfg.tpo_config()?, &cfg.lora(), cfg.seed)?;

    let rel = artifacts::tpo_params(&variant);
    let path = run.prepare(&rel)?;
    serialize_params(&out.model, &path)?;
    run.record_output(&rel)?;
    run.write(&format!("curves/tpo-{variant}_loss.csv"), log_csv(&out.log).as_bytes())?;
    let svg = line_chart(
        &format!("{variant} preference loss"),
        "step",
        "loss",
        &[Series {
            label: variant.clone(),
            points: out.log.iter().map(|r| (r.step as f64, r.loss)).collect(),
        }],
    );
    run.write(&format!("curves/tpo-{variant}_loss.svg"), svg.as_bytes())?;
    let n = out.log.len();
    let tenth = (n / 10).max(1);
    let report = json!({
        "variant": variant,
        "steps": n,
        "initial_loss": out.mean_loss(0..tenth),
        "final_loss": out.mean_loss(n - tenth..n),
    });
    run.write(&format!("curves/tpo-{variant}_report.json"), &json_bytes(&report))?;
    Ok(run)
}

fn record(variant: &str, seed: u64, e: &EvalSet) -> MetricRecord {
    MetricRecord {
        variant: variant.into(),
        param: "-".into(),
        seed,
        motion: e.median_motion(),
        fidelity: e.median_fidelity(),
        fd: e.fd.value,
        nfe: e.nfe,
        status: "ok".into(),
    }
}

pub fn eval(cfg: &RunConfig) -> CmdResult {
    let variant = cfg.tpo.variant.clone();
    let mut run = Run::new(&cfg.out_dir, "eval");
    let base = load_model(&mut run, BASE_PARAMS, "train-base")?;
    let tuned = load_model(&mut run, &artifacts::tpo_params(&variant), &format!("train-tpo --variant {variant}"))?;
    let conds = load_conds(&mut run)?;
    let sampler = cfg.sampler();
    let eb = evaluate(&base, &conds, cfg.seed, &sampler)?;
    let et = evaluate(&tuned, &conds, cfg.seed, &sampler)?;

    let rows = [record("base", cfg.seed, &eb), record(&variant, cfg.seed, &et)];
    run.write(&format!("sweeps/eval-{variant}.csv"), records_csv(&rows).as_bytes())?;
    let mut csv = String::from("cond_index,base_motion,base_fidelity,tuned_motion,tuned_fidelity\n");
    for i in 0..conds.len() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{}",
            eb.motion[i], eb.fidelity[i], et.motion[i], et.fidelity[i]
        );
    }
    run.write(&format!("sweeps/eval-{variant}_samples.csv"), csv.as_bytes())?;
    let report = json!({
        "variant": variant,
        "n_conds": conds.len(),
        "nfe": et.nfe,
        "base": {"median_motion": eb.median_motion(), "median_fidelity": eb.median_fidelity(), "fd": eb.fd.value},
        "tuned": {"median_motion": et.median_motion(), "median_fidelity": et.median_fidelity(), "fd": et.fd.value},
        "motion_sign_test": sign_test(&eb.motion, &et.motion),
        "fidelity_sign_test": sign_test(&eb.fidelity, &et.fidelity),
    });
    run.write(&format!("sweeps/eval-{variant}.json"), &json_bytes(&report))?;
    Ok(run)
}

/// Resolves the grid (command line first, then config, then the default) and
/// writes it back into `cfg` so `run.json` names the exact grid used.
pub fn resolve_grid(cfg: &mut RunConfig, kind: SweepKind, flag: Option<&str>) -> Result<Vec<GridValue>, Failure> {
    let text = flag.map(str::to_string).unwrap_or_else(|| cfg.sweep.grid.clone());
    let grid = if text.trim().is_empty() {
        default_grid(kind, cfg.sample.n_steps)
    } else {
        let items: Vec<&str> = text.split(',').map(str::trim).collect();
        parse_grid(kind, &items, max_rank(), cfg.sample.n_steps).map_err(Failure::usage)?
    };
    cfg.sweep.grid = grid.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",");
    Ok(grid)
}

pub fn sweep(cfg: &RunConfig, kind: SweepKind, grid: &[GridValue]) -> CmdResult {
    let mut run = Run::new(&cfg.out_dir, format!("sweep {kind}"));
    let base = load_model(&mut run, BASE_PARAMS, "train-base")?;
    let prefs = read_dataset(&run.input(PREFS, "build-prefs")?)?;
    let conds = load_conds(&mut run)?;
    let setup = SweepSetup {
        base: &base.net,
        prefs: &prefs,
        eval_conds: &conds,
        tpo: cfg.tpo_config()?,
        lora: cfg.lora(),
        schedule: cfg.schedule()?,
        sampler: cfg.sampler(),
    };
    let seeds_: Vec<u64> = (0..cfg.sweep.n_seeds as u64).map(|i| cfg.seed + i).collect();
    let rows = run_sweep(kind, grid, &seeds_, &setup).map_err(Failure::usage)?;
    run.write(&format!("sweeps/{kind}.csv"), records_csv(&rows).as_bytes())?;
    let summary = summarize(&rows);
    run.write(&format!("sweeps/{kind}_summary.csv"), summary_csv(&summary).as_bytes())?;
    let mut ranks = String::from("variant,param,combined_rank\n");
    for (s, r) in summary.iter().zip(combined_ranks(&summary)) {
        let _ = writeln!(ranks, "{},{},{r}", s.variant, s.param);
    }
    run.write(&format!("sweeps/{kind}_ranks.csv"), ranks.as_bytes())?;
    if kind != SweepKind::Ablation {
        let mut series: Vec<Series> = Vec::new();
        for s in &summary {
            let x: f64 = s.param.parse().unwrap_or(f64::NAN);
            match series.iter_mut().find(|ser| ser.label == s.variant) {
                Some(ser) => ser.points.push((x, s.fidelity_mean)),
                None => series.push(Series {
                    label: s.variant.clone(),
                    points: vec![(x, s.fidelity_mean)],
                }),
            }
        }
        let svg = line_chart(&format!("{kind} sweep"), kind.name(), "mean median fidelity", &series);
        run.write(&format!("sweeps/{kind}.svg"), svg.as_bytes())?;
    }
    Ok(run)
}
