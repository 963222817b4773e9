use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::{worker_count, ExperimentConfig, SweepParam};
use crate::curriculum::{
    build_stage1_corpus, build_stage2_corpus, build_stage2_split, corpus_stats, read_corpus, stage1_from_records,
    stage2_from_records, test_suite, write_corpus, CorpusManifest, CorpusRecord, PathCategory, Split,
    CORPUS_SCHEMA_VERSION,
};
use crate::engine::{
    evaluate_parallel, load_checkpoint, read_traces, save_checkpoint, train_stage1, train_stage2, write_traces,
    EvalReport, Network, TraceRecord, TrainMetrics,
};
use crate::error::{Error, Result};
use crate::grammar::ExpertKind;
use crate::projection::HeadSet;
use crate::world::TaskKind;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Every report file on disk: the payload tagged with its kind, schema
/// version and the hash of the config that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub report: T,
}

fn write_report<T: Serialize + Clone>(dir: &Path, kind: &str, hash: &str, report: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let env = Envelope {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: kind.to_string(),
        config_hash: hash.to_string(),
        report: report.clone(),
    };
    fs::write(dir.join(format!("{kind}_report.json")), serde_json::to_string_pretty(&env)? + "\n")?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataReport {
    pub stage1: CorpusManifest,
    pub stage2: CorpusManifest,
    pub test: Option<CorpusManifest>,
}

/// Writes the stage-1, stage-2 and test corpora under `out`.
pub fn cmd_data(cfg: &ExperimentConfig, out: &Path) -> Result<DataReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let d = &cfg.data;
    let manifest = |stage, count, stats, mix| CorpusManifest {
        schema_version: CORPUS_SCHEMA_VERSION,
        stage,
        seed: cfg.seed,
        slot_count: d.slots,
        mix,
        count,
        stats,
        config_hash: hash.clone(),
    };

    let s1 = build_stage1_corpus(d.stage1_samples, cfg.seed, d.slots)?;
    let m1 = manifest(1, s1.len(), None, None);
    write_corpus(&out.join("stage1"), &s1.iter().map(CorpusRecord::from).collect::<Vec<_>>(), &m1)?;

    let s2 = build_stage2_corpus(d.stage2_samples, d.mix, cfg.seed, d.slots)?;
    let m2 = manifest(2, s2.len(), Some(corpus_stats(&s2)), Some(d.mix));
    write_corpus(&out.join("stage2"), &s2.iter().map(CorpusRecord::from).collect::<Vec<_>>(), &m2)?;

    let test = if d.test_samples > 0 {
        let t = build_stage2_split(d.test_samples, d.mix, cfg.seed, d.slots, Split::Test)?;
        let m = manifest(2, t.len(), Some(corpus_stats(&t)), Some(d.mix));
        write_corpus(&out.join("test"), &t.iter().map(CorpusRecord::from).collect::<Vec<_>>(), &m)?;
        Some(m)
    } else {
        None
    };
    write_config(out, cfg)?;
    let report = DataReport {
        stage1: m1,
        stage2: m2,
        test,
    };
    write_report(out, "data", &hash, &report)?;
    Ok(report)
}

/// Fresh network and stage-1 training for one seed.
pub fn run_stage1(cfg: &ExperimentConfig, seed: u64) -> Result<(Network, TrainMetrics)> {
    let mut net = Network::new(cfg.backbone.clone(), cfg.data.slots, seed, &Device::Cpu)?;
    let corpus = build_stage1_corpus(cfg.data.stage1_samples, seed, cfg.data.slots)?;
    let tc = crate::engine::TrainConfig {
        seed,
        ..cfg.stage1.clone()
    };
    let metrics = train_stage1(&mut net, &tc, &corpus)?;
    Ok((net, metrics))
}

/// Stage-2 training for one seed, from `init` or, for the ablation, from a
/// fresh network.
pub fn run_stage2(cfg: &ExperimentConfig, init: Option<Network>, seed: u64) -> Result<(Network, TrainMetrics)> {
    let mut net = match init {
        Some(n) => n,
        None => Network::new(cfg.backbone.clone(), cfg.data.slots, seed, &Device::Cpu)?,
    };
    let corpus = build_stage2_corpus(cfg.data.stage2_samples, cfg.data.mix, seed, cfg.data.slots)?;
    let tc = crate::engine::TrainConfig {
        seed,
        ..cfg.stage2.clone()
    };
    let metrics = train_stage2(&mut net, &tc, &corpus)?;
    Ok((net, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub stage: u8,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub final_ce: f64,
    pub final_vis_total: f64,
    pub final_decision_tokens: f64,
    pub selection_frequency: BTreeMap<PathCategory, f64>,
    pub selection_by_task: BTreeMap<TaskKind, BTreeMap<PathCategory, f64>>,
    pub wall_clock_s: f64,
    pub history: Vec<u8>,
}

fn load_init(cfg: &ExperimentConfig, path: &Path) -> Result<Network> {
    let mut net = load_checkpoint(path, &Device::Cpu)?.network;
    if net.decoder.cfg != cfg.backbone {
        return Err(Error::Checkpoint(format!(
            "init backbone {:?} differs from the configured {:?}",
            net.decoder.cfg, cfg.backbone
        )));
    }
    if net.slots != cfg.data.slots {
        log::warn!("rebuilding projection heads for {} slots (init has {})", cfg.data.slots, net.slots);
        let dims = crate::projection::HeadDims {
            slots: cfg.data.slots,
            ..net.head_dims()
        };
        net.heads = HeadSet::new(dims, cfg.seed.wrapping_add(1), DType::F32, &Device::Cpu)?;
        net.slots = cfg.data.slots;
    }
    Ok(net)
}

fn corpus_dir(data: &Path, stage: u8, slots: usize) -> Result<Vec<CorpusRecord>> {
    let (m, records) = read_corpus(&data.join(format!("stage{stage}")))?;
    if m.stage != stage || m.slot_count != slots {
        return Err(Error::DataSchemaMismatch(format!(
            "corpus is stage {} with {} slots, expected stage {stage} with {slots}",
            m.stage, m.slot_count
        )));
    }
    Ok(records)
}

/// Trains one stage and writes the checkpoint, per-step metrics and the
/// report under `out`. Corpora are read from `data` when given, otherwise
/// rebuilt from the config.
pub fn cmd_train(cfg: &ExperimentConfig, stage: u8, init: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let slots = cfg.data.slots;
    let mut net = match init {
        Some(p) => load_init(cfg, p)?,
        None => Network::new(cfg.backbone.clone(), slots, cfg.seed, &Device::Cpu)?,
    };
    let metrics = match stage {
        1 => {
            let corpus = match data {
                Some(d) => stage1_from_records(&corpus_dir(d, 1, slots)?, slots)?,
                None => build_stage1_corpus(cfg.data.stage1_samples, cfg.seed, slots)?,
            };
            train_stage1(&mut net, &cfg.stage1, &corpus)?
        }
        2 => {
            let corpus = match data {
                Some(d) => stage2_from_records(&corpus_dir(d, 2, slots)?, slots)?,
                None => build_stage2_corpus(cfg.data.stage2_samples, cfg.data.mix, cfg.seed, slots)?,
            };
            train_stage2(&mut net, &cfg.stage2, &corpus)?
        }
        s => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
    };
    fs::create_dir_all(out)?;
    save_checkpoint(&out.join("checkpoint.safetensors"), &net, &hash)?;
    let mut w = BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    for rec in &metrics.steps {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let last = metrics.steps.last();
    let report = TrainReport {
        stage,
        seed: cfg.seed,
        steps: metrics.steps.len(),
        final_loss: last.map_or(0.0, |r| r.loss),
        final_ce: last.map_or(0.0, |r| r.ce),
        final_vis_total: last.map_or(0.0, |r| r.vis_total),
        final_decision_tokens: last.map_or(0.0, |r| r.decision_tokens),
        selection_frequency: metrics.selection_frequency.clone(),
        selection_by_task: metrics.selection_by_task.clone(),
        wall_clock_s: metrics.wall_clock_s,
        history: net.history.clone(),
    };
    write_config(out, cfg)?;
    write_report(out, "train", &hash, &report)?;
    Ok(report)
}

/// Evaluates a checkpoint on the configured test suite.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let net = load_checkpoint(checkpoint, &Device::Cpu)?.network;
    let suite = test_suite(cfg.data.test_samples, cfg.seed);
    let (report, traces) = evaluate_parallel(&net, &suite, cfg.eval.mode, &cfg.eval.limits, cfg.seed, worker_count()?)?;
    if cfg.eval.dump_traces {
        let records: Vec<TraceRecord> = traces
            .iter()
            .zip(&suite)
            .enumerate()
            .map(|(i, (t, task))| TraceRecord::from_trace(i, &task.question, Some(&task.answer), t))
            .collect();
        write_traces(&out.join("traces.safetensors"), &records, &hash)?;
    }
    write_config(out, cfg)?;
    write_report(out, "eval", &hash, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub train_s: f64,
    pub eval: EvalReport,
}

/// Seed means for one swept value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSummary {
    pub value: f64,
    pub runs: usize,
    pub accuracy: f64,
    pub accuracy_per_task: BTreeMap<TaskKind, f64>,
    pub avg_decision_tokens: f64,
    pub avg_observation_tokens: f64,
    pub avg_query_tokens: f64,
    pub usage_rate: BTreeMap<TaskKind, BTreeMap<ExpertKind, f64>>,
    pub per_trace_s: f64,
    pub train_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub param: SweepParam,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

fn mean_map<K: Ord + Copy>(maps: &[&BTreeMap<K, f64>]) -> BTreeMap<K, f64> {
    let mut sum: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for m in maps {
        for (k, v) in *m {
            let e = sum.entry(*k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    sum.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
}

fn summarize(value: f64, rows: &[&SweepRow]) -> SweepSummary {
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&SweepRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    let usage: Vec<BTreeMap<TaskKind, BTreeMap<ExpertKind, f64>>> = rows.iter().map(|r| r.eval.usage_rate.clone()).collect();
    let kinds: Vec<TaskKind> = usage.iter().flat_map(|u| u.keys().copied()).collect();
    let usage_rate = kinds
        .into_iter()
        .map(|k| (k, mean_map(&usage.iter().filter_map(|u| u.get(&k)).collect::<Vec<_>>())))
        .collect();
    SweepSummary {
        value,
        runs: rows.len(),
        accuracy: mean(&|r| r.eval.accuracy),
        accuracy_per_task: mean_map(&rows.iter().map(|r| &r.eval.accuracy_per_task).collect::<Vec<_>>()),
        avg_decision_tokens: mean(&|r| r.eval.avg_decision_tokens),
        avg_observation_tokens: mean(&|r| r.eval.avg_observation_tokens),
        avg_query_tokens: mean(&|r| r.eval.avg_query_tokens),
        usage_rate,
        per_trace_s: mean(&|r| r.eval.per_trace_s),
        train_s: mean(&|r| r.train_s),
    }
}

impl SweepReport {
    /// Plain-text comparison table, one line per value.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>5} {:>9} {:>9} {:>9} {:>11} {:>9}\n",
            format!("{:?}", self.param).to_lowercase(),
            "runs",
            "accuracy",
            "decisions",
            "obs_tok",
            "trace_ms",
            "train_s"
        );
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{:>8} {:>5} {:>9.4} {:>9.3} {:>9.3} {:>11.3} {:>9.1}",
                r.value,
                r.runs,
                r.accuracy,
                r.avg_decision_tokens,
                r.avg_observation_tokens,
                r.per_trace_s * 1e3,
                r.train_s
            );
        }
        s
    }
}

pub const SINGLE_SEED_BANNER: &str = "\
**********************************************************************
* WARNING: single-seed sweep. The swept effects are directional and  *
* need a seed ensemble; treat these numbers as anecdotal.            *
**********************************************************************";

/// Trains and evaluates one run per (value, seed), sequentially. For an
/// eta sweep the stage-1 network of each seed is shared by every value.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    cfg.validate()?;
    let sw = &cfg.sweep;
    if sw.values.is_empty() || sw.seeds == 0 {
        return Err(Error::Config("a sweep needs at least one value and one seed".into()));
    }
    for &v in &sw.values {
        let ok = match sw.param {
            SweepParam::Eta => v.is_finite() && v >= 0.0,
            SweepParam::Slots => v >= 1.0 && v.fract() == 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("invalid {:?} value {v}", sw.param)));
        }
    }
    if sw.seeds == 1 {
        eprintln!("{SINGLE_SEED_BANNER}");
        log::warn!("single-seed sweep");
    }
    let workers = worker_count()?;
    let suite = test_suite(cfg.data.test_samples, cfg.seed);
    let seeds: Vec<u64> = (0..sw.seeds as u64).map(|i| cfg.seed + i).collect();
    let mut rows = Vec::new();
    for &seed in &seeds {
        let shared = match sw.param {
            SweepParam::Eta => Some(run_stage1(cfg, seed)?),
            SweepParam::Slots => None,
        };
        for &value in &sw.values {
            let mut run = cfg.clone();
            let (init, s1_time) = match &shared {
                Some((net, m)) => {
                    run.stage2.weights.eta = value;
                    (net.try_clone()?, m.wall_clock_s)
                }
                None => {
                    run.set_slots(value as usize);
                    let (net, m) = run_stage1(&run, seed)?;
                    (net, m.wall_clock_s)
                }
            };
            run.validate()?;
            let (net, m2) = run_stage2(&run, Some(init), seed)?;
            let (eval, _) = evaluate_parallel(&net, &suite, run.eval.mode, &run.eval.limits, cfg.seed, workers)?;
            log::info!("sweep {:?}={value} seed {seed}: accuracy {:.4}", sw.param, eval.accuracy);
            rows.push(SweepRow {
                value,
                seed,
                train_s: s1_time + m2.wall_clock_s,
                eval,
            });
        }
    }
    let summary = sw
        .values
        .iter()
        .map(|&v| summarize(v, &rows.iter().filter(|r| r.value == v).collect::<Vec<_>>()))
        .collect();
    let report = SweepReport {
        param: sw.param,
        seeds,
        rows,
        summary,
    };
    write_config(out, cfg)?;
    write_report(out, "sweep", &cfg.hash(), &report)?;
    Ok(report)
}

/// Human-readable listing of a trace dump.
pub fn cmd_inspect_trace(path: &Path) -> Result<String> {
    let (hash, records) = read_traces(path)?;
    let mut s = format!("config {hash}, {} traces\n", records.len());
    for r in &records {
        let verdict = match &r.expected {
            Some(e) if *e == r.answer => "correct",
            Some(_) => "wrong",
            None => "unscored",
        };
        let _ = writeln!(s, "#{} [{verdict}] {}", r.index, r.question);
        let _ = writeln!(s, "  {}", r.chain);
        for (e, t) in r.spans.iter().zip(&r.predictions) {
            let mean = t.mean_all().and_then(|m| m.to_dtype(DType::F64)?.to_scalar::<f64>()).unwrap_or(f64::NAN);
            let _ = writeln!(s, "  {e:?}: shape {:?}, mean {mean:.4}", t.dims());
        }
    }
    Ok(s)
}
