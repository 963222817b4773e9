use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{generate, GenerateLimits, GenerationTrace, QueryPlan};
use super::Network;
use crate::error::{Error, Result};
use crate::grammar::ExpertKind;
use crate::world::seed::derive;
use crate::world::{expert_call_count, render_scene, TaskKind, TaskSample};

pub const EVAL_SCHEMA_VERSION: u32 = 1;
const STREAM_EVAL: u64 = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalMode {
    #[default]
    Policy,
    /// All four experts queried before the answer.
    ForceFull,
    /// `k` distinct experts per trace, chosen uniformly; a fractional `k`
    /// is met in expectation by stochastic rounding.
    ForceRandom { k: f64 },
}

impl EvalMode {
    fn validate(&self) -> Result<()> {
        match self {
            EvalMode::ForceRandom { k } if !k.is_finite() || *k < 0.0 || *k > ExpertKind::ALL.len() as f64 => {
                Err(Error::Config(format!("random query budget must lie in [0, 4], got {k}")))
            }
            _ => Ok(()),
        }
    }

    fn plan(&self, rng: &mut ChaCha8Rng) -> QueryPlan {
        match *self {
            EvalMode::Policy => QueryPlan::Policy,
            EvalMode::ForceFull => QueryPlan::Forced(ExpertKind::ALL.to_vec()),
            EvalMode::ForceRandom { k } => {
                let whole = k.floor();
                let count = whole as usize + usize::from(rng.random::<f64>() < k - whole);
                let mut picked = sample(rng, ExpertKind::ALL.len(), count).into_vec();
                picked.sort_unstable();
                QueryPlan::Forced(picked.into_iter().map(|i| ExpertKind::ALL[i]).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: EvalMode,
    pub n: usize,
    pub accuracy: f64,
    pub accuracy_per_task: BTreeMap<TaskKind, f64>,
    pub count_per_task: BTreeMap<TaskKind, usize>,
    pub avg_decision_tokens: f64,
    /// Observation slots only.
    pub avg_observation_tokens: f64,
    /// Decision tokens plus their observation slots.
    pub avg_query_tokens: f64,
    pub avg_generated_tokens: f64,
    /// Fraction of traces per task kind with at least one query of each expert.
    pub usage_rate: BTreeMap<TaskKind, BTreeMap<ExpertKind, f64>>,
    pub wall_clock_s: f64,
    pub per_trace_s: f64,
    /// Expert evaluations made while generating; zero for a pure run.
    pub expert_calls: u64,
}

impl EvalReport {
    fn empty(mode: EvalMode) -> Self {
        Self {
            schema_version: EVAL_SCHEMA_VERSION,
            mode,
            n: 0,
            accuracy: 0.0,
            accuracy_per_task: BTreeMap::new(),
            count_per_task: BTreeMap::new(),
            avg_decision_tokens: 0.0,
            avg_observation_tokens: 0.0,
            avg_query_tokens: 0.0,
            avg_generated_tokens: 0.0,
            usage_rate: BTreeMap::new(),
            wall_clock_s: 0.0,
            per_trace_s: 0.0,
            expert_calls: 0,
        }
    }
}

pub fn evaluate(net: &Network, suite: &[TaskSample], mode: EvalMode, limits: &GenerateLimits, seed: u64) -> Result<EvalReport> {
    evaluate_traced(net, suite, mode, limits, seed).map(|(r, _)| r)
}

/// Sums and counts over a contiguous shard of the suite.
#[derive(Default)]
struct Tally {
    count: BTreeMap<TaskKind, usize>,
    correct: BTreeMap<TaskKind, usize>,
    used: BTreeMap<TaskKind, BTreeMap<ExpertKind, usize>>,
    decisions: usize,
    observations: usize,
    generated: usize,
    expert_calls: u64,
}

impl Tally {
    fn merge(&mut self, other: Tally) {
        for (k, v) in other.count {
            *self.count.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.correct {
            *self.correct.entry(k).or_insert(0) += v;
        }
        for (k, row) in other.used {
            let mine = self.used.entry(k).or_default();
            for (e, v) in row {
                *mine.entry(e).or_insert(0) += v;
            }
        }
        self.decisions += other.decisions;
        self.observations += other.observations;
        self.generated += other.generated;
        self.expert_calls += other.expert_calls;
    }

    fn report(self, mode: EvalMode, wall_clock_s: f64) -> EvalReport {
        let mut r = EvalReport::empty(mode);
        let total: usize = self.count.values().sum();
        if total == 0 {
            return r;
        }
        let n = total as f64;
        r.n = total;
        r.accuracy = self.correct.values().sum::<usize>() as f64 / n;
        for (k, &count) in &self.count {
            let c = count as f64;
            r.accuracy_per_task.insert(*k, self.correct.get(k).copied().unwrap_or(0) as f64 / c);
            r.usage_rate
                .insert(*k, self.used[k].iter().map(|(e, u)| (*e, *u as f64 / c)).collect());
        }
        r.count_per_task = self.count;
        r.avg_decision_tokens = self.decisions as f64 / n;
        r.avg_observation_tokens = self.observations as f64 / n;
        r.avg_query_tokens = (self.decisions + self.observations) as f64 / n;
        r.avg_generated_tokens = self.generated as f64 / n;
        r.expert_calls = self.expert_calls;
        r.wall_clock_s = wall_clock_s;
        r.per_trace_s = wall_clock_s / n;
        r
    }
}

/// Generates the traces for `tasks`, which start at suite index `offset`;
/// every task draws from its own stream, so results do not depend on how
/// the suite is sharded.
fn run_shard(
    net: &Network,
    tasks: &[TaskSample],
    offset: usize,
    mode: EvalMode,
    limits: &GenerateLimits,
    seed: u64,
) -> Result<(Tally, Vec<GenerationTrace>)> {
    let images = tasks.iter().map(|t| render_scene(&t.scene)).collect::<Result<Vec<_>>>()?;
    let calls_before = expert_call_count();
    let mut traces = Vec::with_capacity(tasks.len());
    for (i, (task, image)) in tasks.iter().zip(&images).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, STREAM_EVAL, (offset + i) as u64));
        let plan = mode.plan(&mut rng);
        traces.push(generate(net, image, &task.question, limits, &plan, Some(&mut rng))?);
    }
    let mut t = Tally {
        expert_calls: expert_call_count() - calls_before,
        ..Default::default()
    };
    for (task, trace) in tasks.iter().zip(&traces) {
        let k = task.task_kind;
        *t.count.entry(k).or_insert(0) += 1;
        *t.correct.entry(k).or_insert(0) += usize::from(trace.answer == task.answer);
        let experts: BTreeSet<ExpertKind> = trace.chain.experts();
        let row = t.used.entry(k).or_default();
        for e in ExpertKind::ALL {
            *row.entry(e).or_insert(0) += usize::from(experts.contains(&e));
        }
        t.decisions += trace.decision_tokens;
        t.observations += trace.observation_tokens;
        t.generated += trace.generated_tokens;
    }
    Ok((t, traces))
}

/// One trace per task plus the aggregate report.
pub fn evaluate_traced(
    net: &Network,
    suite: &[TaskSample],
    mode: EvalMode,
    limits: &GenerateLimits,
    seed: u64,
) -> Result<(EvalReport, Vec<GenerationTrace>)> {
    evaluate_parallel(net, suite, mode, limits, seed, 1)
}

/// Splits the suite into `workers` contiguous shards evaluated on scoped
/// threads over the shared read-only network.
pub fn evaluate_parallel(
    net: &Network,
    suite: &[TaskSample],
    mode: EvalMode,
    limits: &GenerateLimits,
    seed: u64,
    workers: usize,
) -> Result<(EvalReport, Vec<GenerationTrace>)> {
    mode.validate()?;
    if suite.is_empty() {
        return Ok((EvalReport::empty(mode), Vec::new()));
    }
    let started = Instant::now();
    let chunk = suite.len().div_ceil(workers.max(1));
    let shards: Vec<Result<(Tally, Vec<GenerationTrace>)>> = if workers <= 1 {
        vec![run_shard(net, suite, 0, mode, limits, seed)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = suite
                .chunks(chunk)
                .enumerate()
                .map(|(i, tasks)| scope.spawn(move || run_shard(net, tasks, i * chunk, mode, limits, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut tally = Tally::default();
    let mut traces = Vec::with_capacity(suite.len());
    for shard in shards {
        let (t, tr) = shard?;
        tally.merge(t);
        traces.extend(tr);
    }
    Ok((tally.report(mode, started.elapsed().as_secs_f64()), traces))
}
