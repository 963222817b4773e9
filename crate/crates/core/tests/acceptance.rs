//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-8 and 13 are exact and fail the binary. Criteria 9-12 are
//! directional desk-scale measurements over a seed ensemble; their lines
//! report the outcome without failing the run. Pass criterion numbers as
//! arguments to run a subset.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::Device;
use common::*;
use glimpse::curriculum::{build_stage1_corpus, build_stage2_corpus, corpus_stats, test_suite, CoverageMix, PathCategory};
use glimpse::engine::{evaluate, train_stage1, EvalMode, EvalReport, GenerateLimits, Network, TrainConfig};
use glimpse::experiment::{cmd_eval, run_stage1, run_stage2, ExperimentConfig};
use glimpse::grammar::{layout, parse_chain, ChainBuilder, ExpertKind, ReasoningChain};
use glimpse::losses::{hungarian_match, sample_loss, sparsity_penalty, LossBreakdown, LossWeights};
use glimpse::model::BackboneConfig;
use glimpse::world::{expert_call_count, TaskKind};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 3;
const SUITE: usize = 500;
const SUITE_SEED: u64 = 0;

struct Outcome {
    exact: bool,
    pass: bool,
}

struct Ledger {
    outcomes: Vec<Outcome>,
}

impl Ledger {
    fn line(&mut self, n: usize, exact: bool, pass: bool, what: &str, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let kind = if exact { "exact" } else { "directional" };
        println!("criterion {n:>2} {verdict} [{kind}] {what}: {detail}");
        self.outcomes.push(Outcome { exact, pass });
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn hungarian(l: &mut Ledger) {
    let t = Instant::now();
    let mut r = rng(101);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let (k, m) = (r.random_range(1..=6), r.random_range(1..=6));
        let cost: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..m).map(|_| r.random_range(0..10) as f64).collect())
            .collect();
        if hungarian_match(&cost).unwrap().cost != brute_assignment(&cost).0 {
            mismatches += 1;
        }
    }
    let s = secs(t);
    l.line(
        1,
        true,
        mismatches == 0 && s < 60.0,
        "assignment cost equals enumeration on 10000 matrices",
        format!("{mismatches} mismatches, {s:.1}s"),
    );
}

fn gradients(l: &mut Ledger) {
    let t = Instant::now();
    let worst = worst_gradcheck_errors(100, 102);
    let s = secs(t);
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let names: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    l.line(
        2,
        true,
        max <= 1e-4 && s < 300.0,
        "finite-difference gradients over 100 instances",
        format!("worst {max:.2e} ({}), {s:.1}s", names.join(", ")),
    );
}

fn random_chain(r: &mut ChaCha8Rng, slots: usize) -> ReasoningChain {
    const WORDS: [&str; 8] = ["red", "look", "at", "the", "3", "yes", "?", "left"];
    let words = |r: &mut ChaCha8Rng, n: usize| -> String {
        (0..n).map(|_| *WORDS.choose(r).unwrap()).collect::<Vec<_>>().join(" ")
    };
    let expert = |r: &mut ChaCha8Rng| ExpertKind::ALL[r.random_range(0..4)];
    let mut b = ChainBuilder::new(slots);
    for _ in 0..r.random_range(0..3) {
        b = b.context_query(expert(r));
    }
    if r.random_bool(0.8) {
        b = b.think();
        for _ in 0..r.random_range(0..7) {
            b = if r.random_bool(0.5) {
                b.think_query(expert(r))
            } else {
                let n = r.random_range(1..4);
                b.think_text(&words(r, n))
            };
        }
    }
    if r.random_bool(0.8) {
        let n = r.random_range(0..3);
        b = b.answer(&words(r, n));
    }
    b.build().unwrap()
}

fn penalty(l: &mut Ledger) {
    let mut r = rng(103);
    let mut bad = 0;
    for _ in 0..2000 {
        let n = r.random_range(1..=8);
        let chain = random_chain(&mut r, n);
        let lay = layout(&chain, &chain.tokens()).unwrap();
        let decisions = chain.tokens().iter().filter(|t| ExpertKind::from_decision_token(t).is_some()).count();
        if sparsity_penalty(&lay, n) != (decisions * n) as f64 {
            bad += 1;
        }
    }
    l.line(3, true, bad == 0, "penalty equals decisions times slots on 2000 layouts", format!("{bad} mismatches"));
}

fn selection(l: &mut Ledger) {
    let mut r = rng(104);
    let mut bad = 0;
    for _ in 0..2000 {
        let slots = r.random_range(1..=8);
        let w = LossWeights {
            eta: r.random_range(1..=64) as f64 / 64.0,
            ..LossWeights::stage2()
        };
        let total = r.random_range(8..64) as f64 / 8.0;
        let paths: Vec<(usize, LossBreakdown)> = (0..r.random_range(1..6))
            .map(|_| {
                let decisions = r.random_range(0..=4);
                let vis = r.random_range(0..8) as f64 / 8.0;
                // dyadic parts keep ce + vis exactly equal across paths
                let terms = [(ExpertKind::Depth, vis)].into();
                let b = LossBreakdown::new(total - vis, terms, (decisions * slots) as f64, &w).unwrap();
                (decisions, b)
            })
            .collect();
        let fewest = paths.iter().map(|(d, _)| *d).min().unwrap();
        let expected = paths.iter().position(|(d, _)| *d == fewest).unwrap();
        let breakdowns: Vec<LossBreakdown> = paths.into_iter().map(|(_, b)| b).collect();
        if sample_loss(&breakdowns).unwrap().1 != expected {
            bad += 1;
        }
    }
    l.line(4, true, bad == 0, "fewest decision tokens selected for eta > 0, ties to lowest index", format!("{bad} mismatches over 2000 sets"));
}

const MALFORMED: [&str; 13] = [
    "<think> <query_seg> <depth_pad> <depth_pad> <depth_pad> <depth_pad> </think>",
    "<think> <query_seg> <seg_pad> <seg_pad> <seg_pad> </think>",
    "<think> <query_seg> <seg_pad> <seg_pad> <seg_pad> <seg_pad> <seg_pad> </think>",
    "<think> a b",
    "<answer> a",
    "<think> a </think> <answer> b </answer> c",
    "<think> <query_vibes> </think>",
    "<answer> <query_seg> <seg_pad> <seg_pad> <seg_pad> <seg_pad> </answer>",
    "hello <answer> a </answer>",
    "<think> <seg_pad> </think>",
    "<think> <think> </think>",
    "<think> a <answer> b </answer>",
    "<answer> a </answer> <answer> b </answer>",
];

fn grammar(l: &mut Ledger) {
    let t = Instant::now();
    let mut r = rng(105);
    let mut bad = 0;
    for _ in 0..10_000 {
        let n = r.random_range(1..=8);
        let chain = random_chain(&mut r, n);
        let text = chain.serialize();
        let ok_trip = parse_chain(&text, n).is_ok_and(|back| back == chain && back.serialize() == text);
        let toks = chain.tokens();
        let lay = layout(&chain, &toks).unwrap();
        let mut seen = vec![0u8; toks.len()];
        for &p in lay.text_positions.iter().chain(&lay.decision_positions).chain(&lay.answer_positions) {
            seen[p] += 1;
        }
        let mut ok_slots = true;
        for (d, slots) in &lay.observation_positions {
            ok_slots &= slots.len() == n && slots[0] == d + 1;
            for &s in slots {
                seen[s] += 1;
                ok_slots &= ExpertKind::from_pad_token(toks[s]) == ExpertKind::from_decision_token(toks[*d]);
            }
        }
        if !(ok_trip && ok_slots && seen.iter().all(|&c| c == 1)) {
            bad += 1;
        }
    }
    let accepted: Vec<&str> = MALFORMED.iter().copied().filter(|m| parse_chain(m, 4).is_ok()).collect();
    let s = secs(t);
    l.line(
        5,
        true,
        bad == 0 && accepted.is_empty() && s < 60.0,
        "round trip and layout on 10000 chains, malformed fixtures rejected",
        format!("{bad} bad chains, {} of {} fixtures accepted, {s:.1}s", accepted.len(), MALFORMED.len()),
    );
}

fn distribution(l: &mut Ledger) {
    let t = Instant::now();
    let corpus = build_stage2_corpus(10_000, CoverageMix::default(), 106, 4).unwrap();
    let stats = corpus_stats(&corpus);
    let s = secs(t);
    let target = [(PathCategory::Full, 0.2), (PathCategory::TaskSpecific, 0.6), (PathCategory::Minimal, 0.2)];
    let mut ok = s < 120.0;
    let mut parts = Vec::new();
    for (cat, p) in target {
        let got = stats.categories.get(&cat).copied().unwrap_or(0) as f64 / stats.samples as f64;
        ok &= (got - p).abs() <= 0.03;
        parts.push(format!("{cat:?} {got:.3}"));
    }
    l.line(6, true, ok, "stage-2 primary path mix within 3 points", format!("{}, {s:.1}s", parts.join(", ")));
}

fn overfit(l: &mut Ledger) {
    let cfg = BackboneConfig {
        hidden_dim: 64,
        layers: 2,
        heads: 4,
        ..Default::default()
    };
    let mut net = Network::new(cfg, 4, 113, &Device::Cpu).unwrap();
    let corpus = build_stage1_corpus(1, 113, 4).unwrap();
    let tc = TrainConfig {
        steps: 300,
        batch_size: 1,
        lr_backbone: 3e-3,
        lr_heads: 3e-3,
        ..TrainConfig::stage1()
    };
    let m = train_stage1(&mut net, &tc, &corpus).unwrap();
    let first = m.steps[0].vis_total;
    let best = m.steps.iter().map(|s| s.vis_total).fold(f64::INFINITY, f64::min);
    let hit = m.steps.iter().position(|s| s.vis_total < 0.1 * first);
    l.line(
        13,
        true,
        hit.is_some(),
        "single-sample vis_total below 10% of step 0 within 300 steps",
        format!(
            "step 0 {first:.4}, min {best:.4} ({:.1}%), first below at {hit:?}",
            100.0 * best / first
        ),
    );
}

/// Evaluations for one seed of the desk-scale ensemble.
#[derive(Default)]
struct SeedRuns {
    eta: BTreeMap<u32, EvalReport>,
    slots: BTreeMap<usize, EvalReport>,
    stage2_only: Option<EvalReport>,
    full: Option<EvalReport>,
    random: Option<EvalReport>,
    force_full_cmd: Option<EvalReport>,
    /// Fastest of the interleaved timing passes, per slot count.
    trace_s: BTreeMap<usize, f64>,
    expert_calls: u64,
}

const TIMING_PASSES: usize = 3;

type Check = fn(&mut Ledger);

fn profile() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.hidden_dim = 64;
    cfg.backbone.layers = 2;
    cfg.backbone.heads = 4;
    cfg.stage1.steps = 1000;
    cfg.stage2.steps = 800;
    cfg.data.test_samples = SUITE;
    cfg
}

fn eta_key(eta: f64) -> u32 {
    (eta * 1000.0).round() as u32
}

fn run_seed(seed: u64) -> SeedRuns {
    let suite = test_suite(SUITE, SUITE_SEED);
    let limits = GenerateLimits::default();
    let mut out = SeedRuns::default();
    let eval = |net: &Network, mode: EvalMode, calls: &mut u64| {
        let before = expert_call_count();
        let r = evaluate(net, &suite, mode, &limits, seed).unwrap();
        *calls += expert_call_count() - before;
        r
    };
    let mut timed: Vec<(usize, Network)> = Vec::new();
    for slots in [2usize, 4, 8] {
        let t = Instant::now();
        let mut cfg = profile();
        cfg.set_slots(slots);
        let (s1, _) = run_stage1(&cfg, seed).unwrap();
        eprintln!("seed {seed} N={slots}: stage 1 {:.0}s", secs(t));
        let etas: &[f64] = if slots == 4 { &[0.0, 0.1, 0.5] } else { &[0.1] };
        for &eta in etas {
            let t = Instant::now();
            let mut c = cfg.clone();
            c.stage2.weights.eta = eta;
            let (net, _) = run_stage2(&c, Some(s1.try_clone().unwrap()), seed).unwrap();
            let policy = eval(&net, EvalMode::Policy, &mut out.expert_calls);
            eprintln!(
                "seed {seed} N={slots} eta={eta}: stage 2 + eval {:.0}s, acc {:.3}, dec {:.2}",
                secs(t),
                policy.accuracy,
                policy.avg_decision_tokens
            );
            if slots == 4 && eta == 0.1 {
                out.full = Some(eval(&net, EvalMode::ForceFull, &mut out.expert_calls));
                let k = policy.avg_decision_tokens;
                out.random = Some(eval(&net, EvalMode::ForceRandom { k }, &mut out.expert_calls));
                if seed == 0 {
                    let dir = tempfile::tempdir().unwrap();
                    let ckpt = dir.path().join("checkpoint.safetensors");
                    glimpse::engine::save_checkpoint(&ckpt, &net, &c.hash()).unwrap();
                    let mut ec = c.clone();
                    ec.eval.mode = EvalMode::ForceFull;
                    out.force_full_cmd = Some(cmd_eval(&ec, &ckpt, &dir.path().join("eval")).unwrap());
                }
                out.slots.insert(4, policy.clone());
            } else if slots != 4 {
                out.slots.insert(slots, policy.clone());
            }
            if slots == 4 {
                out.eta.insert(eta_key(eta), policy);
            }
            if slots != 4 || eta == 0.1 {
                timed.push((slots, net));
            }
        }
    }
    for _ in 0..TIMING_PASSES {
        for (slots, net) in &timed {
            let s = eval(net, EvalMode::Policy, &mut out.expert_calls).per_trace_s;
            let best = out.trace_s.entry(*slots).or_insert(f64::INFINITY);
            *best = best.min(s);
        }
    }
    drop(timed);
    let t = Instant::now();
    let mut c = profile();
    c.stage2.skip_stage1 = true;
    let (net, _) = run_stage2(&c, None, seed).unwrap();
    out.stage2_only = Some(eval(&net, EvalMode::Policy, &mut out.expert_calls));
    eprintln!("seed {seed}: stage-2-only {:.0}s", secs(t));
    out
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_scale(l: &mut Ledger, wanted: &dyn Fn(usize) -> bool) {
    let t = Instant::now();
    let runs: Vec<SeedRuns> = (0..SEEDS).map(run_seed).collect();
    println!("desk-scale ensemble: {SEEDS} seeds, {SUITE} tasks, {:.0}s", secs(t));
    let pts = |f: &dyn Fn(&SeedRuns) -> f64| 100.0 * mean(runs.iter().map(f));
    let avg = |f: &dyn Fn(&SeedRuns) -> f64| mean(runs.iter().map(f));

    if wanted(7) {
        let calls: u64 = runs.iter().map(|r| r.expert_calls).sum();
        l.line(7, true, calls == 0, "no expert oracle calls during evaluation", format!("{calls} calls"));
    }
    if wanted(8) {
        let obs = runs[0].force_full_cmd.as_ref().unwrap().avg_observation_tokens;
        l.line(8, true, obs == 16.0, "forced-full observation tokens per trace with N=4", format!("{obs}"));
    }
    if wanted(9) {
        let both = pts(&|r| r.eta[&eta_key(0.1)].accuracy);
        let only = pts(&|r| r.stage2_only.as_ref().unwrap().accuracy);
        l.line(
            9,
            false,
            both - only >= 2.0,
            "stage-1 gain of at least 2 points",
            format!("stage1+2 {both:.1}, stage-2 only {only:.1}, gain {:+.1}", both - only),
        );
    }
    if wanted(10) {
        let policy = pts(&|r| r.eta[&eta_key(0.1)].accuracy);
        let full = pts(&|r| r.full.as_ref().unwrap().accuracy);
        let random = pts(&|r| r.random.as_ref().unwrap().accuracy);
        let obs_p = avg(&|r| r.eta[&eta_key(0.1)].avg_observation_tokens);
        let obs_f = avg(&|r| r.full.as_ref().unwrap().avg_observation_tokens);
        let obs_r = avg(&|r| r.random.as_ref().unwrap().avg_observation_tokens);
        let ok = policy >= full - 1.0 && obs_p <= 0.6 * obs_f && random <= policy - 3.0;
        l.line(
            10,
            false,
            ok,
            "policy within 1 point of forced-full at <= 60% tokens, random 3 points below",
            format!(
                "policy {policy:.1} ({obs_p:.2} obs), full {full:.1} ({obs_f:.2} obs, ratio {:.2}), random {random:.1} ({obs_r:.2} obs)",
                obs_p / obs_f
            ),
        );
    }
    if wanted(11) {
        let dec: Vec<f64> = [0.0, 0.1, 0.5].iter().map(|&e| avg(&|r| r.eta[&eta_key(e)].avg_decision_tokens)).collect();
        let acc: Vec<f64> = [0.0, 0.1, 0.5].iter().map(|&e| pts(&|r| r.eta[&eta_key(e)].accuracy)).collect();
        let usage = |task: TaskKind, e: ExpertKind| pts(&|r| r.eta[&eta_key(0.1)].usage_rate[&task][&e]);
        let depth_gap = usage(TaskKind::DepthOrder, ExpertKind::Depth) - usage(TaskKind::Count, ExpertKind::Depth);
        let seg_count = usage(TaskKind::Count, ExpertKind::Seg);
        let parts = [
            dec[0] >= dec[1] && dec[1] >= dec[2],
            depth_gap >= 20.0,
            seg_count >= 80.0,
            acc[2] < acc[1],
        ];
        l.line(
            11,
            false,
            parts.iter().all(|&p| p),
            "eta sweep: decisions non-increasing, depth/seg usage, accuracy drop at 0.5",
            format!(
                "decisions {:.2}/{:.2}/{:.2} [{}], depth gap {depth_gap:.1} [{}], seg on count {seg_count:.1} [{}], accuracy {:.1}/{:.1}/{:.1} [{}]",
                dec[0],
                dec[1],
                dec[2],
                ok_word(parts[0]),
                ok_word(parts[1]),
                ok_word(parts[2]),
                acc[0],
                acc[1],
                acc[2],
                ok_word(parts[3])
            ),
        );
    }
    if wanted(12) {
        let acc: Vec<f64> = [2usize, 4, 8].iter().map(|&n| pts(&|r| r.slots[&n].accuracy)).collect();
        let wall: Vec<f64> = [2usize, 4, 8].iter().map(|&n| avg(&|r| r.trace_s[&n])).collect();
        let gen: Vec<f64> = [2usize, 4, 8].iter().map(|&n| avg(&|r| r.slots[&n].avg_generated_tokens)).collect();
        let parts = [acc[0] < acc[1], wall[0] < wall[1] && wall[1] < wall[2]];
        l.line(
            12,
            false,
            parts[0] && parts[1],
            "slot sweep: accuracy N=2 below N=4, per-trace wall clock increasing",
            format!(
                "accuracy {:.1}/{:.1}/{:.1} [{}], per-trace ms {:.2}/{:.2}/{:.2} [{}], generated tokens {:.2}/{:.2}/{:.2}",
                acc[0],
                acc[1],
                acc[2],
                ok_word(parts[0]),
                1e3 * wall[0],
                1e3 * wall[1],
                1e3 * wall[2],
                ok_word(parts[1]),
                gen[0],
                gen[1],
                gen[2]
            ),
        );
    }
    for (i, r) in runs.iter().enumerate() {
        let p = &r.eta[&eta_key(0.1)];
        println!(
            "  seed {i}: policy {:.3} per task {:?}, full {:.3}, random {:.3}, stage-2 only {:.3}",
            p.accuracy,
            p.accuracy_per_task,
            r.full.as_ref().unwrap().accuracy,
            r.random.as_ref().unwrap().accuracy,
            r.stage2_only.as_ref().unwrap().accuracy
        );
    }
}

fn ok_word(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "miss"
    }
}

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut l = Ledger { outcomes: Vec::new() };
    let exact: [(usize, Check); 7] = [
        (1, hungarian),
        (2, gradients),
        (3, penalty),
        (4, selection),
        (5, grammar),
        (6, distribution),
        (13, overfit),
    ];
    for (n, f) in exact {
        if wanted(n) {
            f(&mut l);
        }
    }
    if (7..=12).any(wanted) {
        desk_scale(&mut l, &wanted);
    }
    let failed_exact = l.outcomes.iter().filter(|o| o.exact && !o.pass).count();
    let failed_directional = l.outcomes.iter().filter(|o| !o.exact && !o.pass).count();
    println!(
        "acceptance: {} criteria, {failed_exact} exact failures, {failed_directional} directional misses",
        l.outcomes.len()
    );
    if failed_exact > 0 {
        std::process::exit(1);
    }
}
