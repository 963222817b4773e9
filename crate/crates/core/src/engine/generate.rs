use std::collections::VecDeque;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::grammar::{parse_chain, ExpertKind, ReasoningChain, ANSWER_CLOSE, ANSWER_OPEN, SPECIAL_TOKENS, THINK_CLOSE, THINK_OPEN};
use crate::projection::ExpertPrediction;
use crate::world::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateLimits {
    /// Generated tokens, observation slots included.
    pub max_tokens: usize,
    pub max_queries: usize,
    /// 0 decodes greedily.
    pub temperature: f64,
}

impl Default for GenerateLimits {
    fn default() -> Self {
        Self {
            max_tokens: 96,
            max_queries: 8,
            temperature: 0.0,
        }
    }
}

/// Who decides which experts to query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QueryPlan {
    /// The model's own decision tokens.
    Policy,
    /// These queries, in order, whenever the model would emit a decision
    /// token or close its reasoning; the model's own choices are ignored.
    Forced(Vec<ExpertKind>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub think_s: f64,
    pub simulate_s: f64,
    pub answer_s: f64,
}

#[derive(Clone, Debug)]
pub struct GenerationTrace {
    pub chain: ReasoningChain,
    /// One synthesized prediction per query span, in chain order.
    pub predictions: Vec<ExpertPrediction>,
    pub answer: String,
    pub decision_tokens: usize,
    pub observation_tokens: usize,
    pub generated_tokens: usize,
    pub times: PhaseTimes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Think,
    AfterThink,
    Answer,
    Done,
}

struct Ids {
    think_open: u32,
    think_close: u32,
    answer_open: u32,
    answer_close: u32,
    decisions: [u32; 4],
    pads: [u32; 4],
    words: Vec<u32>,
}

fn pick(logits: &[f32], allowed: &[u32], temperature: f64, rng: &mut Option<&mut ChaCha8Rng>) -> u32 {
    match rng {
        Some(rng) if temperature > 0.0 => {
            let max = allowed.iter().map(|&i| logits[i as usize]).fold(f32::MIN, f32::max) as f64;
            let w: Vec<f64> = allowed
                .iter()
                .map(|&i| ((logits[i as usize] as f64 - max) / temperature).exp())
                .collect();
            let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
            for (k, wk) in w.iter().enumerate() {
                u -= wk;
                if u <= 0.0 {
                    return allowed[k];
                }
            }
            *allowed.last().expect("nonempty allowed set")
        }
        _ => {
            let mut best = allowed[0];
            for &i in &allowed[1..] {
                if logits[i as usize] > logits[best as usize] {
                    best = i;
                }
            }
            best
        }
    }
}

fn lap(clock: &mut Instant) -> f64 {
    let d = clock.elapsed();
    *clock = Instant::now();
    d.as_secs_f64()
}

/// Decodes a chain for `question` on `image` without consulting any expert.
///
/// Decoding is grammar-constrained: the chain opens with `<think>`, decision
/// tokens are only allowed inside it and within the query budget, and each
/// decision token is followed by exactly `N` force-fed pad tokens whose
/// hidden states are projected by the matching head.
pub fn generate(
    net: &Network,
    image: &Image,
    question: &str,
    limits: &GenerateLimits,
    plan: &QueryPlan,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<GenerationTrace> {
    let dec = &net.decoder;
    let v = &dec.vocab;
    let n = net.slots;
    let mut forced: Option<VecDeque<ExpertKind>> = match plan {
        QueryPlan::Policy => None,
        QueryPlan::Forced(p) => {
            if p.len() > limits.max_queries {
                return Err(Error::QueryBudgetExceeded {
                    needed: p.len(),
                    limit: limits.max_queries,
                });
            }
            Some(p.iter().copied().collect())
        }
    };
    let ids = Ids {
        think_open: v.id(THINK_OPEN)?,
        think_close: v.id(THINK_CLOSE)?,
        answer_open: v.id(ANSWER_OPEN)?,
        answer_close: v.id(ANSWER_CLOSE)?,
        decisions: ExpertKind::ALL.map(|e| v.id(e.decision_token()).expect("vocabulary has decision tokens")),
        pads: ExpertKind::ALL.map(|e| v.id(e.pad_token()).expect("vocabulary has pad tokens")),
        words: (0..v.len() as u32)
            .filter(|&i| !SPECIAL_TOKENS.contains(&v.token(i).expect("id in range")))
            .collect(),
    };

    let q_ids = v.encode(&question.split_whitespace().collect::<Vec<_>>())?;
    if q_ids.is_empty() {
        return Err(Error::UnknownToken("empty question".into()));
    }
    let img = dec.image_features(image)?;
    let mut state = dec.start(&img)?;
    for &id in &q_ids {
        dec.step(&mut state, id)?;
    }

    let mut out: Vec<u32> = Vec::new();
    let mut predictions = Vec::new();
    let mut times = PhaseTimes::default();
    let mut phase = Phase::Think;
    let mut queries = 0usize;
    let mut clock = Instant::now();

    // `<think>` opens every generated chain
    let mut logits = dec.step(&mut state, ids.think_open)?.0;
    out.push(ids.think_open);

    while phase != Phase::Done {
        let row: Vec<f32> = logits.to_dtype(DType::F32)?.to_vec1()?;
        let next = match phase {
            Phase::Think => {
                let pending = forced.as_ref().map_or(0, VecDeque::len);
                let closing = out.len() + 3 + pending * (n + 1) >= limits.max_tokens;
                let mut allowed = vec![ids.think_close];
                if !closing {
                    allowed.extend(&ids.words);
                    let may_query = match &forced {
                        None => queries < limits.max_queries && out.len() + n + 4 < limits.max_tokens,
                        Some(p) => !p.is_empty(),
                    };
                    if may_query {
                        allowed.extend(&ids.decisions);
                    }
                }
                let choice = pick(&row, &allowed, limits.temperature, &mut rng);
                let wants_query = ids.decisions.contains(&choice) || choice == ids.think_close;
                match forced.as_mut().and_then(|p| if wants_query { p.pop_front() } else { None }) {
                    Some(e) => ids.decisions[e.index()],
                    None => choice,
                }
            }
            Phase::AfterThink => ids.answer_open,
            Phase::Answer => {
                let mut allowed = vec![ids.answer_close];
                if out.len() + 1 < limits.max_tokens {
                    allowed.extend(&ids.words);
                }
                pick(&row, &allowed, limits.temperature, &mut rng)
            }
            Phase::Done => unreachable!(),
        };

        if let Some(k) = ids.decisions.iter().position(|&d| d == next) {
            times.think_s += lap(&mut clock);
            let expert = ExpertKind::ALL[k];
            dec.step(&mut state, next)?;
            out.push(next);
            let mut hidden = Vec::with_capacity(n);
            for _ in 0..n {
                let (l, h) = dec.step(&mut state, ids.pads[k])?;
                out.push(ids.pads[k]);
                hidden.push(h);
                logits = l;
            }
            let block = Tensor::stack(&hidden, 0)?;
            predictions.push(net.heads.get(expert).project(&block)?);
            queries += 1;
            times.simulate_s += lap(&mut clock);
            continue;
        }

        out.push(next);
        phase = match (phase, next) {
            (Phase::Think, t) if t == ids.think_close => {
                times.think_s += lap(&mut clock);
                Phase::AfterThink
            }
            (Phase::AfterThink, _) => Phase::Answer,
            (Phase::Answer, t) if t == ids.answer_close => Phase::Done,
            (p, _) => p,
        };
        if phase != Phase::Done {
            logits = dec.step(&mut state, next)?.0;
        }
    }
    times.answer_s += lap(&mut clock);

    let tokens = v.decode(&out)?;
    let chain = parse_chain(&tokens.join(" "), n)?;
    let answer = chain.answer().unwrap_or_default().to_string();
    Ok(GenerationTrace {
        answer,
        decision_tokens: queries,
        observation_tokens: queries * n,
        generated_tokens: out.len(),
        predictions,
        chain,
        times,
    })
}
