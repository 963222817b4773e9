//! Token-level grammar of interleaved reasoning chains.
//!
//! A chain is a flat, single-line token stream built from a fixed lexicon of
//! twelve special tokens plus free words:
//!
//! ```text
//! [context queries] [<think> (word | query)* </think>] [<answer> word* </answer>]
//! ```
//!
//! A query is one decision token (`<query_depth>`) followed by exactly `N`
//! pad tokens of the same expert (`<depth_pad>`). Queries before `<think>`
//! form the context region used by skill-acquisition samples; queries inside
//! the think block are the policy's own choices. Queries are never legal in
//! the answer region.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::TaskKind;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Default number of observation slots reserved after each decision token.
pub const DEFAULT_SLOT_COUNT: usize = 4;

/// All twelve special tokens, in vocabulary order.
pub const SPECIAL_TOKENS: [&str; 12] = [
    "<query_seg>",
    "<query_depth>",
    "<query_edge>",
    "<query_patch>",
    "<seg_pad>",
    "<depth_pad>",
    "<edge_pad>",
    "<patch_pad>",
    THINK_OPEN,
    THINK_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Seg,
    Depth,
    Edge,
    Patch,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::Seg,
        ExpertKind::Depth,
        ExpertKind::Edge,
        ExpertKind::Patch,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Seg => "seg",
            ExpertKind::Depth => "depth",
            ExpertKind::Edge => "edge",
            ExpertKind::Patch => "patch",
        }
    }

    pub fn decision_token(self) -> &'static str {
        SPECIAL_TOKENS[self.index()]
    }

    pub fn pad_token(self) -> &'static str {
        SPECIAL_TOKENS[4 + self.index()]
    }

    pub fn from_decision_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.decision_token() == token)
    }

    pub fn from_pad_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.pad_token() == token)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One decision token plus its reserved observation slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySpan {
    pub expert: ExpertKind,
    pub slot_count: usize,
    /// Index of the decision token within the chain's token stream.
    pub position: usize,
}

impl QuerySpan {
    /// Token indices of the observation slots.
    pub fn slots(&self) -> std::ops::Range<usize> {
        self.position + 1..self.position + 1 + self.slot_count
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Think(String),
    Query(QuerySpan),
    Answer(String),
}

/// A parsed interleaved chain.
///
/// The first `context_len` segments are context-region queries; if
/// `has_think` is set, the remaining non-answer segments sit inside one
/// `<think>` block. Values are only produced by the parser or
/// [`ChainBuilder`], so text is whitespace-normalized and span positions
/// always agree with the serialized form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReasoningChain {
    segments: Vec<Segment>,
    context_len: usize,
    has_think: bool,
    slot_count: usize,
}

impl ReasoningChain {
    pub fn builder(slot_count: usize) -> ChainBuilder {
        ChainBuilder::new(slot_count)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn has_think(&self) -> bool {
        self.has_think
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn spans(&self) -> impl Iterator<Item = &QuerySpan> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Query(q) => Some(q),
            _ => None,
        })
    }

    pub fn query_count(&self) -> usize {
        self.spans().count()
    }

    pub fn experts(&self) -> BTreeSet<ExpertKind> {
        self.spans().map(|q| q.expert).collect()
    }

    pub fn answer(&self) -> Option<&str> {
        self.segments.iter().find_map(|s| match s {
            Segment::Answer(a) => Some(a.as_str()),
            _ => None,
        })
    }

    /// The canonical token stream.
    pub fn tokens(&self) -> Vec<&str> {
        fn push<'a>(out: &mut Vec<&'a str>, seg: &'a Segment) {
            match seg {
                Segment::Think(text) => out.extend(text.split(' ')),
                Segment::Query(q) => {
                    out.push(q.expert.decision_token());
                    out.extend(std::iter::repeat_n(q.expert.pad_token(), q.slot_count));
                }
                Segment::Answer(text) => {
                    out.push(ANSWER_OPEN);
                    if !text.is_empty() {
                        out.extend(text.split(' '));
                    }
                    out.push(ANSWER_CLOSE);
                }
            }
        }
        let (body, answer) = match self.segments.last() {
            Some(Segment::Answer(_)) => self.segments.split_at(self.segments.len() - 1),
            _ => (&self.segments[..], &[][..]),
        };
        let mut out = Vec::new();
        for seg in &body[..self.context_len] {
            push(&mut out, seg);
        }
        if self.has_think {
            out.push(THINK_OPEN);
            for seg in &body[self.context_len..] {
                push(&mut out, seg);
            }
            out.push(THINK_CLOSE);
        }
        for seg in answer {
            push(&mut out, seg);
        }
        out
    }

    /// Canonical single-line text: tokens joined by single spaces.
    pub fn serialize(&self) -> String {
        self.tokens().join(" ")
    }
}

impl fmt::Display for ReasoningChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Incremental constructor for well-formed chains.
#[derive(Clone, Debug)]
pub struct ChainBuilder {
    slot_count: usize,
    context: Vec<ExpertKind>,
    think: Option<Vec<ThinkItem>>,
    answer: Option<String>,
}

#[derive(Clone, Debug)]
enum ThinkItem {
    Text(String),
    Query(ExpertKind),
}

impl ChainBuilder {
    pub fn new(slot_count: usize) -> Self {
        Self {
            slot_count,
            context: Vec::new(),
            think: None,
            answer: None,
        }
    }

    pub fn context_query(mut self, expert: ExpertKind) -> Self {
        self.context.push(expert);
        self
    }

    /// Opens an (initially empty) think block.
    pub fn think(mut self) -> Self {
        self.think.get_or_insert_with(Vec::new);
        self
    }

    pub fn think_text(mut self, text: &str) -> Self {
        self.think
            .get_or_insert_with(Vec::new)
            .push(ThinkItem::Text(text.to_string()));
        self
    }

    pub fn think_query(mut self, expert: ExpertKind) -> Self {
        self.think
            .get_or_insert_with(Vec::new)
            .push(ThinkItem::Query(expert));
        self
    }

    pub fn answer(mut self, text: &str) -> Self {
        self.answer = Some(text.to_string());
        self
    }

    pub fn build(self) -> Result<ReasoningChain> {
        if self.slot_count == 0 {
            return Err(malformed(0, "slot count must be positive"));
        }
        let n = self.slot_count;
        let mut segments = Vec::new();
        let mut pos = 0;
        for expert in &self.context {
            segments.push(Segment::Query(QuerySpan {
                expert: *expert,
                slot_count: n,
                position: pos,
            }));
            pos += 1 + n;
        }
        let context_len = segments.len();
        let has_think = self.think.is_some();
        if let Some(items) = self.think {
            pos += 1; // <think>
            let mut pending = String::new();
            for item in items {
                match item {
                    ThinkItem::Text(t) => {
                        let words = normalize_words(&t, pos)?;
                        if !words.is_empty() {
                            if !pending.is_empty() {
                                pending.push(' ');
                            }
                            pending.push_str(&words);
                        }
                    }
                    ThinkItem::Query(expert) => {
                        if !pending.is_empty() {
                            pos += pending.split(' ').count();
                            segments.push(Segment::Think(std::mem::take(&mut pending)));
                        }
                        segments.push(Segment::Query(QuerySpan {
                            expert,
                            slot_count: n,
                            position: pos,
                        }));
                        pos += 1 + n;
                    }
                }
            }
            if !pending.is_empty() {
                segments.push(Segment::Think(pending));
            }
        }
        if let Some(a) = self.answer {
            let words = normalize_words(&a, pos)?;
            segments.push(Segment::Answer(words));
        }
        Ok(ReasoningChain {
            segments,
            context_len,
            has_think,
            slot_count: n,
        })
    }
}

fn malformed(position: usize, reason: impl Into<String>) -> Error {
    Error::MalformedChain {
        position,
        reason: reason.into(),
    }
}

fn looks_special(word: &str) -> bool {
    word.starts_with('<') || word.ends_with('>')
}

fn normalize_words(text: &str, position: usize) -> Result<String> {
    let mut out: Vec<&str> = Vec::new();
    for w in text.split_whitespace() {
        if looks_special(w) {
            return Err(malformed(position, format!("special token {w:?} inside text")));
        }
        out.push(w);
    }
    Ok(out.join(" "))
}

/// Splits raw text into lexemes; tags glued to neighbours (`</think><answer>`)
/// are separated.
pub fn lex(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if rest.starts_with('<') {
                match rest.find('>') {
                    Some(end) => {
                        out.push(&rest[..=end]);
                        rest = &rest[end + 1..];
                    }
                    None => {
                        out.push(rest);
                        rest = "";
                    }
                }
            } else {
                let end = rest.find('<').unwrap_or(rest.len());
                out.push(&rest[..end]);
                rest = &rest[end..];
            }
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Region {
    Context,
    Think,
    AfterThink,
    Answer,
    Done,
}

/// Parses a chain in the canonical lexicon with `slot_count` pads per query.
pub fn parse_chain(text: &str, slot_count: usize) -> Result<ReasoningChain> {
    if slot_count == 0 {
        return Err(malformed(0, "slot count must be positive"));
    }
    let toks = lex(text);
    let mut builder = ChainBuilder::new(slot_count);
    let mut region = Region::Context;
    let mut words: Vec<&str> = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let tok = toks[i];
        if looks_special(tok) && !SPECIAL_TOKENS.contains(&tok) {
            return Err(malformed(i, format!("unknown token {tok:?}")));
        }
        if let Some(expert) = ExpertKind::from_decision_token(tok) {
            match region {
                Region::Context | Region::Think => {}
                Region::Answer => return Err(malformed(i, "query inside answer region")),
                _ => return Err(malformed(i, "query outside think/context region")),
            }
            for k in 1..=slot_count {
                match toks.get(i + k) {
                    Some(&p) if p == expert.pad_token() => {}
                    Some(&p) => {
                        return Err(malformed(
                            i + k,
                            format!("expected {} after {tok}, found {p:?}", expert.pad_token()),
                        ))
                    }
                    None => return Err(malformed(i + k, "chain ends inside observation slots")),
                }
            }
            if let Some(&next) = toks.get(i + slot_count + 1) {
                if ExpertKind::from_pad_token(next).is_some() {
                    return Err(malformed(
                        i + slot_count + 1,
                        format!("more than {slot_count} pad tokens after {tok}"),
                    ));
                }
            }
            if region == Region::Context {
                builder = builder.context_query(expert);
            } else {
                if !words.is_empty() {
                    builder = builder.think_text(&words.join(" "));
                    words.clear();
                }
                builder = builder.think_query(expert);
            }
            i += slot_count + 1;
            continue;
        }
        if ExpertKind::from_pad_token(tok).is_some() {
            return Err(malformed(i, format!("pad token {tok} without a decision token")));
        }
        match (region, tok) {
            (Region::Context, THINK_OPEN) => {
                builder = builder.think();
                region = Region::Think;
            }
            (Region::Context | Region::AfterThink, ANSWER_OPEN) => region = Region::Answer,
            (Region::Think, THINK_CLOSE) => {
                if !words.is_empty() {
                    builder = builder.think_text(&words.join(" "));
                    words.clear();
                }
                region = Region::AfterThink;
            }
            (Region::Think, ANSWER_OPEN) => return Err(malformed(i, "unclosed <think>")),
            (Region::Answer, ANSWER_CLOSE) => {
                builder = builder.answer(&words.join(" "));
                words.clear();
                region = Region::Done;
            }
            (Region::Think | Region::Answer, w) if !looks_special(w) => words.push(w),
            (Region::Done, _) => return Err(malformed(i, "tokens after the answer")),
            (Region::Context | Region::AfterThink, w) if !looks_special(w) => {
                return Err(malformed(i, format!("text {w:?} outside think/answer region")))
            }
            (_, t) => return Err(malformed(i, format!("unexpected {t}"))),
        }
        i += 1;
    }
    match region {
        Region::Think => Err(malformed(toks.len(), "unclosed <think>")),
        Region::Answer => Err(malformed(toks.len(), "unclosed <answer>")),
        _ => builder.build(),
    }
}

/// Which experts a task needs, and which extras a chain may add.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConstraintRule {
    pub task_kind: TaskKind,
    pub required_experts: BTreeSet<ExpertKind>,
    pub allowed_extras: BTreeSet<ExpertKind>,
}

impl TaskConstraintRule {
    /// Same requirements, with every other expert allowed as an extra.
    pub fn permissive(&self) -> Self {
        Self {
            task_kind: self.task_kind,
            required_experts: self.required_experts.clone(),
            allowed_extras: ExpertKind::ALL
                .into_iter()
                .filter(|e| !self.required_experts.contains(e))
                .collect(),
        }
    }

    /// Required experts only; no extras allowed.
    pub fn strict(&self) -> Self {
        Self {
            task_kind: self.task_kind,
            required_experts: self.required_experts.clone(),
            allowed_extras: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub missing: BTreeSet<ExpertKind>,
    pub illegal: BTreeSet<ExpertKind>,
}

pub fn validate_chain(chain: &ReasoningChain, rule: &TaskConstraintRule) -> ValidationReport {
    let used = chain.experts();
    let missing: BTreeSet<_> = rule.required_experts.difference(&used).copied().collect();
    let illegal: BTreeSet<_> = used
        .iter()
        .filter(|e| !rule.required_experts.contains(e) && !rule.allowed_extras.contains(e))
        .copied()
        .collect();
    ValidationReport {
        valid: missing.is_empty() && illegal.is_empty(),
        missing,
        illegal,
    }
}

/// Role of every position in a chain's token stream.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceLayout {
    pub text_positions: Vec<usize>,
    pub decision_positions: Vec<usize>,
    pub observation_positions: BTreeMap<usize, Vec<usize>>,
    pub answer_positions: Vec<usize>,
    pub len: usize,
}

impl SequenceLayout {
    /// The same layout with every index moved by `offset`.
    pub fn shifted(&self, offset: usize) -> Self {
        let sh = |v: &Vec<usize>| v.iter().map(|p| p + offset).collect::<Vec<_>>();
        Self {
            text_positions: sh(&self.text_positions),
            decision_positions: sh(&self.decision_positions),
            observation_positions: self
                .observation_positions
                .iter()
                .map(|(k, v)| (k + offset, sh(v)))
                .collect(),
            answer_positions: sh(&self.answer_positions),
            len: self.len + offset,
        }
    }

    pub fn is_observation(&self, pos: usize) -> bool {
        self.observation_positions.values().any(|v| v.contains(&pos))
    }
}

/// Computes the layout of `chain` and checks it against `tokens`, which must
/// be the tokenization of `chain.serialize()`.
pub fn layout<S: AsRef<str>>(chain: &ReasoningChain, tokens: &[S]) -> Result<SequenceLayout> {
    let expected = chain.tokens();
    if expected.len() != tokens.len() {
        return Err(Error::LayoutMismatch(format!(
            "chain has {} tokens, sequence has {}",
            expected.len(),
            tokens.len()
        )));
    }
    if let Some(i) = (0..tokens.len()).find(|&i| expected[i] != tokens[i].as_ref()) {
        return Err(Error::LayoutMismatch(format!(
            "token {i}: chain has {:?}, sequence has {:?}",
            expected[i],
            tokens[i].as_ref()
        )));
    }
    let mut out = SequenceLayout {
        len: tokens.len(),
        ..Default::default()
    };
    let mut claimed = vec![false; tokens.len()];
    for span in chain.spans() {
        out.decision_positions.push(span.position);
        claimed[span.position] = true;
        let slots: Vec<usize> = span.slots().collect();
        for &s in &slots {
            claimed[s] = true;
        }
        out.observation_positions.insert(span.position, slots);
    }
    let mut in_answer = false;
    for (i, tok) in expected.iter().enumerate() {
        if *tok == ANSWER_OPEN {
            in_answer = true;
        }
        if claimed[i] {
            continue;
        }
        if in_answer {
            out.answer_positions.push(i);
        } else {
            out.text_positions.push(i);
        }
        if *tok == ANSWER_CLOSE {
            in_answer = false;
        }
    }
    Ok(out)
}

/// Query multiset of a chain as per-expert counts.
pub fn query_signature(chain: &ReasoningChain) -> BTreeMap<ExpertKind, usize> {
    let mut out = BTreeMap::new();
    for span in chain.spans() {
        *out.entry(span.expert).or_insert(0) += 1;
    }
    out
}
