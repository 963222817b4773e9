//! Text side of a training or inference sequence.

use candle_core::{Tensor, D};

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::grammar::{layout, ReasoningChain, SequenceLayout};

/// Which tokens receive cross-entropy supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeRegion {
    /// Question and answer; context queries are input only.
    QuestionAnswer,
    /// Every chain token except observation slots.
    Chain,
}

/// Context queries, then the question, then the rest of the chain.
#[derive(Clone, Debug)]
pub struct TextSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    /// Roles in sequence coordinates; question words count as text.
    pub layout: SequenceLayout,
    pub question_positions: Vec<usize>,
    /// Supervised positions, ascending, never 0 or an observation slot.
    pub ce_positions: Vec<usize>,
}

pub fn assemble(vocab: &Vocab, chain: &ReasoningChain, question: &str, region: CeRegion) -> Result<TextSequence> {
    let chain_tokens = chain.tokens();
    let chain_layout = layout(chain, &chain_tokens)?;
    let split: usize = chain
        .spans()
        .take(chain.context_len())
        .map(|s| 1 + s.slot_count)
        .sum();
    let q: Vec<&str> = question.split_whitespace().collect();
    let shift = |p: usize| if p < split { p } else { p + q.len() };
    let map = |v: &[usize]| v.iter().map(|&p| shift(p)).collect::<Vec<_>>();

    let question_positions: Vec<usize> = (split..split + q.len()).collect();
    let mut text_positions = map(&chain_layout.text_positions);
    text_positions.extend(&question_positions);
    text_positions.sort_unstable();
    let seq_layout = SequenceLayout {
        text_positions,
        decision_positions: map(&chain_layout.decision_positions),
        observation_positions: chain_layout
            .observation_positions
            .iter()
            .map(|(k, v)| (shift(*k), map(v)))
            .collect(),
        answer_positions: map(&chain_layout.answer_positions),
        len: chain_layout.len + q.len(),
    };

    let mut tokens: Vec<String> = Vec::with_capacity(seq_layout.len);
    tokens.extend(chain_tokens[..split].iter().map(|s| s.to_string()));
    tokens.extend(q.iter().map(|s| s.to_string()));
    tokens.extend(chain_tokens[split..].iter().map(|s| s.to_string()));
    let ids = vocab.encode(&tokens)?;

    let mut ce_positions: Vec<usize> = match region {
        CeRegion::QuestionAnswer => question_positions
            .iter()
            .chain(&seq_layout.answer_positions)
            .copied()
            .collect(),
        CeRegion::Chain => (split + q.len()..seq_layout.len)
            .filter(|&p| !seq_layout.is_observation(p))
            .collect(),
    };
    ce_positions.retain(|&p| p > 0);
    ce_positions.sort_unstable();
    Ok(TextSequence {
        tokens,
        ids,
        layout: seq_layout,
        question_positions,
        ce_positions,
    })
}

/// Mean next-token cross-entropy over `positions`, reading the prediction
/// for position `t` from logits row `t - 1`.
pub fn ce_loss(logits: &Tensor, targets: &[u32], positions: &[usize]) -> Result<Tensor> {
    if positions.is_empty() {
        return Err(Error::ShapeMismatch("no supervised positions".into()));
    }
    if positions.iter().any(|&p| p == 0 || p >= targets.len()) {
        return Err(Error::ShapeMismatch("supervised position out of range".into()));
    }
    let dev = logits.device();
    let rows = Tensor::new(positions.iter().map(|&p| (p - 1) as u32).collect::<Vec<_>>(), dev)?;
    let ids = Tensor::new(positions.iter().map(|&p| targets[p]).collect::<Vec<_>>(), dev)?;
    let x = logits.index_select(&rows, 0)?;
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let picked = shifted.gather(&ids.unsqueeze(1)?, 1)?;
    Ok((lse - picked)?.mean_all()?)
}
