//! Token-level training views.
//!
//! A view lays out one training sequence plus its next-token supervision:
//! `pred_targets[t]` is the token position `t` must predict and
//! `pred_mask[t]` says whether that prediction is scored. Both align with
//! the hidden-state rows a forward pass produces, so the last row is always
//! unscored. Every view that ends in an answer routes it through the fixed
//! prompt `the answer is :`; the hidden state over the trailing `:` is the
//! distillation site.

use crate::error::Result;
use crate::tokenizer::{Tokenizer, END, EOT, PAD};

pub const PROMPT_TEXT: &str = "the answer is :";

/// Which positions contribute to the cross-entropy loss. Reasoning
/// supervision includes the prompt, so explicit methods learn to emit the
/// boundary that terminates free reasoning at inference. Answer-only
/// methods have the prompt force-fed instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Everything after the question: reasoning, prompt, answer, end.
    Reasoning,
    /// Only answer digits and the end marker.
    AnswerOnly,
}

/// One explicit (fully tokenized) sequence with supervision.
#[derive(Clone, Debug)]
pub struct SeqView {
    pub tokens: Vec<u32>,
    pub pred_targets: Vec<u32>,
    pub pred_mask: Vec<bool>,
    /// Index of the trailing `:` of the answer prompt.
    pub distill_index: usize,
    /// Index of the first answer token.
    pub answer_start: usize,
}

pub fn prompt_ids(tok: &Tokenizer) -> Vec<u32> {
    tok.tokenize(PROMPT_TEXT).expect("prompt words are in the vocabulary")
}

pub fn answer_ids(tok: &Tokenizer, answer: i64) -> Vec<u32> {
    tok.tokenize_number(answer)
}

/// Reasoning steps joined for in-sequence rendering.
pub fn render_steps(steps: &[String]) -> String {
    steps.join(" ; ")
}

fn supervision(tokens: &[u32], scored: impl Fn(usize) -> bool) -> (Vec<u32>, Vec<bool>) {
    let t_len = tokens.len();
    let mut targets = vec![PAD; t_len];
    let mut mask = vec![false; t_len];
    for t in 0..t_len.saturating_sub(1) {
        targets[t] = tokens[t + 1];
        mask[t] = scored(t + 1);
    }
    (targets, mask)
}

/// Question, optional reasoning text, prompt, answer, end marker.
pub fn build_explicit_view(
    tok: &Tokenizer,
    question: &str,
    reasoning: Option<&str>,
    answer: i64,
    policy: MaskPolicy,
) -> Result<SeqView> {
    let mut tokens = tok.tokenize(question)?;
    let reasoning_start = tokens.len();
    if let Some(text) = reasoning {
        if !text.is_empty() {
            tokens.extend(tok.tokenize(text)?);
        }
    }
    tokens.extend(prompt_ids(tok));
    let distill_index = tokens.len() - 1;
    let answer_start = tokens.len();
    tokens.extend(answer_ids(tok, answer));
    tokens.push(END);
    let (pred_targets, pred_mask) = supervision(&tokens, |t| match policy {
        MaskPolicy::Reasoning => t >= reasoning_start,
        MaskPolicy::AnswerOnly => t >= answer_start,
    });
    Ok(SeqView { tokens, pred_targets, pred_mask, distill_index, answer_start })
}

/// Token scaffolding around a latent (injected-vector) segment. The head
/// ends with `<bot>`; latent vectors go between head and tail; the tail
/// opens with `<eot>` and carries the prompt, answer, and end marker.
#[derive(Clone, Debug)]
pub struct LatentLayout {
    pub head: Vec<u32>,
    pub tail: Vec<u32>,
    pub tail_pred_targets: Vec<u32>,
    pub tail_pred_mask: Vec<bool>,
    /// Index of the trailing `:` within `tail`.
    pub tail_distill_index: usize,
}

pub fn build_latent_layout(tok: &Tokenizer, question: &str, answer: i64) -> Result<LatentLayout> {
    let mut head = tok.tokenize(question)?;
    head.push(crate::tokenizer::BOT);
    let mut tail = vec![EOT];
    tail.extend(prompt_ids(tok));
    let tail_distill_index = tail.len() - 1;
    let answer_start = tail.len();
    tail.extend(answer_ids(tok, answer));
    tail.push(END);
    let (tail_pred_targets, tail_pred_mask) = supervision(&tail, |t| t >= answer_start);
    Ok(LatentLayout { head, tail, tail_pred_targets, tail_pred_mask, tail_distill_index })
}
