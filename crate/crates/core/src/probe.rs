//! Interpretability probes over the continuous thoughts: logit-lens
//! decoding, attention attribution, intermediate-result match rates, and
//! the reasoning-shift diagnostic at the distill token.
//!
//! Everything here is read-only over weights and traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::eval::{generate_continuous, parse_answer_tokens, TraceSnapshot};
use crate::model::{ChunkInput, Model};
use crate::problems::{parse_step, Problem};
use crate::tape::{Float, Tape};
use crate::tokenizer::Tokenizer;
use crate::views::{build_explicit_view, render_steps, MaskPolicy};

/// One vocabulary entry with its inner-product score.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenScore {
    pub id: u32,
    pub token: String,
    pub score: f64,
}

/// One context position with its averaged attention weight.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttendedPos {
    pub position: usize,
    pub token: String,
    pub weight: f64,
}

/// Project a latent vector back to vocabulary space through the model's
/// output path (final norm, then inner product with the output embedding
/// rows). Top-k by score, ties broken by ascending token id. The final norm
/// makes the ranking invariant under positive scaling of the latent.
pub fn decode_thought<F: Float>(model: &Model<F>, tok: &Tokenizer, latent: &[f64], k: usize) -> Vec<TokenScore> {
    let h = model.apply_final_norm_row(latent);
    let emb = model.output_embedding();
    let mut scored: Vec<(u32, f64)> = (0..emb.nrows())
        .map(|r| {
            let s = emb.row(r).iter().zip(&h).map(|(&e, &x)| e.to_f64() * x).sum::<f64>();
            (r as u32, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .map(|(id, score)| TokenScore { id, token: tok.token(id).to_string(), score })
        .collect()
}

/// Render the token occupying `position` in a latent-phase context:
/// question tokens, then `<bot>`, then the injected thoughts z1..zi.
fn context_token(tok: &Tokenizer, question_ids: &[u32], position: usize) -> String {
    if position < question_ids.len() {
        tok.token(question_ids[position]).to_string()
    } else if position == question_ids.len() {
        tok.token(crate::tokenizer::BOT).to_string()
    } else {
        format!("z{}", position - question_ids.len())
    }
}

/// Weights at `step_index`'s query averaged over every head of every layer
/// (or per layer when `per_layer` splits them). Position 0 is excluded and
/// ties break by ascending position.
fn rank_positions(avg: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> =
        avg.iter().enumerate().skip(1).map(|(p, &w)| (p, w)).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// Average attention from one latent step over all heads of all layers.
pub fn top_attended(trace: &TraceSnapshot, step_index: usize, k: usize) -> Vec<(usize, f64)> {
    let per_layer = &trace.latent_attention[step_index];
    let ctx = per_layer[0][0].len();
    let mut avg = vec![0.0; ctx];
    let mut count = 0usize;
    for layer in per_layer {
        for head in layer {
            for (i, &w) in head.iter().enumerate() {
                avg[i] += w;
            }
            count += 1;
        }
    }
    for w in &mut avg {
        *w /= count as f64;
    }
    rank_positions(&avg, k)
}

/// Per-layer variant: heads averaged within each layer only.
pub fn top_attended_per_layer(
    trace: &TraceSnapshot,
    step_index: usize,
    k: usize,
) -> Vec<Vec<(usize, f64)>> {
    trace.latent_attention[step_index]
        .iter()
        .map(|layer| {
            let ctx = layer[0].len();
            let mut avg = vec![0.0; ctx];
            for head in layer {
                for (i, &w) in head.iter().enumerate() {
                    avg[i] += w;
                }
            }
            for w in &mut avg {
                *w /= layer.len() as f64;
            }
            rank_positions(&avg, k)
        })
        .collect()
}

/// Match counts for problems whose reference reasoning has `steps` steps.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MatchBucket {
    pub steps: usize,
    pub matched: usize,
    pub total: usize,
}

impl MatchBucket {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// Probe protocol knobs; mirrors the generation settings of the checkpoint.
#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub num_latent: usize,
    pub use_projection: bool,
    pub top_k: usize,
    pub max_answer_tokens: usize,
    /// Restrict to correctly answered problems (the published protocol).
    /// Disabled when measuring the untrained chance level.
    pub only_correct: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            num_latent: 6,
            use_projection: true,
            top_k: 5,
            max_answer_tokens: 8,
            only_correct: true,
        }
    }
}

/// A reference intermediate result matches when every digit token of its
/// rendering appears in the top-k decodings of a single latent step.
fn result_matches<F: Float>(
    model: &Model<F>,
    tok: &Tokenizer,
    trace: &TraceSnapshot,
    value: i64,
    k: usize,
) -> bool {
    let digits = tok.tokenize_number(value);
    trace.latent_inputs.iter().any(|latent| {
        let top: Vec<u32> = decode_thought(model, tok, latent, k).iter().map(|t| t.id).collect();
        digits.iter().all(|d| top.contains(d))
    })
}

/// Fraction of reference intermediate results recoverable from the latent
/// decodings, bucketed by the problem's total step count. Counted over
/// correctly answered problems unless the options disable the filter.
pub fn intermediate_match_rate<F: Float>(
    model: &Model<F>,
    tok: &Tokenizer,
    problems: &[Problem],
    opts: &ProbeOptions,
) -> Result<Vec<MatchBucket>> {
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for p in problems {
        let q_ids = tok.tokenize(&p.question)?;
        let (out, trace) = generate_continuous(
            model,
            tok,
            &q_ids,
            opts.num_latent,
            opts.max_answer_tokens,
            opts.use_projection,
        )?;
        if opts.only_correct && parse_answer_tokens(tok, &out.answer_tokens) != Some(p.answer) {
            continue;
        }
        let entry = buckets.entry(p.cot.len()).or_insert((0, 0));
        for step in &p.cot {
            let (_, _, _, result) =
                parse_step(step).ok_or_else(|| CoreError::InvalidConfig(format!("bad step {step:?}")))?;
            entry.1 += 1;
            if result_matches(model, tok, &trace, result, opts.top_k) {
                entry.0 += 1;
            }
        }
    }
    Ok(buckets
        .into_iter()
        .map(|(steps, (matched, total))| MatchBucket { steps, matched, total })
        .collect())
}

/// Distill-token activation difference between the explicit context and the
/// reasoning-free context, per layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerShift {
    pub layer: usize,
    /// L2 norm of (with-reasoning minus without) at the distill token.
    pub shift_norm: f64,
    /// Cosine similarity between the two activations.
    pub cosine: f64,
}

fn distill_activations<F: Float>(
    model: &Model<F>,
    tok: &Tokenizer,
    question: &str,
    reasoning: Option<&str>,
    answer: i64,
) -> Result<Vec<Vec<f64>>> {
    let view = build_explicit_view(tok, question, reasoning, answer, MaskPolicy::Reasoning)?;
    let mut tape: Tape<F> = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let mut cache = model.new_cache();
    let out = model.forward_chunk(&mut tape, &b, &mut cache, &ChunkInput::Tokens(view.tokens.clone()))?;
    Ok(out
        .stack
        .layers
        .iter()
        .map(|&l| tape.value(l).row(view.distill_index).iter().map(|&x| x.to_f64()).collect())
        .collect())
}

/// Run the explicit layout with and without its reasoning span and compare
/// the per-layer activations at the distill token. Diagnostic only: an empty
/// reasoning span shifts nothing, a trained model shows nonzero shifts.
pub fn cot_shift_report<F: Float>(
    model: &Model<F>,
    tok: &Tokenizer,
    problem: &Problem,
) -> Result<Vec<LayerShift>> {
    let reasoning = render_steps(&problem.cot);
    let reasoning = if reasoning.is_empty() { None } else { Some(reasoning.as_str()) };
    let with = distill_activations(model, tok, &problem.question, reasoning, problem.answer)?;
    let without = distill_activations(model, tok, &problem.question, None, problem.answer)?;
    Ok(with
        .iter()
        .zip(&without)
        .enumerate()
        .map(|(layer, (a, b))| {
            let shift_norm =
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            LayerShift { layer: layer + 1, shift_norm, cosine: dot / (na * nb) }
        })
        .collect())
}

/// Decodings and attention attribution for one latent step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThoughtProbe {
    pub step: usize,
    pub decoded: Vec<TokenScore>,
    pub attended: Vec<AttendedPos>,
}

/// Full probe output for one problem plus corpus-level match rates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub question: String,
    pub answer: i64,
    pub predicted: Option<i64>,
    pub thoughts: Vec<ThoughtProbe>,
    pub match_rates: Vec<MatchBucket>,
    pub shift: Vec<LayerShift>,
}

/// Probe one problem end to end: decode every thought, attribute its
/// attention (top 10 positions), and attach the shift diagnostic. Match
/// rates over a wider corpus are computed by the caller and passed in.
pub fn probe_problem<F: Float>(
    model: &Model<F>,
    tok: &Tokenizer,
    problem: &Problem,
    opts: &ProbeOptions,
    match_rates: Vec<MatchBucket>,
) -> Result<ProbeReport> {
    let q_ids = tok.tokenize(&problem.question)?;
    let (out, trace) = generate_continuous(
        model,
        tok,
        &q_ids,
        opts.num_latent,
        opts.max_answer_tokens,
        opts.use_projection,
    )?;
    let thoughts = (0..trace.latent_inputs.len())
        .map(|i| ThoughtProbe {
            step: i + 1,
            decoded: decode_thought(model, tok, &trace.latent_inputs[i], opts.top_k),
            attended: top_attended(&trace, i, 10)
                .into_iter()
                .map(|(position, weight)| AttendedPos {
                    position,
                    token: context_token(tok, &q_ids, position),
                    weight,
                })
                .collect(),
        })
        .collect();
    Ok(ProbeReport {
        question: problem.question.clone(),
        answer: problem.answer,
        predicted: parse_answer_tokens(tok, &out.answer_tokens),
        thoughts,
        match_rates,
        shift: cot_shift_report(model, tok, problem)?,
    })
}

impl ProbeReport {
    /// Human-readable rendering: one row per thought, then rates and shift.
    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        md.push_str(&format!("# Probe: {}\n\n", self.question));
        md.push_str(&format!(
            "answer {} / predicted {}\n\n",
            self.answer,
            self.predicted.map_or("?".to_string(), |v| v.to_string())
        ));
        md.push_str("| thought | decoded (score) | attends to (weight) |\n");
        md.push_str("|---|---|---|\n");
        for t in &self.thoughts {
            let dec: Vec<String> =
                t.decoded.iter().map(|d| format!("`{}` ({:.2})", d.token, d.score)).collect();
            let att: Vec<String> = t
                .attended
                .iter()
                .map(|a| format!("{}@{} ({:.3})", a.token, a.position, a.weight))
                .collect();
            md.push_str(&format!("| z{} | {} | {} |\n", t.step, dec.join(" "), att.join(" ")));
        }
        md.push_str("\n## Intermediate-result match rate\n\n");
        if self.match_rates.is_empty() {
            md.push_str("no qualifying problems\n");
        }
        for b in &self.match_rates {
            md.push_str(&format!(
                "- {} step(s): {}/{} = {:.1}%\n",
                b.steps,
                b.matched,
                b.total,
                100.0 * b.rate()
            ));
        }
        md.push_str("\n## Reasoning shift at the distill token\n\n");
        for s in &self.shift {
            md.push_str(&format!(
                "- layer {}: |shift| = {:.4}, cosine = {:.4}\n",
                s.layer, s.shift_norm, s.cosine
            ));
        }
        md
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::problems::{generate_corpus, GenConfig, ValueRange};
    use crate::tokenizer::{BOT, EOT, VOCAB_SIZE};

    fn tiny_model(seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            vocab_size: VOCAB_SIZE,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 128,
            seed,
            tied_head: false,
        };
        Model::new(cfg, &[BOT, EOT]).unwrap()
    }

    #[test]
    fn decoding_full_vocabulary_is_a_permutation() {
        let m = tiny_model(31);
        let t = Tokenizer::new();
        let latent: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let all = decode_thought(&m, &t, &latent, VOCAB_SIZE);
        let mut ids: Vec<u32> = all.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..VOCAB_SIZE as u32).collect::<Vec<_>>());
        for w in all.windows(2) {
            assert!(w[0].score >= w[1].score, "scores must be descending");
        }
    }

    #[test]
    fn decoding_rank_invariant_under_positive_scaling() {
        let m = tiny_model(32);
        let t = Tokenizer::new();
        let latent: Vec<f64> = (0..32).map(|i| (i as f64 * 0.61).cos()).collect();
        let scaled: Vec<f64> = latent.iter().map(|x| x * 37.5).collect();
        let a: Vec<u32> = decode_thought(&m, &t, &latent, 10).iter().map(|s| s.id).collect();
        let b: Vec<u32> = decode_thought(&m, &t, &scaled, 10).iter().map(|s| s.id).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_row_decodes_to_its_own_token() {
        let m = tiny_model(33);
        let t = Tokenizer::new();
        let emb = m.output_embedding();
        for id in [5u32, 40, 99] {
            let latent: Vec<f64> = emb.row(id as usize).iter().map(|&x| x).collect();
            let top = decode_thought(&m, &t, &latent, 1);
            assert_eq!(top[0].id, id, "row {id} should decode to itself");
        }
    }

    #[test]
    fn uniform_attention_ranks_positions_in_index_order() {
        let ctx = 9;
        let trace = TraceSnapshot {
            latent_inputs: vec![vec![0.0; 4]],
            latent_attention: vec![vec![vec![vec![1.0 / ctx as f64; ctx]; 2]; 2]],
            cache_len_after_latent: ctx + 1,
        };
        let ranked = top_attended(&trace, 0, 5);
        let positions: Vec<usize> = ranked.iter().map(|&(p, _)| p).collect();
        assert_eq!(positions, vec![1, 2, 3, 4, 5], "ties break ascending, 0 excluded");
        assert_eq!(top_attended(&trace, 0, 100).len(), ctx - 1, "capped at available - 1");
        let per_layer = top_attended_per_layer(&trace, 0, 3);
        assert_eq!(per_layer.len(), 2);
        assert_eq!(per_layer[0].iter().map(|&(p, _)| p).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn untrained_match_rate_is_chance_level() {
        let m = tiny_model(34);
        let t = Tokenizer::new();
        let problems = generate_corpus(&GenConfig {
            seed: 77,
            size: 40,
            max_steps: 1,
            range: ValueRange::TRAIN,
        })
        .unwrap();
        let opts = ProbeOptions { only_correct: false, ..ProbeOptions::default() };
        let buckets = intermediate_match_rate(&m, &t, &problems, &opts).unwrap();
        assert_eq!(buckets.len(), 1);
        assert_eq!(buckets[0].total, 40);
        assert!(
            buckets[0].rate() < 0.05,
            "untrained model should sit at chance: {:?}",
            buckets[0]
        );
    }

    #[test]
    fn empty_reasoning_shifts_nothing() {
        let m = tiny_model(35);
        let t = Tokenizer::new();
        let p = Problem {
            question: "what is 12 + 34 ?".to_string(),
            cot: vec![],
            answer: 46,
        };
        for s in cot_shift_report(&m, &t, &p).unwrap() {
            assert_eq!(s.shift_norm, 0.0, "identical contexts, layer {}", s.layer);
            assert!((s.cosine - 1.0).abs() < 1e-12);
        }
        let with_cot = Problem {
            question: "what is 12 + 34 ?".to_string(),
            cot: vec!["12 + 34 = 46".to_string()],
            answer: 46,
        };
        let shifts = cot_shift_report(&m, &t, &with_cot).unwrap();
        assert!(shifts.iter().any(|s| s.shift_norm > 0.0), "context change must register");
    }

    #[test]
    fn probe_report_renders_every_thought() {
        let m = tiny_model(36);
        let t = Tokenizer::new();
        let problems = generate_corpus(&GenConfig {
            seed: 78,
            size: 3,
            max_steps: 2,
            range: ValueRange::TRAIN,
        })
        .unwrap();
        let opts = ProbeOptions { num_latent: 4, only_correct: false, ..ProbeOptions::default() };
        let rates = intermediate_match_rate(&m, &t, &problems, &opts).unwrap();
        let report = probe_problem(&m, &t, &problems[0], &opts, rates).unwrap();
        assert_eq!(report.thoughts.len(), 4);
        for th in &report.thoughts {
            assert_eq!(th.decoded.len(), 5);
            assert!(th.attended.iter().all(|a| a.position > 0));
        }
        let md = report.to_markdown();
        assert!(md.contains("| z1 |") && md.contains("| z4 |"));
        let json: ProbeReport =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(json.thoughts.len(), report.thoughts.len());
    }
}
