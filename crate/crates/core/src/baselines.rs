//! Explicit-sequence baselines on the shared substrate.
//!
//! Four layouts, one trainer: full reasoning steps (cot-sft), direct
//! answers (no-cot-sft), and two stripped pattern forms that keep only the
//! numeric skeleton of the reasoning, either the intermediate results alone
//! (res) or operators interleaved with results (op-res).

use crate::codi::CodiConfig;
use crate::error::Result;
use crate::problems::{parse_step, Problem};
use crate::tokenizer::Tokenizer;
use crate::train::{train_explicit, ResumeState, TrainObserver, TrainOutput};
use crate::tape::Float;
use crate::views::{build_explicit_view, render_steps, MaskPolicy, SeqView};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    CotSft,
    NoCotSft,
    ResSft,
    OpResSft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternKind {
    Res,
    OpRes,
}

/// Replace each problem's reasoning with its numeric skeleton. The answer
/// and question are untouched; the skeleton becomes a single rendered step.
pub fn make_pattern_dataset(problems: &[Problem], kind: PatternKind) -> Vec<Problem> {
    problems
        .iter()
        .map(|p| {
            let mut parts = Vec::new();
            for step in &p.cot {
                let (_, op, _, r) =
                    parse_step(step).expect("pattern transform needs equation steps");
                if kind == PatternKind::OpRes {
                    parts.push(op.to_string());
                }
                parts.push(r.to_string());
            }
            Problem { question: p.question.clone(), cot: vec![parts.join(" , ")], answer: p.answer }
        })
        .collect()
}

/// Training views for one baseline over a problem list.
pub fn baseline_views(
    tok: &Tokenizer,
    problems: &[Problem],
    kind: BaselineKind,
) -> Result<Vec<SeqView>> {
    let (problems, policy): (Vec<Problem>, MaskPolicy) = match kind {
        BaselineKind::CotSft => (problems.to_vec(), MaskPolicy::Reasoning),
        BaselineKind::NoCotSft => (
            problems
                .iter()
                .map(|p| Problem { question: p.question.clone(), cot: vec![], answer: p.answer })
                .collect(),
            MaskPolicy::AnswerOnly,
        ),
        BaselineKind::ResSft => {
            (make_pattern_dataset(problems, PatternKind::Res), MaskPolicy::Reasoning)
        }
        BaselineKind::OpResSft => {
            (make_pattern_dataset(problems, PatternKind::OpRes), MaskPolicy::Reasoning)
        }
    };
    problems
        .iter()
        .map(|p| {
            let reasoning = render_steps(&p.cot);
            let reasoning = if reasoning.is_empty() { None } else { Some(reasoning.as_str()) };
            build_explicit_view(tok, &p.question, reasoning, p.answer, policy)
        })
        .collect()
}

/// Same optimizer, schedule, and loop as the latent objective.
pub fn train_baseline<F: Float, O: TrainObserver<F>>(
    kind: BaselineKind,
    cfg: &CodiConfig,
    problems: &[Problem],
    observer: &mut O,
    resume: Option<ResumeState<F>>,
) -> Result<TrainOutput<F>> {
    let tok = Tokenizer::new();
    let views = baseline_views(&tok, problems, kind)?;
    train_explicit(cfg, &views, observer, resume)
}
