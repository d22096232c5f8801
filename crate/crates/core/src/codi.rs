//! The joint self-distillation objective.
//!
//! One step runs two forward passes that share weights by default: a
//! teacher pass over question, explicit reasoning, prompt, and answer, and
//! a student pass that replaces the reasoning span with `num_latent`
//! continuous thoughts fed back autoregressively through the thought
//! projector. A per-layer alignment loss ties the student's hidden state at
//! the trailing `:` of the answer prompt to the teacher's at the same
//! token, with the teacher side behind a gradient stop. The total is
//! `alpha * student_ce + beta * kd + gamma * teacher_ce`.

use crate::error::{CoreError, Result};
use crate::model::{masked_cross_entropy, Binding, ChunkInput, HiddenStack, Model, ModelConfig};
use crate::problems::{drop_final_cot_step, Problem};
use crate::tape::{Distance, Float, Tape, Var};
use crate::tokenizer::{Tokenizer, VOCAB_SIZE};
use crate::views::{
    build_explicit_view, build_latent_layout, render_steps, LatentLayout, MaskPolicy, SeqView,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Teacher activation spreads below this are treated as degenerate.
const SIGMA_FLOOR: f64 = 1e-12;

/// Where the distillation target comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// One weight set serves both passes (self-distillation).
    Shared,
    /// A frozen separate model provides targets and the teacher loss.
    Separate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodiConfig {
    pub model: ModelConfig,
    /// Continuous thoughts per problem.
    pub num_latent: usize,
    /// Student cross-entropy weight.
    pub alpha: f64,
    /// Distillation weight.
    pub beta: f64,
    /// Teacher cross-entropy weight.
    pub gamma: f64,
    pub distance: Distance,
    pub normalize_by_teacher_std: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// 0 derives the step count from epochs and dataset size.
    pub total_steps: usize,
    pub seed: u64,
    /// Keep the final reasoning step in the teacher sequence.
    pub keep_final_step: bool,
    /// Feed raw final-layer hidden states back when false.
    pub use_projection: bool,
    pub teacher_mode: TeacherMode,
    /// With a separate teacher, also train the student on the explicit
    /// reasoning task.
    pub multitask_student: bool,
    /// Evaluate every this many steps during training; 0 disables.
    pub eval_every: usize,
}

impl Default for CodiConfig {
    fn default() -> Self {
        CodiConfig {
            model: ModelConfig {
                vocab_size: VOCAB_SIZE,
                hidden_dim: 128,
                num_layers: 4,
                num_heads: 4,
                max_seq_len: 160,
                seed: 0,
                tied_head: false,
            },
            num_latent: 6,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            distance: Distance::SmoothL1,
            normalize_by_teacher_std: true,
            epochs: 2,
            batch_size: 32,
            peak_lr: 3e-3,
            total_steps: 0,
            seed: 0,
            keep_final_step: false,
            use_projection: true,
            teacher_mode: TeacherMode::Shared,
            multitask_student: false,
            eval_every: 0,
        }
    }
}

impl CodiConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || w < 0.0 {
                return Err(CoreError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.normalize_by_teacher_std && self.batch_size < 2 {
            return Err(CoreError::InvalidConfig(
                "batch_size must be >= 2 when normalize_by_teacher_std (std needs >= 2 samples)"
                    .into(),
            ));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(CoreError::InvalidConfig("peak_lr must be finite and positive".into()));
        }
        if self.epochs == 0 && self.total_steps == 0 {
            return Err(CoreError::InvalidConfig("need epochs or total_steps".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub student_ce: f64,
    pub teacher_ce: f64,
    pub kd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_parts(alpha: f64, beta: f64, gamma: f64, student_ce: f64, kd: f64, teacher_ce: f64) -> Self {
        LossBreakdown {
            student_ce,
            teacher_ce,
            kd,
            total: alpha * student_ce + beta * kd + gamma * teacher_ce,
        }
    }
}

/// One problem rendered for both passes.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub teacher: SeqView,
    pub latent: LatentLayout,
}

pub fn build_train_item(tok: &Tokenizer, p: &Problem, keep_final_step: bool) -> Result<TrainItem> {
    let steps =
        if keep_final_step { p.cot.clone() } else { drop_final_cot_step(&p.cot) };
    let reasoning = render_steps(&steps);
    let reasoning = if reasoning.is_empty() { None } else { Some(reasoning.as_str()) };
    let teacher =
        build_explicit_view(tok, &p.question, reasoning, p.answer, MaskPolicy::Reasoning)?;
    let latent = build_latent_layout(tok, &p.question, p.answer)?;
    Ok(TrainItem { teacher, latent })
}

/// The student's continuous reasoning, kept for probing.
#[derive(Debug)]
pub struct ThoughtTrace {
    /// The n injected thought vectors (post-projection), each 1 x d.
    pub latent_inputs: Vec<Var>,
    /// Per-layer block outputs at each latent position.
    pub latent_hiddens: Vec<HiddenStack>,
    /// Per latent step, the attention node of every layer at that step.
    pub latent_attends: Vec<Vec<Var>>,
    /// Cache length after the latent phase: |question| + 1 + n.
    pub cache_len: usize,
}

/// Teacher pass: cross-entropy over its supervised positions plus the
/// per-layer hidden states at the distill token.
pub fn teacher_forward<F: Float>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    b: &Binding,
    view: &SeqView,
) -> Result<(Var, Vec<Var>)> {
    let mut cache = model.new_cache();
    let out = model.forward_chunk(tape, b, &mut cache, &ChunkInput::Tokens(view.tokens.clone()))?;
    let logits = model.logits(tape, b, out.final_ln);
    let ce = masked_cross_entropy(
        tape,
        logits,
        view.pred_targets.iter().map(|&t| t as usize).collect(),
        view.pred_mask.clone(),
    )?;
    let distill =
        out.stack.layers.iter().map(|&l| tape.rows(l, vec![view.distill_index])).collect();
    Ok((ce, distill))
}

/// Student pass: head tokens, n autoregressive thought injections, then the
/// tail with prompt and answer. Cross-entropy covers answer and end only.
pub fn student_rollout<F: Float>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    b: &Binding,
    layout: &LatentLayout,
    n: usize,
    use_projection: bool,
) -> Result<(Var, Vec<Var>, ThoughtTrace)> {
    let mut cache = model.new_cache();
    let head_out =
        model.forward_chunk(tape, b, &mut cache, &ChunkInput::Tokens(layout.head.clone()))?;
    let mut last_final = head_out.final_ln;
    let mut last_row = layout.head.len() - 1;
    let mut trace = ThoughtTrace {
        latent_inputs: Vec::with_capacity(n),
        latent_hiddens: Vec::with_capacity(n),
        latent_attends: Vec::with_capacity(n),
        cache_len: 0,
    };
    for _ in 0..n {
        let h = tape.rows(last_final, vec![last_row]);
        let thought = if use_projection { model.project_thought(tape, b, h) } else { h };
        let out = model.forward_chunk(tape, b, &mut cache, &ChunkInput::Vectors(thought))?;
        trace.latent_inputs.push(thought);
        trace
            .latent_attends
            .push(cache.attends.iter().map(|per_layer| *per_layer.last().unwrap()).collect());
        last_final = out.final_ln;
        trace.latent_hiddens.push(out.stack);
        last_row = 0;
    }
    trace.cache_len = cache.len;

    let tail_out =
        model.forward_chunk(tape, b, &mut cache, &ChunkInput::Tokens(layout.tail.clone()))?;
    let logits = model.logits(tape, b, tail_out.final_ln);
    let ce = masked_cross_entropy(
        tape,
        logits,
        layout.tail_pred_targets.iter().map(|&t| t as usize).collect(),
        layout.tail_pred_mask.clone(),
    )?;
    let distill = tail_out
        .stack
        .layers
        .iter()
        .map(|&l| tape.rows(l, vec![layout.tail_distill_index]))
        .collect();
    Ok((ce, distill, trace))
}

/// Per-layer scalar spread of the teacher's distill activations over the
/// whole batch (unbiased estimator over all batch x d entries). Returns
/// all-ones when normalization is disabled.
pub fn batch_teacher_stats<F: Float>(
    tape: &Tape<F>,
    teacher_distill: &[Vec<Var>],
    normalize: bool,
) -> Result<Vec<f64>> {
    let layers = teacher_distill.first().map_or(0, |s| s.len());
    if !normalize {
        return Ok(vec![1.0; layers]);
    }
    let mut sigmas = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut vals = Vec::new();
        for sample in teacher_distill {
            vals.extend(tape.value(sample[l]).iter().map(|&x| x.to_f64()));
        }
        let n = vals.len();
        if n < 2 {
            return Err(CoreError::DegenerateBatch("need >= 2 activation entries".into()));
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let sigma = var.sqrt();
        if !(sigma > SIGMA_FLOOR) {
            return Err(CoreError::DegenerateBatch(format!(
                "teacher activation std {sigma:.3e} at layer {l}"
            )));
        }
        sigmas.push(sigma);
    }
    Ok(sigmas)
}

/// One sample's alignment loss: mean over layers of the distance between
/// sigma-normalized teacher (gradient-stopped) and student activations.
pub fn kd_loss<F: Float>(
    tape: &mut Tape<F>,
    teacher_distill: &[Var],
    student_distill: &[Var],
    sigma: &[f64],
    distance: Distance,
) -> Var {
    assert_eq!(teacher_distill.len(), student_distill.len());
    assert_eq!(teacher_distill.len(), sigma.len());
    let mut acc: Option<Var> = None;
    for ((&t, &s), &sg) in teacher_distill.iter().zip(student_distill).zip(sigma) {
        let t = tape.stop_grad(t);
        let diff = tape.sub(t, s);
        let scaled = tape.scale(diff, F::from_f64(1.0 / sg));
        let d = tape.robust_mean(scaled, distance);
        acc = Some(match acc {
            Some(a) => tape.add(a, d),
            None => d,
        });
    }
    let acc = acc.expect("at least one layer");
    tape.scale(acc, F::from_f64(1.0 / sigma.len() as f64))
}

fn mean_of<F: Float>(tape: &mut Tape<F>, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    tape.scale(acc, F::from_f64(1.0 / vars.len() as f64))
}

/// One batch: builds both passes for every item on a single tape, computes
/// the weighted total, and backpropagates once. Returns the loss parts and
/// gradients aligned with `model.params`.
pub fn codi_step<F: Float>(
    model: &Model<F>,
    static_teacher: Option<&Model<F>>,
    batch: &[TrainItem],
    cfg: &CodiConfig,
) -> Result<(LossBreakdown, Vec<Array2<F>>)> {
    assert!(!batch.is_empty(), "empty batch");
    if cfg.teacher_mode == TeacherMode::Separate && static_teacher.is_none() {
        return Err(CoreError::InvalidConfig("separate teacher mode needs a teacher model".into()));
    }

    let mut tape = Tape::new();
    let b_student = model.bind(&mut tape);
    let (teacher_model, b_teacher) = match (cfg.teacher_mode, static_teacher) {
        (TeacherMode::Separate, Some(t)) => (t, t.bind_frozen(&mut tape)),
        _ => (model, b_student.clone()),
    };

    let mut teacher_ces = Vec::with_capacity(batch.len());
    let mut student_ces = Vec::with_capacity(batch.len());
    let mut teacher_distills = Vec::with_capacity(batch.len());
    let mut student_distills = Vec::with_capacity(batch.len());
    for item in batch {
        let (t_ce, t_distill) = teacher_forward(&mut tape, teacher_model, &b_teacher, &item.teacher)?;
        // The multitask ablation trains the student weights on the explicit
        // task while a frozen teacher provides the alignment target.
        let t_ce = if cfg.teacher_mode == TeacherMode::Separate && cfg.multitask_student {
            teacher_forward(&mut tape, model, &b_student, &item.teacher)?.0
        } else {
            t_ce
        };
        let (s_ce, s_distill, _trace) = student_rollout(
            &mut tape,
            model,
            &b_student,
            &item.latent,
            cfg.num_latent,
            cfg.use_projection,
        )?;
        teacher_ces.push(t_ce);
        student_ces.push(s_ce);
        teacher_distills.push(t_distill);
        student_distills.push(s_distill);
    }

    // The spreads depend on every teacher value in the batch, so they are
    // computed after all graphs exist and enter the tape as constants.
    let sigma = batch_teacher_stats(&tape, &teacher_distills, cfg.normalize_by_teacher_std)?;
    let kds: Vec<Var> = teacher_distills
        .iter()
        .zip(&student_distills)
        .map(|(t, s)| kd_loss(&mut tape, t, s, &sigma, cfg.distance))
        .collect();

    let student_mean = mean_of(&mut tape, &student_ces);
    let teacher_mean = mean_of(&mut tape, &teacher_ces);
    let kd_mean = mean_of(&mut tape, &kds);
    let s_term = tape.scale(student_mean, F::from_f64(cfg.alpha));
    let k_term = tape.scale(kd_mean, F::from_f64(cfg.beta));
    let t_term = tape.scale(teacher_mean, F::from_f64(cfg.gamma));
    let sk = tape.add(s_term, k_term);
    let total = tape.add(sk, t_term);

    let breakdown = LossBreakdown {
        student_ce: tape.scalar(student_mean).to_f64(),
        teacher_ce: tape.scalar(teacher_mean).to_f64(),
        kd: tape.scalar(kd_mean).to_f64(),
        total: tape.scalar(total).to_f64(),
    };
    if !breakdown.total.is_finite() {
        return Err(CoreError::NonFinite("batch loss"));
    }

    tape.backward(total);
    let grads = b_student
        .vars
        .iter()
        .zip(&model.params.arrays)
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(p.dim()),
        })
        .collect();
    Ok((breakdown, grads))
}
