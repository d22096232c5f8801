//! Training loops.
//!
//! One loop serves the latent objective and the explicit baselines; only
//! the per-batch step differs. Batch order is a pure function of (seed,
//! epoch), so a run interrupted at any step and resumed from a checkpoint
//! replays the exact remaining trajectory. Partial trailing batches are
//! dropped to keep every batch the configured size.

use crate::codi::{codi_step, CodiConfig, LossBreakdown, TeacherMode, TrainItem};
use crate::error::{CoreError, Result};
use crate::model::{masked_cross_entropy, ChunkInput, Model};
use crate::optim::{clip_grads, grad_norm, lr_at, AdamW};
use crate::tape::{Float, Tape};
use crate::views::SeqView;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Global gradient-norm ceiling applied before every update.
pub const GRAD_CLIP: f64 = 1.0;

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_student: f64,
    pub loss_teacher: f64,
    pub loss_kd: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
}

/// Callbacks observed once per optimizer step. `eval` runs after the
/// update and its result is attached to that step's metrics; `on_state`
/// sees the post-update model for checkpointing.
pub trait TrainObserver<F: Float> {
    fn eval(&mut self, _model: &Model<F>, _step: u64) -> Result<Option<f64>> {
        Ok(None)
    }
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }
    fn on_state(&mut self, _model: &Model<F>, _opt: &AdamW<F>, _step: u64) -> Result<()> {
        Ok(())
    }
}

/// Silent observer.
impl<F: Float> TrainObserver<F> for () {}

pub struct ResumeState<F: Float> {
    pub model: Model<F>,
    pub opt: AdamW<F>,
    pub step: u64,
}

pub struct TrainOutput<F: Float> {
    pub model: Model<F>,
    pub opt: AdamW<F>,
    pub metrics: Vec<StepMetrics>,
    pub total_steps: u64,
}

/// Deterministic order of sample indices for one epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Cross-entropy step over explicit sequences; used by the baselines and
/// the separate-teacher pretraining phase. The single loss is reported as
/// the student term.
pub fn explicit_step<F: Float>(
    model: &Model<F>,
    batch: &[&SeqView],
) -> Result<(LossBreakdown, Vec<Array2<F>>)> {
    assert!(!batch.is_empty(), "empty batch");
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let mut ces = Vec::with_capacity(batch.len());
    for view in batch {
        let mut cache = model.new_cache();
        let out =
            model.forward_chunk(&mut tape, &b, &mut cache, &ChunkInput::Tokens(view.tokens.clone()))?;
        let logits = model.logits(&mut tape, &b, out.final_ln);
        let ce = masked_cross_entropy(
            &mut tape,
            logits,
            view.pred_targets.iter().map(|&t| t as usize).collect(),
            view.pred_mask.clone(),
        )?;
        ces.push(ce);
    }
    let mut acc = ces[0];
    for &c in &ces[1..] {
        acc = tape.add(acc, c);
    }
    let mean = tape.scale(acc, F::from_f64(1.0 / ces.len() as f64));
    let ce = tape.scalar(mean).to_f64();
    if !ce.is_finite() {
        return Err(CoreError::NonFinite("batch loss"));
    }
    tape.backward(mean);
    let grads = b
        .vars
        .iter()
        .zip(&model.params.arrays)
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(p.dim()),
        })
        .collect();
    let lb = LossBreakdown { student_ce: ce, teacher_ce: 0.0, kd: 0.0, total: ce };
    Ok((lb, grads))
}

enum Task<'a, F: Float> {
    Latent { items: &'a [TrainItem], static_teacher: Option<Model<F>> },
    Explicit { views: &'a [SeqView] },
}

impl<F: Float> Task<'_, F> {
    fn len(&self) -> usize {
        match self {
            Task::Latent { items, .. } => items.len(),
            Task::Explicit { views } => views.len(),
        }
    }

    fn step(&self, model: &Model<F>, idx: &[usize], cfg: &CodiConfig) -> Result<(LossBreakdown, Vec<Array2<F>>)> {
        match self {
            Task::Latent { items, static_teacher } => {
                let batch: Vec<TrainItem> = idx.iter().map(|&i| items[i].clone()).collect();
                codi_step(model, static_teacher.as_ref(), &batch, cfg)
            }
            Task::Explicit { views } => {
                let batch: Vec<&SeqView> = idx.iter().map(|&i| &views[i]).collect();
                explicit_step(model, &batch)
            }
        }
    }
}

fn run_loop<F: Float, O: TrainObserver<F>>(
    cfg: &CodiConfig,
    task: Task<'_, F>,
    observer: &mut O,
    resume: Option<ResumeState<F>>,
) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    let n = task.len();
    let b = cfg.batch_size;
    if n < b {
        return Err(CoreError::InvalidConfig(format!(
            "dataset of {n} smaller than one batch of {b}"
        )));
    }
    let steps_per_epoch = (n / b) as u64;
    let total_steps = if cfg.total_steps > 0 {
        cfg.total_steps as u64
    } else {
        cfg.epochs as u64 * steps_per_epoch
    };

    let (mut model, mut opt, start) = match resume {
        Some(r) => (r.model, r.opt, r.step),
        None => {
            let model = Model::new(
                cfg.model.clone(),
                &[crate::tokenizer::BOT, crate::tokenizer::EOT],
            )?;
            let opt = AdamW::new(&model.params);
            (model, opt, 0)
        }
    };

    let mut metrics = Vec::new();
    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for step in start..total_steps {
        let epoch = step / steps_per_epoch;
        if epoch != perm_epoch {
            perm = epoch_permutation(cfg.seed, epoch, n);
            perm_epoch = epoch;
        }
        let slot = (step % steps_per_epoch) as usize;
        let idx = &perm[slot * b..(slot + 1) * b];

        let (lb, mut grads) = task.step(&model, idx, cfg)?;
        let gn = grad_norm(&grads);
        clip_grads(&mut grads, GRAD_CLIP);
        let lr = lr_at(step, total_steps, cfg.peak_lr);
        opt.step(&mut model.params, &grads, lr)?;

        let eval_acc = observer.eval(&model, step + 1)?;
        let m = StepMetrics {
            step,
            lr,
            loss_total: lb.total,
            loss_student: lb.student_ce,
            loss_teacher: lb.teacher_ce,
            loss_kd: lb.kd,
            grad_norm: gn,
            eval_acc,
        };
        observer.on_step(&m)?;
        observer.on_state(&model, &opt, step + 1)?;
        metrics.push(m);
    }
    Ok(TrainOutput { model, opt, metrics, total_steps })
}

/// Full latent-objective training. With a separate teacher mode the
/// teacher is first trained on the explicit task over the same schedule,
/// then frozen as the distillation source.
pub fn train_codi<F: Float, O: TrainObserver<F>>(
    cfg: &CodiConfig,
    items: &[TrainItem],
    observer: &mut O,
    resume: Option<ResumeState<F>>,
) -> Result<TrainOutput<F>> {
    let static_teacher = if cfg.teacher_mode == TeacherMode::Separate {
        let views: Vec<SeqView> = items.iter().map(|i| i.teacher.clone()).collect();
        let mut teacher_cfg = cfg.clone();
        teacher_cfg.teacher_mode = TeacherMode::Shared;
        teacher_cfg.model.seed = cfg.model.seed.wrapping_add(0x7EAC);
        let out = run_loop(&teacher_cfg, Task::<F>::Explicit { views: &views }, &mut (), None)?;
        Some(out.model)
    } else {
        None
    };
    run_loop(cfg, Task::Latent { items, static_teacher }, observer, resume)
}

/// Explicit-sequence training (baselines and teacher pretraining).
pub fn train_explicit<F: Float, O: TrainObserver<F>>(
    cfg: &CodiConfig,
    views: &[SeqView],
    observer: &mut O,
    resume: Option<ResumeState<F>>,
) -> Result<TrainOutput<F>> {
    run_loop(cfg, Task::<F>::Explicit { views }, observer, resume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codi::build_train_item;
    use crate::model::ModelConfig;
    use crate::problems::{gen_problem, ValueRange};
    use crate::tokenizer::{Tokenizer, VOCAB_SIZE};

    fn tiny_cfg() -> CodiConfig {
        CodiConfig {
            model: ModelConfig {
                vocab_size: VOCAB_SIZE,
                hidden_dim: 16,
                num_layers: 2,
                num_heads: 2,
                max_seq_len: 96,
                seed: 5,
                tied_head: false,
            },
            num_latent: 2,
            batch_size: 4,
            epochs: 1,
            total_steps: 0,
            peak_lr: 2e-3,
            seed: 9,
            ..CodiConfig::default()
        }
    }

    fn items(n: usize) -> Vec<TrainItem> {
        let tok = Tokenizer::new();
        (0..n)
            .map(|i| {
                let p = gen_problem(1000 + i as u64, 1 + i % 3, ValueRange::TRAIN).unwrap();
                build_train_item(&tok, &p, false).unwrap()
            })
            .collect()
    }

    #[test]
    fn permutations_are_deterministic_and_differ_by_epoch() {
        let a = epoch_permutation(7, 0, 50);
        let b = epoch_permutation(7, 0, 50);
        let c = epoch_permutation(7, 1, 50);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_seed_reproduces_metrics() {
        let mut cfg = tiny_cfg();
        cfg.total_steps = 10;
        let data = items(8);
        let a = train_codi::<f64, _>(&cfg, &data, &mut (), None).unwrap();
        let b = train_codi::<f64, _>(&cfg, &data, &mut (), None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 10);
        assert_eq!(a.model.params.arrays, b.model.params.arrays);
    }

    /// Saves a checkpoint file at a fixed step, then lets the run continue.
    struct SnapshotAt {
        step: u64,
        path: std::path::PathBuf,
        meta: crate::checkpoint::CheckpointMeta,
    }

    impl TrainObserver<f64> for SnapshotAt {
        fn on_state(&mut self, model: &Model<f64>, opt: &AdamW<f64>, step: u64) -> crate::error::Result<()> {
            if step == self.step {
                let mut meta = self.meta.clone();
                meta.step = step;
                crate::checkpoint::save(&self.path, model, Some(opt), &meta)?;
            }
            Ok(())
        }
    }

    #[test]
    fn resume_mid_run_matches_uninterrupted_run() {
        let mut cfg = tiny_cfg();
        cfg.total_steps = 6;
        let data = items(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut snap = SnapshotAt {
            step: 3,
            path: path.clone(),
            meta: crate::checkpoint::CheckpointMeta {
                step: 0,
                method: "codi".into(),
                num_latent: cfg.num_latent,
            },
        };
        let full = train_codi::<f64, _>(&cfg, &data, &mut snap, None).unwrap();

        let (model, opt, meta) = crate::checkpoint::load::<f64>(&path).unwrap();
        let resumed = train_codi::<f64, _>(
            &cfg,
            &data,
            &mut (),
            Some(ResumeState { model, opt: opt.unwrap(), step: meta.step }),
        )
        .unwrap();

        assert_eq!(&full.metrics[3..], &resumed.metrics[..]);
        assert_eq!(full.model.params.arrays, resumed.model.params.arrays);
        assert_eq!(full.opt.m, resumed.opt.m);
        assert_eq!(full.opt.v, resumed.opt.v);
    }

    #[test]
    fn single_batch_overfits_below_the_oracle_bound() {
        let mut cfg = tiny_cfg();
        cfg.batch_size = 8;
        cfg.total_steps = 500;
        cfg.peak_lr = 6e-3;
        let data = items(8);
        let out = train_codi::<f64, _>(&cfg, &data, &mut (), None).unwrap();
        let last = out.metrics.last().unwrap();
        assert!(
            last.loss_total < 0.05,
            "overfit failed: final total {:.4}",
            last.loss_total
        );
    }

    #[test]
    fn metrics_serialize_with_contract_fields() {
        let m = StepMetrics {
            step: 3,
            lr: 0.001,
            loss_total: 2.0,
            loss_student: 0.5,
            loss_teacher: 1.0,
            loss_kd: 0.5,
            grad_norm: 0.9,
            eval_acc: None,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"step\":3") && s.contains("\"grad_norm\":0.9"));
        assert!(!s.contains("eval_acc"));
        let m2 = StepMetrics { eval_acc: Some(0.5), ..m };
        assert!(serde_json::to_string(&m2).unwrap().contains("\"eval_acc\":0.5"));
    }

    #[test]
    fn explicit_training_reduces_loss() {
        let tok = Tokenizer::new();
        let views: Vec<SeqView> = (0..8)
            .map(|i| {
                let p = gen_problem(7 + i, 1 + (i as usize) % 3, ValueRange::TRAIN).unwrap();
                let reasoning = crate::views::render_steps(&p.cot);
                crate::views::build_explicit_view(
                    &tok,
                    &p.question,
                    Some(&reasoning),
                    p.answer,
                    crate::views::MaskPolicy::Reasoning,
                )
                .unwrap()
            })
            .collect();
        let mut cfg = tiny_cfg();
        cfg.batch_size = 8;
        cfg.total_steps = 150;
        cfg.peak_lr = 5e-3;
        let out = train_explicit::<f64, _>(&cfg, &views, &mut (), None).unwrap();
        let first = out.metrics.first().unwrap().loss_total;
        let last = out.metrics.last().unwrap().loss_total;
        assert!(last < first * 0.5, "explicit loss {first:.3} -> {last:.3}");
    }
}
