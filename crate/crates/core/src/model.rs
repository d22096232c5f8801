//! Decoder-only transformer built on the autodiff tape.
//!
//! Pre-norm GPT-style blocks with learned positional embeddings, a fused QKV
//! projection, GELU MLP, and a final layer norm. The forward pass works on
//! *chunks*: a chunk is either a run of token ids or a batch of injected
//! d-vectors (continuous thoughts). Each chunk extends a [`DecodeCache`]
//! holding per-layer K/V projections of everything processed so far, so
//! incremental decoding and full-sequence processing share one code path and
//! gradients flow back through cached positions into earlier chunks.
//!
//! Every chunk forward exposes the per-layer block outputs ([`HiddenStack`])
//! for the distillation loss and the probes.

use crate::error::{CoreError, Result};
use crate::tape::{Float, Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// bot/eot rows start at the embedding-table mean plus noise of this scale.
const MARKER_NOISE_STD: f64 = 0.002;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Share the output head with the token embedding table.
    #[serde(default)]
    pub tied_head: bool,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.max_seq_len == 0
        {
            return Err(CoreError::InvalidConfig("all model counts must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Named parameter arrays. Biases and norm gains are stored as (1, d) rows;
/// everything else is a matrix. `decay` marks parameters subject to weight
/// decay (matrices and embeddings, not biases or gains).
pub struct Params<F: Float> {
    pub names: Vec<String>,
    pub arrays: Vec<Array2<F>>,
    pub decay: Vec<bool>,
}

impl<F: Float> Params<F> {
    fn new() -> Self {
        Params { names: Vec::new(), arrays: Vec::new(), decay: Vec::new() }
    }

    fn push(&mut self, name: String, a: Array2<F>, decay: bool) -> usize {
        self.names.push(name);
        self.arrays.push(a);
        self.decay.push(decay);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    proj_w: usize,
    proj_b: usize,
}

struct ProjectorIdx {
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    ln_g: usize,
    ln_b: usize,
}

struct ParamIdx {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: Option<usize>,
    proj: ProjectorIdx,
}

/// The transformer plus the thought-projection MLP that turns a final-layer
/// hidden state into the next injected input.
pub struct Model<F: Float> {
    pub cfg: ModelConfig,
    pub params: Params<F>,
    idx: ParamIdx,
}

fn normal(rng: &mut ChaCha20Rng, std: f64) -> f64 {
    // Box-Muller; two uniforms per sample keeps the stream simple and seeded.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

fn randn_mat<F: Float>(rng: &mut ChaCha20Rng, r: usize, c: usize, std: f64) -> Array2<F> {
    Array2::from_shape_fn((r, c), |_| F::from_f64(normal(rng, std)))
}

impl<F: Float> Model<F> {
    /// Initialize from the config seed: N(0, 0.02) weights with residual
    /// output projections scaled down by 1/sqrt(2·num_layers), zero biases,
    /// unit norm gains. `marker_ids` (bot/eot) get near-mean embedding rows.
    pub fn new(cfg: ModelConfig, marker_ids: &[u32]) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let d = cfg.hidden_dim;
        let v = cfg.vocab_size;
        let resid_std = INIT_STD / ((2 * cfg.num_layers) as f64).sqrt();

        let mut p = Params::new();
        let tok_emb = p.push("tok_emb".into(), randn_mat(&mut rng, v, d, INIT_STD), true);
        let pos_emb =
            p.push("pos_emb".into(), randn_mat(&mut rng, cfg.max_seq_len, d, INIT_STD), true);

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let ln1_g = p.push(format!("l{l}.ln1.g"), Array2::ones((1, d)), false);
            let ln1_b = p.push(format!("l{l}.ln1.b"), Array2::zeros((1, d)), false);
            let qkv_w =
                p.push(format!("l{l}.qkv.w"), randn_mat(&mut rng, d, 3 * d, INIT_STD), true);
            let qkv_b = p.push(format!("l{l}.qkv.b"), Array2::zeros((1, 3 * d)), false);
            let out_w =
                p.push(format!("l{l}.attn_out.w"), randn_mat(&mut rng, d, d, resid_std), true);
            let out_b = p.push(format!("l{l}.attn_out.b"), Array2::zeros((1, d)), false);
            let ln2_g = p.push(format!("l{l}.ln2.g"), Array2::ones((1, d)), false);
            let ln2_b = p.push(format!("l{l}.ln2.b"), Array2::zeros((1, d)), false);
            let fc_w =
                p.push(format!("l{l}.mlp.fc.w"), randn_mat(&mut rng, d, 4 * d, INIT_STD), true);
            let fc_b = p.push(format!("l{l}.mlp.fc.b"), Array2::zeros((1, 4 * d)), false);
            let proj_w =
                p.push(format!("l{l}.mlp.proj.w"), randn_mat(&mut rng, 4 * d, d, resid_std), true);
            let proj_b = p.push(format!("l{l}.mlp.proj.b"), Array2::zeros((1, d)), false);
            layers.push(LayerIdx {
                ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc_w, fc_b, proj_w,
                proj_b,
            });
        }

        let lnf_g = p.push("ln_f.g".into(), Array2::ones((1, d)), false);
        let lnf_b = p.push("ln_f.b".into(), Array2::zeros((1, d)), false);
        let head_w = if cfg.tied_head {
            None
        } else {
            Some(p.push("head.w".into(), randn_mat(&mut rng, d, v, INIT_STD), true))
        };

        let proj = ProjectorIdx {
            fc1_w: p.push("thought_proj.fc1.w".into(), randn_mat(&mut rng, d, d, INIT_STD), true),
            fc1_b: p.push("thought_proj.fc1.b".into(), Array2::zeros((1, d)), false),
            fc2_w: p.push("thought_proj.fc2.w".into(), randn_mat(&mut rng, d, d, INIT_STD), true),
            fc2_b: p.push("thought_proj.fc2.b".into(), Array2::zeros((1, d)), false),
            ln_g: p.push("thought_proj.ln.g".into(), Array2::ones((1, d)), false),
            ln_b: p.push("thought_proj.ln.b".into(), Array2::zeros((1, d)), false),
        };

        // Markers (bot/eot) start at the table mean plus small noise so their
        // first logit contributions stay unremarkable.
        let mean = {
            let t = &p.arrays[tok_emb];
            t.sum_axis(ndarray::Axis(0)).mapv(|x| x / F::from_f64(v as f64))
        };
        for &id in marker_ids {
            let mut row = p.arrays[tok_emb].row_mut(id as usize);
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = mean[j] + F::from_f64(normal(&mut rng, MARKER_NOISE_STD));
            }
        }

        let idx = ParamIdx { tok_emb, pos_emb, layers, lnf_g, lnf_b, head_w, proj };
        Ok(Model { cfg, params: p, idx })
    }

    /// Rebuild from loaded parameter arrays (checkpoint path).
    pub fn from_params(cfg: ModelConfig, params: Params<F>) -> Result<Self> {
        let template = Model::<F>::new(cfg.clone(), &[])?;
        if template.params.names != params.names {
            return Err(CoreError::BadCheckpoint("parameter name list mismatch".into()));
        }
        for (i, a) in params.arrays.iter().enumerate() {
            if a.dim() != template.params.arrays[i].dim() {
                return Err(CoreError::BadCheckpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    params.names[i],
                    a.dim(),
                    template.params.arrays[i].dim()
                )));
            }
        }
        Ok(Model { cfg, params, idx: template.idx })
    }

    /// Register every parameter on a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Binding {
        Binding { vars: self.params.arrays.iter().map(|a| tape.leaf(a.clone())).collect() }
    }

    /// Register every parameter as a constant: forward-only (evaluation) or
    /// frozen-teacher use.
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Binding {
        Binding { vars: self.params.arrays.iter().map(|a| tape.constant(a.clone())).collect() }
    }

    pub fn new_cache(&self) -> DecodeCache {
        DecodeCache {
            kv: vec![Vec::new(); self.cfg.num_layers],
            attends: vec![Vec::new(); self.cfg.num_layers],
            len: 0,
        }
    }

    /// Process one chunk, extending `cache`. Returns the per-layer block
    /// outputs and the final-norm output for this chunk's positions.
    pub fn forward_chunk(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        cache: &mut DecodeCache,
        input: &ChunkInput,
    ) -> Result<ChunkOut> {
        let d = self.cfg.hidden_dim;
        let t = match input {
            ChunkInput::Tokens(ids) => ids.len(),
            ChunkInput::Vectors(v) => tape.value(*v).nrows(),
        };
        assert!(t > 0, "empty chunk");
        if cache.len + t > self.cfg.max_seq_len {
            return Err(CoreError::SequenceTooLong {
                len: cache.len + t,
                max: self.cfg.max_seq_len,
            });
        }

        let positions: Vec<usize> = (cache.len..cache.len + t).collect();
        let pos = tape.rows(b.vars[self.idx.pos_emb], positions);
        let mut x = match input {
            ChunkInput::Tokens(ids) => {
                for &id in ids.iter() {
                    assert!((id as usize) < self.cfg.vocab_size, "token id out of range");
                }
                let emb =
                    tape.rows(b.vars[self.idx.tok_emb], ids.iter().map(|&i| i as usize).collect());
                tape.add(emb, pos)
            }
            ChunkInput::Vectors(v) => {
                let got = tape.value(*v).ncols();
                if got != d {
                    return Err(CoreError::BadInjection { got, want: d });
                }
                tape.add(*v, pos)
            }
        };
        let embedded = x;

        let eps = F::from_f64(LN_EPS);
        let mut stack = Vec::with_capacity(self.cfg.num_layers);
        for (l, li) in self.idx.layers.iter().enumerate() {
            let h = tape.layer_norm(x, b.vars[li.ln1_g], b.vars[li.ln1_b], eps);
            let qkv = tape.matmul(h, b.vars[li.qkv_w]);
            let qkv = tape.add_row(qkv, b.vars[li.qkv_b]);
            let q = tape.slice_cols(qkv, 0, d);
            let k = tape.slice_cols(qkv, d, 2 * d);
            let v = tape.slice_cols(qkv, 2 * d, 3 * d);
            cache.kv[l].push((k, v));
            let att = tape.attend(q, &cache.kv[l], self.cfg.num_heads);
            cache.attends[l].push(att);
            let att = tape.matmul(att, b.vars[li.out_w]);
            let att = tape.add_row(att, b.vars[li.out_b]);
            x = tape.add(x, att);

            let h = tape.layer_norm(x, b.vars[li.ln2_g], b.vars[li.ln2_b], eps);
            let m = tape.matmul(h, b.vars[li.fc_w]);
            let m = tape.add_row(m, b.vars[li.fc_b]);
            let m = tape.gelu(m);
            let m = tape.matmul(m, b.vars[li.proj_w]);
            let m = tape.add_row(m, b.vars[li.proj_b]);
            x = tape.add(x, m);
            stack.push(x);
        }

        let final_ln = tape.layer_norm(x, b.vars[self.idx.lnf_g], b.vars[self.idx.lnf_b], eps);
        cache.len += t;
        Ok(ChunkOut { embedded, stack: HiddenStack { layers: stack }, final_ln })
    }

    /// Vocabulary logits for already-final-normed hidden rows.
    pub fn logits(&self, tape: &mut Tape<F>, b: &Binding, h: Var) -> Var {
        match self.idx.head_w {
            Some(w) => tape.matmul(h, b.vars[w]),
            None => tape.matmul_bt(h, b.vars[self.idx.tok_emb]),
        }
    }

    /// Two-layer MLP + layer norm mapping a final-layer hidden row to the
    /// next injected thought vector.
    pub fn project_thought(&self, tape: &mut Tape<F>, b: &Binding, h: Var) -> Var {
        let pi = &self.idx.proj;
        let z = tape.matmul(h, b.vars[pi.fc1_w]);
        let z = tape.add_row(z, b.vars[pi.fc1_b]);
        let z = tape.gelu(z);
        let z = tape.matmul(z, b.vars[pi.fc2_w]);
        let z = tape.add_row(z, b.vars[pi.fc2_b]);
        tape.layer_norm(z, b.vars[pi.ln_g], b.vars[pi.ln_b], F::from_f64(LN_EPS))
    }

    /// Token-embedding rows (the injection-equivalence identity and the
    /// probes need direct access).
    pub fn embedding_rows(&self, ids: &[u32]) -> Array2<F> {
        let mut out = Array2::zeros((ids.len(), self.cfg.hidden_dim));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&self.params.arrays[self.idx.tok_emb].row(id as usize));
        }
        out
    }

    /// The matrix whose rows score vocabulary entries in the output path:
    /// transposed head for an untied model, the embedding table when tied.
    pub fn output_embedding(&self) -> Array2<F> {
        match self.idx.head_w {
            Some(w) => self.params.arrays[w].t().to_owned(),
            None => self.params.arrays[self.idx.tok_emb].clone(),
        }
    }

    /// Final-layer-norm affine (gain, bias) applied outside a tape; the
    /// probes normalize latent vectors through the same output path.
    pub fn apply_final_norm_row(&self, h: &[f64]) -> Vec<f64> {
        let d = h.len();
        let mean = h.iter().sum::<f64>() / d as f64;
        let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let g = &self.params.arrays[self.idx.lnf_g];
        let b = &self.params.arrays[self.idx.lnf_b];
        (0..d)
            .map(|j| (h[j] - mean) * inv * g[[0, j]].to_f64() + b[[0, j]].to_f64())
            .collect()
    }
}

/// Tape handles for all parameters, in `Params` order.
#[derive(Clone)]
pub struct Binding {
    pub vars: Vec<Var>,
}

/// One chunk of input positions: token ids, or injected d-vectors already on
/// the tape (each row one position).
pub enum ChunkInput {
    Tokens(Vec<u32>),
    Vectors(Var),
}

/// Per-layer K/V chunk handles for every position processed so far, plus the
/// attention nodes (for weight probes) and the running position count.
pub struct DecodeCache {
    kv: Vec<Vec<(Var, Var)>>,
    pub attends: Vec<Vec<Var>>,
    pub len: usize,
}

/// Block outputs for one chunk, layer 1..=M, each (chunk positions × d).
#[derive(Debug)]
pub struct HiddenStack {
    pub layers: Vec<Var>,
}

/// Result of one chunk forward.
#[derive(Debug)]
pub struct ChunkOut {
    /// Input vectors after positional addition (the optional layer-0 tap).
    pub embedded: Var,
    pub stack: HiddenStack,
    pub final_ln: Var,
}

/// Mean NLL over masked-in rows; `targets[i]`/`mask[i]` describe row i of
/// `logits`. Errors when the mask selects nothing.
pub fn masked_cross_entropy<F: Float>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: Vec<usize>,
    mask: Vec<bool>,
) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(CoreError::EmptyLossMask);
    }
    Ok(tape.cross_entropy(logits, targets, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn small_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 32,
            seed,
            tied_head: false,
        }
    }

    fn full_forward_logits(
        model: &Model<f64>,
        ids: &[u32],
        chunk_sizes: &[usize],
    ) -> Array2<f64> {
        assert_eq!(chunk_sizes.iter().sum::<usize>(), ids.len());
        let mut tape = Tape::new();
        let b = model.bind_frozen(&mut tape);
        let mut cache = model.new_cache();
        let mut rows = Vec::new();
        let mut at = 0;
        for &sz in chunk_sizes {
            let chunk = ChunkInput::Tokens(ids[at..at + sz].to_vec());
            let out = model.forward_chunk(&mut tape, &b, &mut cache, &chunk).unwrap();
            rows.push(out.final_ln);
            at += sz;
        }
        let h = tape.concat_rows(&rows);
        let lg = model.logits(&mut tape, &b, h);
        tape.value(lg).clone()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let m1 = Model::<f32>::new(small_cfg(9), &[2, 3]).unwrap();
        let m2 = Model::<f32>::new(small_cfg(9), &[2, 3]).unwrap();
        assert_eq!(m1.params.names, m2.params.names);
        for (a, b) in m1.params.arrays.iter().zip(&m2.params.arrays) {
            assert_eq!(a, b, "same seed must give bit-identical weights");
        }
        let m3 = Model::<f32>::new(small_cfg(10), &[2, 3]).unwrap();
        let differs = m1
            .params
            .arrays
            .iter()
            .zip(&m3.params.arrays)
            .any(|(a, b)| a != b);
        assert!(differs, "different seed must change weights");
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let model = Model::<f32>::new(small_cfg(1), &[]).unwrap();
        let mut tape = Tape::new();
        let b = model.bind_frozen(&mut tape);
        let mut cache = model.new_cache();
        let out = model
            .forward_chunk(&mut tape, &b, &mut cache, &ChunkInput::Tokens(vec![1, 5, 9, 0]))
            .unwrap();
        assert_eq!(out.stack.layers.len(), 2);
        for &l in &out.stack.layers {
            let v = tape.value(l);
            assert_eq!(v.dim(), (4, 16));
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let lg = model.logits(&mut tape, &b, out.final_ln);
        assert_eq!(tape.value(lg).dim(), (4, 17));
        assert_eq!(cache.len, 4);
    }

    #[test]
    fn cache_matches_full_recompute() {
        let model = Model::<f64>::new(small_cfg(3), &[]).unwrap();
        let ids: Vec<u32> = vec![4, 11, 2, 2, 16, 7, 0, 13, 5, 1];
        let full = full_forward_logits(&model, &ids, &[10]);
        let a = full_forward_logits(&model, &ids, &[3, 1, 1, 4, 1]);
        let b = full_forward_logits(&model, &ids, &[1; 10]);
        for (x, y) in full.iter().zip(a.iter()).chain(full.iter().zip(b.iter())) {
            let rel = (x - y).abs() / x.abs().max(1e-12);
            assert!(rel < 1e-9, "cached logits diverged: {x} vs {y}");
        }
    }

    #[test]
    fn injected_embedding_row_equals_token_path() {
        let model = Model::<f32>::new(small_cfg(4), &[]).unwrap();
        let prefix = vec![3u32, 8, 1];

        let mut t1 = Tape::new();
        let b1 = model.bind_frozen(&mut t1);
        let mut c1 = model.new_cache();
        model.forward_chunk(&mut t1, &b1, &mut c1, &ChunkInput::Tokens(prefix.clone())).unwrap();
        let out_tok = model
            .forward_chunk(&mut t1, &b1, &mut c1, &ChunkInput::Tokens(vec![12]))
            .unwrap();
        let lg_tok = model.logits(&mut t1, &b1, out_tok.final_ln);

        let mut t2 = Tape::new();
        let b2 = model.bind_frozen(&mut t2);
        let mut c2 = model.new_cache();
        model.forward_chunk(&mut t2, &b2, &mut c2, &ChunkInput::Tokens(prefix)).unwrap();
        let row = t2.constant(model.embedding_rows(&[12]));
        let out_inj = model
            .forward_chunk(&mut t2, &b2, &mut c2, &ChunkInput::Vectors(row))
            .unwrap();
        let lg_inj = model.logits(&mut t2, &b2, out_inj.final_ln);

        assert_eq!(t1.value(lg_tok), t2.value(lg_inj), "injection path must be exact");
    }

    #[test]
    fn sequence_overflow_is_an_error() {
        let model = Model::<f32>::new(small_cfg(5), &[]).unwrap();
        let mut tape = Tape::new();
        let b = model.bind_frozen(&mut tape);
        let mut cache = model.new_cache();
        let long = vec![1u32; 33];
        let err = model
            .forward_chunk(&mut tape, &b, &mut cache, &ChunkInput::Tokens(long))
            .unwrap_err();
        assert!(matches!(err, CoreError::SequenceTooLong { len: 33, max: 32 }));
    }

    #[test]
    fn injection_dimension_mismatch_is_an_error() {
        let model = Model::<f32>::new(small_cfg(6), &[]).unwrap();
        let mut tape = Tape::new();
        let b = model.bind_frozen(&mut tape);
        let mut cache = model.new_cache();
        let bad = tape.constant(Array2::zeros((1, 7)));
        let err = model
            .forward_chunk(&mut tape, &b, &mut cache, &ChunkInput::Vectors(bad))
            .unwrap_err();
        assert!(matches!(err, CoreError::BadInjection { got: 7, want: 16 }));
    }

    #[test]
    fn projector_normalizes_at_init() {
        let model = Model::<f64>::new(small_cfg(7), &[]).unwrap();
        let mut tape = Tape::new();
        let b = model.bind_frozen(&mut tape);
        // Scale well above the norm epsilon so the definition, not the
        // guard term, dominates.
        let h = tape.constant(Array2::from_shape_fn((1, 16), |(_, j)| 30.0 * (j as f64) - 100.0));
        let z = model.project_thought(&mut tape, &b, h);
        let zv = tape.value(z);
        assert_eq!(zv.dim(), (1, 16));
        let mean = zv.sum() / 16.0;
        let var = zv.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9, "projector output mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "projector output variance {var}");
    }

    #[test]
    fn tied_head_uses_embedding_table() {
        let mut cfg = small_cfg(8);
        cfg.tied_head = true;
        let model = Model::<f32>::new(cfg, &[]).unwrap();
        assert!(model.params.index_of("head.w").is_none());
        let mut tape = Tape::new();
        let b = model.bind_frozen(&mut tape);
        let mut cache = model.new_cache();
        let out = model
            .forward_chunk(&mut tape, &b, &mut cache, &ChunkInput::Tokens(vec![1, 2]))
            .unwrap();
        let lg = model.logits(&mut tape, &b, out.final_ln);
        assert_eq!(tape.value(lg).dim(), (2, 17));
    }

    #[test]
    fn masked_cross_entropy_rejects_empty_mask() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(Array2::zeros((3, 5)));
        let err = masked_cross_entropy(&mut tape, logits, vec![0, 1, 2], vec![false, false, false])
            .unwrap_err();
        assert!(matches!(err, CoreError::EmptyLossMask));
    }
}
