//! Flat `key = value` config files layered over the built-in defaults.
//! Keys mirror the training-config field names; lines starting with `#`
//! and blank lines are ignored. Unknown keys or malformed values are
//! usage errors.

use codi_core::codi::{CodiConfig, TeacherMode};
use codi_core::Distance;

pub fn parse_config(text: &str, cfg: &mut CodiConfig) -> Result<(), String> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))?;
        apply(cfg, key.trim(), value.trim())
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
}

pub fn parse_distance(value: &str) -> Result<Distance, String> {
    match value {
        "l1" => Ok(Distance::L1),
        "smooth-l1" => Ok(Distance::SmoothL1),
        other => Err(format!("unknown distance {other:?} (l1 | smooth-l1)")),
    }
}

pub fn parse_teacher_mode(value: &str) -> Result<TeacherMode, String> {
    match value {
        "shared" => Ok(TeacherMode::Shared),
        "separate" => Ok(TeacherMode::Separate),
        other => Err(format!("unknown teacher_mode {other:?} (shared | separate)")),
    }
}

fn apply(cfg: &mut CodiConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "hidden_dim" => cfg.model.hidden_dim = parse(key, value)?,
        "num_layers" => cfg.model.num_layers = parse(key, value)?,
        "num_heads" => cfg.model.num_heads = parse(key, value)?,
        "vocab_size" => cfg.model.vocab_size = parse(key, value)?,
        "max_seq_len" => cfg.model.max_seq_len = parse(key, value)?,
        "tied_head" => cfg.model.tied_head = parse(key, value)?,
        "model_seed" => cfg.model.seed = parse(key, value)?,
        // One seed steers both the data order and the initialization
        // unless model_seed overrides the latter.
        "seed" => {
            cfg.seed = parse(key, value)?;
            cfg.model.seed = cfg.seed;
        }
        "num_latent" => cfg.num_latent = parse(key, value)?,
        "alpha" => cfg.alpha = parse(key, value)?,
        "beta" => cfg.beta = parse(key, value)?,
        "gamma" => cfg.gamma = parse(key, value)?,
        "distance" => cfg.distance = parse_distance(value)?,
        "normalize_by_teacher_std" => cfg.normalize_by_teacher_std = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "peak_lr" => cfg.peak_lr = parse(key, value)?,
        "total_steps" => cfg.total_steps = parse(key, value)?,
        "keep_final_step" => cfg.keep_final_step = parse(key, value)?,
        "use_projection" => cfg.use_projection = parse(key, value)?,
        "teacher_mode" => cfg.teacher_mode = parse_teacher_mode(value)?,
        "multitask_student" => cfg.multitask_student = parse(key, value)?,
        "eval_every" => cfg.eval_every = parse(key, value)?,
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_over_defaults_and_rejects_unknown_keys() {
        let mut cfg = CodiConfig::default();
        parse_config(
            "# comment\n\nseed = 7\nbeta = 0\nnum_latent = 3\ndistance = l1\nteacher_mode = separate\n",
            &mut cfg,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.seed, 7);
        assert_eq!(cfg.beta, 0.0);
        assert_eq!(cfg.num_latent, 3);
        assert_eq!(cfg.distance, Distance::L1);
        assert_eq!(cfg.teacher_mode, TeacherMode::Separate);

        let mut cfg = CodiConfig::default();
        assert!(parse_config("bogus = 1\n", &mut cfg).is_err());
        assert!(parse_config("beta\n", &mut cfg).is_err());
        assert!(parse_config("beta = x\n", &mut cfg).is_err());
    }

    #[test]
    fn model_seed_can_diverge_from_data_seed() {
        let mut cfg = CodiConfig::default();
        parse_config("seed = 3\nmodel_seed = 9\n", &mut cfg).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.seed, 9);
    }
}
