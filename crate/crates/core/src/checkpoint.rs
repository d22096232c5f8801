//! Checkpoint files: a small binary container holding the model config, a
//! JSON header describing the named parameter arrays, the raw parameter
//! bytes, and (optionally) AdamW moments so training can resume mid-run.
//!
//! Values are written as little-endian f64 regardless of training precision;
//! f32 state round-trips through f64 exactly, so `load(save(m)) == m`
//! bit-for-bit.

use crate::error::{CoreError, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::optim::AdamW;
use crate::tape::Float;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CODICKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Global optimizer steps completed.
    pub step: u64,
    /// Training method tag (`codi`, `cot-sft`, ...), informational.
    pub method: String,
    /// Latent budget the checkpoint was trained with (0 for baselines).
    pub num_latent: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<(String, usize, usize)>,
    has_opt: bool,
    opt_step: u64,
}

fn write_array<F: Float, W: Write>(w: &mut W, a: &ndarray::Array2<F>) -> Result<()> {
    for &x in a.iter() {
        w.write_all(&x.to_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_array<F: Float, R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<ndarray::Array2<F>> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let mut a = ndarray::Array2::zeros((rows, cols));
    for (i, x) in a.iter_mut().enumerate() {
        let mut b = [0u8; 8];
        b.copy_from_slice(&buf[i * 8..i * 8 + 8]);
        *x = F::from_f64(f64::from_le_bytes(b));
    }
    Ok(a)
}

pub fn save<F: Float>(
    path: &Path,
    model: &Model<F>,
    opt: Option<&AdamW<F>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let header = Header {
        config: model.cfg.clone(),
        meta: meta.clone(),
        params: model
            .params
            .names
            .iter()
            .zip(&model.params.arrays)
            .map(|(n, a)| (n.clone(), a.nrows(), a.ncols()))
            .collect(),
        has_opt: opt.is_some(),
        opt_step: opt.map_or(0, |o| o.step),
    };
    let hjson = serde_json::to_vec(&header)?;
    w.write_all(&(hjson.len() as u64).to_le_bytes())?;
    w.write_all(&hjson)?;

    for a in &model.params.arrays {
        write_array(&mut w, a)?;
    }
    if let Some(o) = opt {
        for a in &o.m {
            write_array(&mut w, a)?;
        }
        for a in &o.v {
            write_array(&mut w, a)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<F: Float>(path: &Path) -> Result<(Model<F>, Option<AdamW<F>>, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::BadCheckpoint("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(CoreError::CheckpointVersion(version));
    }
    let mut lb = [0u8; 8];
    r.read_exact(&mut lb)?;
    let hlen = u64::from_le_bytes(lb) as usize;
    if hlen > 1 << 24 {
        return Err(CoreError::BadCheckpoint("oversized header".into()));
    }
    let mut hjson = vec![0u8; hlen];
    r.read_exact(&mut hjson)?;
    let header: Header =
        serde_json::from_slice(&hjson).map_err(|e| CoreError::BadCheckpoint(e.to_string()))?;

    // Rebuild through Model::new so shapes, names, and decay flags come from
    // one place; then overwrite the arrays with the stored bytes.
    let template = Model::<F>::new(header.config.clone(), &[])?;
    let expect: Vec<(String, usize, usize)> = template
        .params
        .names
        .iter()
        .zip(&template.params.arrays)
        .map(|(n, a)| (n.clone(), a.nrows(), a.ncols()))
        .collect();
    if expect != header.params {
        return Err(CoreError::BadCheckpoint("parameter list mismatch".into()));
    }

    let mut params = Params {
        names: template.params.names.clone(),
        arrays: Vec::with_capacity(expect.len()),
        decay: template.params.decay.clone(),
    };
    for (_, rows, cols) in &header.params {
        params.arrays.push(read_array(&mut r, *rows, *cols)?);
    }
    let model = Model::from_params(header.config, params)?;

    let opt = if header.has_opt {
        let mut m = Vec::with_capacity(expect.len());
        for (_, rows, cols) in &header.params {
            m.push(read_array(&mut r, *rows, *cols)?);
        }
        let mut v = Vec::with_capacity(expect.len());
        for (_, rows, cols) in &header.params {
            v.push(read_array(&mut r, *rows, *cols)?);
        }
        Some(AdamW { m, v, step: header.opt_step })
    } else {
        None
    };

    Ok((model, opt, header.meta))
}
