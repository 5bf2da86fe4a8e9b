//! Binary model checkpoints: a magic header, a JSON config block, then
//! length-prefixed named f64 tensors (parameters and norm running stats).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::{EncoderConfig, PylonConfig, VariantKind};
use crate::error::{PylonError, Result};
use crate::tensor::ops::PadMode;
use crate::tensor::Tensor4;

const MAGIC: &[u8; 4] = b"PYLN";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointConfig {
    kind: VariantKind,
    enc_cfg: EncoderConfig,
    pylon_cfg: PylonConfig,
    pad_mode: PadMode,
    seed: u64,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_record(w: &mut impl Write, name: &str, t: &Tensor4) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[DTYPE_F64])?;
    for d in [t.n, t.c, t.h, t.w] {
        write_u32(w, d as u32)?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_record(r: &mut impl Read) -> Result<(String, Tensor4)> {
    let name_len = read_u32(r)? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| PylonError::Checkpoint("record name is not valid UTF-8".into()))?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    if tag[0] != DTYPE_F64 {
        return Err(PylonError::Checkpoint(format!(
            "record `{name}`: unknown dtype tag {}",
            tag[0]
        )));
    }
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = read_u32(r)? as usize;
    }
    let count = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let t = Tensor4::from_vec(shape[0], shape[1], shape[2], shape[3], data)
        .map_err(|e| PylonError::Checkpoint(format!("record `{name}`: {e}")))?;
    Ok((name, t))
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        let cfg = CheckpointConfig {
            kind: self.kind,
            enc_cfg: self.enc_cfg.clone(),
            pylon_cfg: self.pylon_cfg.clone(),
            pad_mode: self.pad_mode,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&cfg)
            .map_err(|e| PylonError::Checkpoint(format!("config serialization: {e}")))?;
        write_u32(&mut w, json.len() as u32)?;
        w.write_all(&json)?;

        let n_records = self.params().len() + 2 * self.bn_stats().len();
        write_u32(&mut w, n_records as u32)?;
        for p in self.params() {
            write_record(&mut w, &p.name, &p.value)?;
        }
        for (i, st) in self.bn_stats().iter().enumerate() {
            write_record(&mut w, &format!("bn_stats.{i}.mean"), &Tensor4::channel_vec(st.mean.clone()))?;
            write_record(&mut w, &format!("bn_stats.{i}.var"), &Tensor4::channel_vec(st.var.clone()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PylonError::Checkpoint(format!(
                "bad magic {magic:?}; not a model checkpoint"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(PylonError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let json_len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let cfg: CheckpointConfig = serde_json::from_slice(&json)
            .map_err(|e| PylonError::Checkpoint(format!("config block: {e}")))?;

        let mut model = Model::build_with_pad(
            cfg.kind,
            cfg.enc_cfg,
            cfg.pylon_cfg,
            cfg.seed,
            cfg.pad_mode,
        )?;

        let n_records = read_u32(&mut r)? as usize;
        let mut seen = 0usize;
        for _ in 0..n_records {
            let (name, value) = read_record(&mut r)?;
            if let Some(rest) = name.strip_prefix("bn_stats.") {
                let (idx_str, field) = rest
                    .split_once('.')
                    .ok_or_else(|| PylonError::Checkpoint(format!("malformed record `{name}`")))?;
                let idx: usize = idx_str
                    .parse()
                    .map_err(|_| PylonError::Checkpoint(format!("malformed record `{name}`")))?;
                let stats = model.bn_stats_mut();
                if idx >= stats.len() {
                    return Err(PylonError::Checkpoint(format!(
                        "running-stat index {idx} out of range"
                    )));
                }
                match field {
                    "mean" => stats[idx].mean = value.data,
                    "var" => stats[idx].var = value.data,
                    _ => {
                        return Err(PylonError::Checkpoint(format!("malformed record `{name}`")))
                    }
                }
            } else {
                model.set_param_by_name(&name, value)?;
                seen += 1;
            }
        }
        if seen != model.params().len() {
            return Err(PylonError::Checkpoint(format!(
                "checkpoint holds {seen} parameter records, model expects {}",
                model.params().len()
            )));
        }
        Ok(model)
    }
}
