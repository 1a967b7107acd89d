//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TSMC"                 magic
//! u32                    format version
//! u32 + bytes            config block, UTF-8 `key=value` lines in fixed order
//! u32                    parameter count
//!   u16 + bytes          parameter name
//!   u32, u32 × rank      shape
//!   f64 × numel          values, row-major
//! u8                     1 if a training state follows, else 0
//!   u64, u64             iteration, epoch
//!   f64 × numel          momentum buffer for each parameter, same order and shapes
//! ```

use std::path::Path;

use super::{AttentionLevels, HeadModel, ModelConfig, Param};
use crate::error::{Result, TsmError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer progress stored next to the parameters so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub iteration: u64,
    pub epoch: u64,
    pub velocity: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: HeadModel,
    pub state: Option<TrainingState>,
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn config_block(c: &ModelConfig) -> String {
    format!(
        "t_fixed={}\nfeature_dim={}\nnum_classes={}\nwidths={}\nattention_widths={}\nattention={}\nseed={}\n",
        c.t_fixed,
        c.feature_dim,
        c.num_classes,
        join(&c.widths),
        join(&c.attention_widths),
        c.attention,
        c.seed
    )
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = config_block(self.model.config());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            let name = p.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| TsmError::Argument(format!("parameter name too long: {}", p.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            write_f64s(&mut out, p.tensor.data());
        }
        match &self.state {
            None => out.push(0),
            Some(state) => {
                if state.velocity.len() != params.len()
                    || state
                        .velocity
                        .iter()
                        .zip(params)
                        .any(|(v, p)| v.shape() != p.tensor.shape())
                {
                    return Err(TsmError::dim("checkpoint", "momentum buffers do not match parameters"));
                }
                out.push(1);
                out.extend_from_slice(&state.iteration.to_le_bytes());
                out.extend_from_slice(&state.epoch.to_le_bytes());
                for v in &state.velocity {
                    write_f64s(&mut out, v.data());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TsmError::format(0, "not a checkpoint (magic mismatch)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TsmError::format(4, format!("unsupported checkpoint version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config_at = r.pos;
        let text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| TsmError::format(config_at as u64, "config block is not UTF-8"))?;
        let config = parse_config(text).map_err(|m| TsmError::format(config_at as u64, m))?;

        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TsmError::format(name_at as u64, "parameter name is not UTF-8"))?
                .to_owned();
            let shape_at = r.pos;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(TsmError::format(shape_at as u64, format!("bad rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let tensor = r.tensor(shape, shape_at)?;
            params.push(Param { name, tensor });
        }
        let model =
            HeadModel::from_params(config, params).map_err(|e| TsmError::format(config_at as u64, e.to_string()))?;

        let flag_at = r.pos;
        let state = match r.take(1)?[0] {
            0 => None,
            1 => {
                let iteration = r.u64()?;
                let epoch = r.u64()?;
                let velocity = model
                    .params()
                    .iter()
                    .map(|p| {
                        let at = r.pos;
                        r.tensor(p.tensor.shape().to_vec(), at)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(TrainingState {
                    iteration,
                    epoch,
                    velocity,
                })
            }
            other => {
                return Err(TsmError::format(
                    flag_at as u64,
                    format!("bad training-state flag {other}"),
                ))
            }
        };
        if r.pos != bytes.len() {
            return Err(TsmError::format(r.pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(Self { model, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_config(text: &str) -> std::result::Result<ModelConfig, String> {
    let mut config = ModelConfig::default();
    let mut seen = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("malformed config line {line:?}"))?;
        let usize_of = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{key}: {e}"));
        let list = |v: &str| -> std::result::Result<Vec<usize>, String> { v.split(',').map(usize_of).collect() };
        match key {
            "t_fixed" => config.t_fixed = usize_of(value)?,
            "feature_dim" => config.feature_dim = usize_of(value)?,
            "num_classes" => config.num_classes = usize_of(value)?,
            "widths" => {
                config.widths = list(value)?
                    .try_into()
                    .map_err(|_| "widths needs three entries".to_string())?
            }
            "attention_widths" => {
                config.attention_widths = list(value)?
                    .try_into()
                    .map_err(|_| "attention_widths needs two entries".to_string())?
            }
            "attention" => config.attention = value.parse::<AttentionLevels>().map_err(|e| e.to_string())?,
            "seed" => config.seed = value.trim().parse().map_err(|e| format!("seed: {e}"))?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        seen.push(key);
    }
    for required in [
        "t_fixed",
        "feature_dim",
        "num_classes",
        "widths",
        "attention_widths",
        "attention",
        "seed",
    ] {
        if !seen.contains(&required) {
            return Err(format!("config block missing {required}"));
        }
    }
    Ok(config)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                TsmError::format(
                    self.pos as u64,
                    format!("truncated: needed {n} bytes, {} left", self.bytes.len() - self.pos),
                )
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: Vec<usize>, at: usize) -> Result<Tensor> {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| TsmError::format(at as u64, format!("bad shape {shape:?}")))?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| TsmError::format(at as u64, "shape overflow"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| TsmError::format(at as u64, e.to_string()))
    }
}
