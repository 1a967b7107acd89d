//! VMAP feature files and dataset directories.
//!
//! A feature file holds one sequence:
//!
//! ```text
//! "VMAP"  u8 version (1)  u32 T  u32 L  u32 label  f32 × T·L
//! ```
//!
//! with little-endian integers and frame-major floats. A dataset directory
//! has one file per sequence under `train/` and `test/` plus a manifest whose
//! lines read `relative/path<TAB>split`, optionally followed by a tab and the
//! per-frame relevance mask as a string of `0`/`1`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Result, TsmError};
use crate::tsm::FeatureSequence;

pub const VMAP_MAGIC: &[u8; 4] = b"VMAP";
pub const VMAP_VERSION: u8 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

const HEADER_LEN: usize = 4 + 1 + 4 * 3;

/// Serialize a sequence. Volume frames are vectorized first; values are
/// narrowed to `f32`.
pub fn encode_feature_file(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let map = seq.to_videomap()?;
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| TsmError::Argument(format!("{what} {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.data().len());
    out.extend_from_slice(VMAP_MAGIC);
    out.push(VMAP_VERSION);
    out.extend_from_slice(&as_u32(map.height(), "T")?.to_le_bytes());
    out.extend_from_slice(&as_u32(map.width(), "L")?.to_le_bytes());
    out.extend_from_slice(&as_u32(seq.label, "label")?.to_le_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_file(bytes: &[u8], id: &str) -> Result<FeatureSequence> {
    if bytes.len() < 4 {
        return Err(TsmError::format(
            0,
            format!("truncated: {} bytes, no magic", bytes.len()),
        ));
    }
    if &bytes[..4] != VMAP_MAGIC {
        return Err(TsmError::format(0, "magic mismatch, expected \"VMAP\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(TsmError::format(
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[4] != VMAP_VERSION {
        return Err(TsmError::format(4, format!("unsupported version {}", bytes[4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (t, l, label) = (word(5), word(9), word(13));
    if t == 0 {
        return Err(TsmError::format(5, "T must be positive"));
    }
    if l == 0 {
        return Err(TsmError::format(9, "inconsistent L: must be positive"));
    }
    let expected = t
        .checked_mul(l)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| TsmError::format(5, "T·L overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(TsmError::format(
            bytes.len() as u64,
            format!(
                "truncated payload: {} of {expected} bytes for T={t}, L={l}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(TsmError::format(
            (HEADER_LEN + expected) as u64,
            format!("inconsistent L: {} bytes beyond T={t}, L={l}", payload.len() - expected),
        ));
    }
    let rows = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureSequence::from_rows(id, label, l, rows)
}

pub fn save_feature_file(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_feature_file(seq)?)?;
    Ok(())
}

/// Read one sequence; its id is the file stem.
pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("sequence");
    decode_feature_file(&fs::read(path)?, id)
}

fn mask_string(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Write a dataset directory. An existing manifest is only replaced with `force`.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset, force: bool) -> Result<()> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST_NAME);
    let occupied = manifest.exists() || dir.join("train").exists() || dir.join("test").exists();
    if occupied {
        if !force {
            return Err(TsmError::Argument(format!(
                "{} already holds a dataset; pass force to overwrite",
                dir.display()
            )));
        }
        for sub in ["train", "test"] {
            let p = dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(p)?;
            }
        }
        if manifest.exists() {
            fs::remove_file(&manifest)?;
        }
    }
    let mut lines = String::new();
    for (split, items) in [("train", &dataset.train), ("test", &dataset.test)] {
        fs::create_dir_all(dir.join(split))?;
        for seq in items.iter() {
            let rel = format!("{split}/{}.vmap", seq.id);
            save_feature_file(dir.join(&rel), seq)?;
            write!(lines, "{rel}\t{split}").expect("string write");
            if let Some(mask) = &seq.relevance {
                write!(lines, "\t{}", mask_string(mask)).expect("string write");
            }
            lines.push('\n');
        }
    }
    fs::write(manifest, lines)?;
    Ok(())
}

/// Read a dataset directory through its manifest.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut dataset = Dataset::default();
    let mut offset = 0u64;
    for line in text.lines() {
        let line_at = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let rel = fields.next().unwrap_or_default();
        let split = fields
            .next()
            .ok_or_else(|| TsmError::format(line_at, format!("manifest line {line:?} lacks a split")))?;
        let mut seq = load_feature_file(dir.join(rel)).map_err(|e| match e {
            TsmError::Format { offset, message } => TsmError::Format {
                offset,
                message: format!("{rel}: {message}"),
            },
            other => other,
        })?;
        if let Some(mask) = fields.next() {
            let bits = mask
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(TsmError::format(line_at, format!("bad relevance mask for {rel}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            seq = seq
                .with_relevance(bits)
                .map_err(|e| TsmError::format(line_at, e.to_string()))?;
        }
        match split {
            "train" => dataset.train.push(seq),
            "test" => dataset.test.push(seq),
            other => return Err(TsmError::format(line_at, format!("unknown split {other:?}"))),
        }
    }
    Ok(dataset)
}
