//! Single-file checkpoint format.
//!
//! Layout, in order, all integers little-endian u32 unless noted:
//!
//! 1. magic bytes `BIMODCKP` (8 bytes)
//! 2. format version (u32)
//! 3. config block: u32 byte length, then that many bytes of UTF-8
//!    `key=value` lines (architecture plus preprocessing flags)
//! 4. three symbol tables (words, slot labels, intents): u32 entry count,
//!    then per entry a u32 byte length and the UTF-8 bytes; list position is
//!    the id
//! 5. parameter count (u32), then per parameter: name (u32 length + UTF-8),
//!    rank (u8), each dimension (u32), then the row-major values as raw
//!    little-endian IEEE-754 f32
//!
//! Parameters are written in `BiModel::named_parameters` order and loading
//! requires the exact same names, order, and shapes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BiModel, VocabDims};
use crate::config::{ModelConfig, ModelVariant};
use crate::data::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIMODCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_table<W: Write>(w: &mut W, entries: &[String]) -> io::Result<()> {
    write_u32(w, entries.len() as u32)?;
    for e in entries {
        write_str(w, e)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, CheckpointError> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(CheckpointError::Corrupt(format!(
            "string length {len} is implausible"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn read_table<R: Read>(r: &mut R) -> Result<Vec<String>, CheckpointError> {
    let count = read_u32(r)? as usize;
    if count > 1 << 24 {
        return Err(CheckpointError::Corrupt(format!(
            "symbol table of {count} entries is implausible"
        )));
    }
    (0..count).map(|_| read_str(r)).collect()
}

fn config_to_text(config: &ModelConfig, vocab: &Vocabulary) -> String {
    format!(
        "variant={}\nhidden_dim={}\nnum_layers={}\nembed_dim={}\nlabel_embed_dim={}\ntie_embeddings={}\nshare_states={}\nnormalize_digits={}\n",
        config.variant,
        config.hidden_dim,
        config.num_layers,
        config.embed_dim,
        config.label_embed_dim,
        config.tie_embeddings,
        config.share_states,
        vocab.normalize_digits,
    )
}

fn config_from_text(text: &str) -> Result<(ModelConfig, bool), CheckpointError> {
    let mut config = ModelConfig::default();
    let mut normalize_digits = false;
    let corrupt = |k: &str, v: &str| {
        CheckpointError::Corrupt(format!("config field `{k}` has bad value `{v}`"))
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Corrupt(format!("bad config line `{line}`")))?;
        match key {
            "variant" => {
                config.variant = value
                    .parse::<ModelVariant>()
                    .map_err(|_| corrupt(key, value))?
            }
            "hidden_dim" => config.hidden_dim = value.parse().map_err(|_| corrupt(key, value))?,
            "num_layers" => config.num_layers = value.parse().map_err(|_| corrupt(key, value))?,
            "embed_dim" => config.embed_dim = value.parse().map_err(|_| corrupt(key, value))?,
            "label_embed_dim" => {
                config.label_embed_dim = value.parse().map_err(|_| corrupt(key, value))?
            }
            "tie_embeddings" => {
                config.tie_embeddings = value.parse().map_err(|_| corrupt(key, value))?
            }
            "share_states" => {
                config.share_states = value.parse().map_err(|_| corrupt(key, value))?
            }
            "normalize_digits" => {
                normalize_digits = value.parse().map_err(|_| corrupt(key, value))?
            }
            _ => {
                return Err(CheckpointError::Corrupt(format!(
                    "unknown config field `{key}`"
                )))
            }
        }
    }
    Ok((config, normalize_digits))
}

/// Serialize a trained model and its vocabularies.
pub fn save_checkpoint_to<W: Write>(
    w: &mut W,
    model: &BiModel<f32>,
    vocab: &Vocabulary,
) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    write_str(w, &config_to_text(&model.config, vocab))?;
    write_table(w, vocab.words())?;
    write_table(w, vocab.slot_labels())?;
    write_table(w, vocab.intents())?;

    let params = model.named_parameters();
    write_u32(w, params.len() as u32)?;
    for (name, tensor) in params {
        write_str(w, &name)?;
        let shape = tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for d in &shape {
            write_u32(w, *d as u32)?;
        }
        for v in tensor.to_vec() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &BiModel<f32>,
    vocab: &Vocabulary,
) -> Result<(), CheckpointError> {
    let mut file = BufWriter::new(File::create(path)?);
    save_checkpoint_to(&mut file, model, vocab)?;
    file.flush()?;
    Ok(())
}

/// Rebuild a model and vocabulary from a checkpoint stream.
pub fn load_checkpoint_from<R: Read>(
    r: &mut R,
) -> Result<(BiModel<f32>, Vocabulary), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (config, normalize_digits) = config_from_text(&read_str(r)?)?;
    let words = read_table(r)?;
    let slot_labels = read_table(r)?;
    let intents = read_table(r)?;
    if words.len() < 2 || slot_labels.len() < 2 || intents.is_empty() {
        return Err(CheckpointError::Corrupt(
            "symbol tables are missing reserved entries".into(),
        ));
    }
    let vocab = Vocabulary::from_parts(words, slot_labels, intents, normalize_digits);
    let dims = VocabDims::of(&vocab);
    // Seed is irrelevant: every parameter is overwritten below.
    let model = BiModel::<f32>::new(config, dims, 0);

    let expected = model.named_parameters();
    let count = read_u32(r)? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Corrupt(format!(
            "checkpoint has {count} parameters, architecture needs {}",
            expected.len()
        )));
    }
    for (expect_name, tensor) in expected {
        let name = read_str(r)?;
        if name != expect_name {
            return Err(CheckpointError::Corrupt(format!(
                "parameter `{name}` out of order (expected `{expect_name}`)"
            )));
        }
        let rank = read_u8(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        if shape != tensor.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter `{name}` has shape {shape:?}, architecture needs {:?}",
                tensor.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensor
            .set_data(&values)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    // A well-formed checkpoint ends exactly here.
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt(
            "trailing bytes after the last parameter".into(),
        ));
    }
    Ok((model, vocab))
}

pub fn load_checkpoint(path: &Path) -> Result<(BiModel<f32>, Vocabulary), CheckpointError> {
    let mut file = BufReader::new(File::open(path)?);
    load_checkpoint_from(&mut file)
}
