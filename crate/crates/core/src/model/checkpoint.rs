//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `TAGRECKP` |
//! | 4 | format version (`u32`) |
//! | 4 | config JSON length `n` (`u32`) |
//! | n | model config as JSON |
//! | 32 | SHA-256 of the config JSON |
//! | 32 | SHA-256 of the tag vocabulary's canonical JSON |
//! | 8 | tensor count `t` (`u64`) |
//! | per tensor | `u64` element count, then that many `f32` values |
//!
//! Tensors appear in the model's parameter order: each encoder (one per
//! component in title, description, code order, or a single shared one)
//! in the order documented on [`Encoder`](crate::encoder::Encoder), then
//! `classifier.weight` (`[L, C*d]`) and `classifier.bias` (`[L]`).

use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelConfig, ModelError, TripletModel};
use crate::vocab::TagVocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TAGRECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint config hash mismatch (file is corrupt)")]
    ConfigHashMismatch,
    #[error("checkpoint was saved with a different tag vocabulary")]
    VocabHashMismatch,
    #[error("checkpoint parameters do not match its config: {0}")]
    ParamMismatch(String),
    #[error("unexpected trailing bytes after checkpoint data")]
    TrailingData,
    #[error("invalid checkpoint config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

pub fn write_checkpoint<W: Write>(model: &TripletModel<f32>, mut out: W) -> Result<(), CheckpointError> {
    let config = serde_json::to_vec(model.config()).map_err(|e| CheckpointError::Config(e.to_string()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(&config)?;
    out.write_all(&Sha256::digest(&config))?;
    out.write_all(&vocab_digest(model.vocab()))?;
    let tensors = model.params().tensors();
    out.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.numel() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &TripletModel<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path).map_err(CheckpointError::Io)?;
    write_checkpoint(model, io::BufWriter::new(file))
}

fn vocab_digest(vocab: &TagVocabulary) -> [u8; 32] {
    let bytes = serde_json::to_vec(vocab).expect("vocabulary serializes");
    Sha256::digest(&bytes).into()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint and binds it to `vocab`, which must be the vocabulary
/// the model was trained with.
pub fn read_checkpoint<R: Read>(mut input: R, vocab: &TagVocabulary) -> Result<TripletModel<f32>, CheckpointError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let len = read_u32(&mut input)? as usize;
    let mut config_bytes = Vec::new();
    input.by_ref().take(len as u64).read_to_end(&mut config_bytes)?;
    if config_bytes.len() != len {
        return Err(CheckpointError::Truncated);
    }
    let mut hash = [0u8; 32];
    input.read_exact(&mut hash)?;
    if hash[..] != Sha256::digest(&config_bytes)[..] {
        return Err(CheckpointError::ConfigHashMismatch);
    }
    input.read_exact(&mut hash)?;
    if hash != vocab_digest(vocab) {
        return Err(CheckpointError::VocabHashMismatch);
    }
    let config: ModelConfig =
        serde_json::from_slice(&config_bytes).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut model = TripletModel::<f32>::new(config, vocab.clone())?;

    let count = read_u64(&mut input)? as usize;
    if count != model.params().len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "file has {count} tensors, config implies {}",
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    let mut buf = Vec::new();
    for id in ids {
        let numel = read_u64(&mut input)? as usize;
        let expected = model.params().get(id).numel();
        if numel != expected {
            return Err(CheckpointError::ParamMismatch(format!(
                "{}: {numel} values, expected {expected}",
                model.params().name(id)
            )));
        }
        buf.resize(numel * 4, 0);
        input.read_exact(&mut buf)?;
        let dst = model.params_mut().get_mut(id).data_mut();
        for (d, chunk) in dst.iter_mut().zip(buf.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(CheckpointError::TrailingData);
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>, vocab: &TagVocabulary) -> Result<TripletModel<f32>, CheckpointError> {
    let file = std::fs::File::open(path).map_err(CheckpointError::Io)?;
    read_checkpoint(io::BufReader::new(file), vocab)
}
