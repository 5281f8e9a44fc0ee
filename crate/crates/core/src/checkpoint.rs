//! MGRU checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "MGRU" | u32 version = 1 | u32 d_img | u32 h | u32 N₀ | u8 stack_kind | u32 layer_count
//! u32 token_count | token_count × (u16 len | UTF-8 bytes)        index order
//! u32 tensor_count | tensor_count × (u16 name_len | name | u32 rows | u32 cols | rows·cols × f64)
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Tensor data is stored as `f64` so that a save/load round trip reproduces
//! the in-memory parameters bit for bit.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gru::StackKind;
use crate::model::{ModelDims, ModelParams};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGRU";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams, vocab: &Vocabulary) -> Result<Vec<u8>> {
    params.check_shapes()?;
    let dims = params.dims();
    if dims.vocab_size != vocab.len() {
        return Err(Error::Format(format!(
            "model vocabulary size {} does not match vocabulary of {} tokens",
            dims.vocab_size,
            vocab.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, to_u32(dims.feature_dim)?);
    put_u32(&mut out, to_u32(dims.hidden)?);
    put_u32(&mut out, to_u32(dims.vocab_size)?);
    out.push(dims.stack.code());
    put_u32(&mut out, to_u32(params.layers.len())?);

    put_u32(&mut out, to_u32(vocab.len())?);
    for tok in vocab.tokens() {
        put_str(&mut out, tok)?;
    }

    let specs = params.tensor_specs();
    put_u32(&mut out, to_u32(specs.len())?);
    for (spec, data) in specs.iter().zip(params.tensor_data()) {
        put_str(&mut out, &spec.name)?;
        put_u32(&mut out, to_u32(spec.rows)?);
        put_u32(&mut out, to_u32(spec.cols)?);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, Vocabulary)> {
    if bytes.len() < 8 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);

    let mut r = Cursor::new(body);
    r.set_position(4);
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let feature_dim = get_u32(&mut r)? as usize;
    let hidden = get_u32(&mut r)? as usize;
    let vocab_size = get_u32(&mut r)? as usize;
    let mut code = [0u8; 1];
    read_exact(&mut r, &mut code)?;
    let stack = StackKind::from_code(code[0])
        .ok_or_else(|| Error::Format(format!("unknown stack kind code {}", code[0])))?;
    let layer_count = get_u32(&mut r)? as usize;
    if layer_count != stack.layer_count() {
        return Err(Error::Format(format!(
            "{stack} stack stored with {layer_count} layers"
        )));
    }

    let token_count = get_u32(&mut r)? as usize;
    if token_count != vocab_size {
        return Err(Error::Format(format!(
            "header N₀ = {vocab_size} but vocabulary block has {token_count} tokens"
        )));
    }
    let tokens = (0..token_count)
        .map(|_| get_str(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens)?;

    let mut params = ModelParams::zeros(ModelDims {
        feature_dim,
        hidden,
        vocab_size,
        stack,
    });
    let specs = params.tensor_specs();
    let tensor_count = get_u32(&mut r)? as usize;
    if tensor_count != specs.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {tensor_count}",
            specs.len()
        )));
    }
    for (spec, dst) in specs.iter().zip(params.tensor_data_mut()) {
        let name = get_str(&mut r)?;
        let rows = get_u32(&mut r)? as usize;
        let cols = get_u32(&mut r)? as usize;
        if name != spec.name || rows != spec.rows || cols != spec.cols {
            return Err(Error::Format(format!(
                "tensor {name} {rows}x{cols} does not match expected {} {}x{}",
                spec.name, spec.rows, spec.cols
            )));
        }
        let mut buf = [0u8; 8];
        for d in dst.iter_mut() {
            read_exact(&mut r, &mut buf)?;
            *d = f64::from_le_bytes(buf);
        }
    }
    if (r.position() as usize) != body.len() {
        return Err(Error::Format("trailing bytes after tensor blocks".into()));
    }
    params.check_shapes()?;
    Ok((params, vocab))
}

pub fn save_checkpoint(params: &ModelParams, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(params, vocab)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, Vocabulary)> {
    decode_checkpoint(&fs::read(path)?)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("string too long: {s:?}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    let mut s = vec![0u8; u16::from_le_bytes(b) as usize];
    read_exact(r, &mut s)?;
    String::from_utf8(s).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
}
