//! Little-endian binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "AMPVIT\0\0"
//! version      u32      1
//! summary      u32 length + UTF-8 text (human-readable config line)
//! config       u32 × 8  image_size patch_size in_channels embed_dim
//!                       num_blocks num_heads mlp_hidden num_classes
//!              f64      ln_eps
//!              u32 × L  per_block_hidden
//! tensors      u32 count, then per tensor in declaration order:
//!              u32 rank, u64 × rank dims, f64 × numel data
//! ```
//!
//! Loading validates every tensor shape against the config, so a pruned
//! model comes back with its reduced widths or not at all.

use std::fs;
use std::io::{self, Cursor, Read};
use std::path::Path;

use crate::error::{AmpError, Result};
use crate::model::{Block, LayerNormParams, Linear, ModelConfig, VitModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AMPVIT\0\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &VitModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let summary = cfg.summary();
    put_u32(&mut out, summary.len());
    out.extend_from_slice(summary.as_bytes());
    for v in [
        cfg.image_size,
        cfg.patch_size,
        cfg.in_channels,
        cfg.embed_dim,
        cfg.num_blocks,
        cfg.num_heads,
        cfg.mlp_hidden,
        cfg.num_classes,
    ] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&cfg.ln_eps.to_le_bytes());
    for &m in &cfg.per_block_hidden {
        put_u32(&mut out, m);
    }
    let tensors = model.tensors();
    put_u32(&mut out, tensors.len());
    for t in tensors {
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<VitModel> {
    from_reader(bytes).map_err(|e| match e {
        ReadError::Io(err) => AmpError::io("<checkpoint>", err),
        ReadError::Amp(err) => err,
    })
}

pub fn save_checkpoint(model: &VitModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| AmpError::io(path, e))
}

/// Reads a checkpoint; nothing is returned unless the whole file parses.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VitModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| AmpError::io(path, e))?;
    from_reader(&bytes).map_err(|e| match e {
        ReadError::Io(err) => AmpError::io(path, err),
        ReadError::Amp(err) => err,
    })
}

enum ReadError {
    Io(io::Error),
    Amp(AmpError),
}

impl From<io::Error> for ReadError {
    fn from(e: io::Error) -> Self {
        ReadError::Io(e)
    }
}

impl From<AmpError> for ReadError {
    fn from(e: AmpError) -> Self {
        ReadError::Amp(e)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn get_u32(r: &mut impl Read) -> io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn from_reader(bytes: &[u8]) -> std::result::Result<VitModel, ReadError> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AmpError::Format(format!("bad magic {magic:?}")).into());
    }
    let version = get_u32(&mut r)? as u32;
    if version != VERSION {
        return Err(AmpError::Format(format!("unsupported version {version}")).into());
    }
    let summary_len = get_u32(&mut r)?;
    if summary_len > bytes.len() {
        return Err(AmpError::Format("summary length exceeds file size".into()).into());
    }
    let mut summary = vec![0u8; summary_len];
    r.read_exact(&mut summary)?;

    let mut fields = [0usize; 8];
    for f in &mut fields {
        *f = get_u32(&mut r)?;
    }
    let ln_eps = f64::from_bits(get_u64(&mut r)?);
    let [image_size, patch_size, in_channels, embed_dim, num_blocks, num_heads, mlp_hidden, num_classes] = fields;
    if num_blocks > bytes.len() {
        return Err(AmpError::Format(format!("implausible block count {num_blocks}")).into());
    }
    let mut per_block_hidden = Vec::with_capacity(num_blocks);
    for _ in 0..num_blocks {
        per_block_hidden.push(get_u32(&mut r)?);
    }
    let config = ModelConfig {
        image_size,
        patch_size,
        in_channels,
        embed_dim,
        num_blocks,
        num_heads,
        mlp_hidden,
        per_block_hidden,
        num_classes,
        ln_eps,
    };
    config
        .validate()
        .map_err(|e| AmpError::Format(format!("invalid config record: {e}")))?;

    let expected = VitModel::expected_shapes(&config);
    let count = get_u32(&mut r)?;
    if count != expected.len() {
        return Err(AmpError::Format(format!("{count} tensors stored, config implies {}", expected.len())).into());
    }
    let mut tensors = Vec::with_capacity(count);
    for (i, want) in expected.iter().enumerate() {
        let rank = get_u32(&mut r)?;
        if rank != want.len() {
            return Err(AmpError::Format(format!("tensor {i}: rank {rank}, expected {}", want.len())).into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u64(&mut r)? as usize);
        }
        if &shape != want {
            return Err(AmpError::Format(format!("tensor {i}: shape {shape:?}, expected {want:?}")).into());
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(get_u64(&mut r)?));
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(AmpError::Format("trailing bytes after last tensor".into()).into());
    }
    Ok(assemble(config, tensors))
}

fn assemble(config: ModelConfig, tensors: Vec<Tensor>) -> VitModel {
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("tensor count checked");
    let linear = |next: &mut dyn FnMut() -> Tensor| Linear {
        weight: next(),
        bias: next(),
    };
    let patch_embed = linear(&mut next);
    let cls_token = next();
    let pos_embed = next();
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for _ in 0..config.num_blocks {
        let ln1 = LayerNormParams {
            gain: next(),
            bias: next(),
        };
        let q = linear(&mut next);
        let k = linear(&mut next);
        let v = linear(&mut next);
        let proj = linear(&mut next);
        let ln2 = LayerNormParams {
            gain: next(),
            bias: next(),
        };
        let fc1 = linear(&mut next);
        let fc2 = linear(&mut next);
        blocks.push(Block {
            ln1,
            q,
            k,
            v,
            proj,
            ln2,
            fc1,
            fc2,
        });
    }
    let norm = LayerNormParams {
        gain: next(),
        bias: next(),
    };
    let classifier = (config.num_classes > 0).then(|| linear(&mut next));
    VitModel {
        config,
        patch_embed,
        cls_token,
        pos_embed,
        blocks,
        norm,
        classifier,
    }
}
