//! Binary bank file: magic, seven little-endian `u32` header fields,
//! `f32` trajectories, `f32` embeddings, then a CRC32 of everything before it.

use std::path::Path;

use super::{BuildMode, MotionBank};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BANK_MAGIC: &[u8; 8] = b"R2PBANK1";
const HEADER_FIELDS: usize = 7;
const HEADER_LEN: usize = 8 + 4 * HEADER_FIELDS;

pub fn encode_bank(bank: &MotionBank) -> Vec<u8> {
    let b = bank.len();
    let payload = 4 * (bank.trajectories.len() + bank.embeddings.len());
    let mut out = Vec::with_capacity(HEADER_LEN + payload + 4);
    out.extend_from_slice(BANK_MAGIC);
    for v in [b, bank.t_fut, bank.d_emb(), bank.n_clusters, bank.n_elements] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&bank.build_mode.code().to_le_bytes());
    out.extend_from_slice(&bank.projection_seed.to_le_bytes());
    for &x in bank.trajectories.data().iter().chain(bank.embeddings.data()) {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
}

fn f32_block(bytes: &[u8], off: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| f64::from(f32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().expect("4 bytes")))).collect()
}

pub fn decode_bank(bytes: &[u8]) -> Result<MotionBank> {
    if bytes.len() < 8 || &bytes[..8] != BANK_MAGIC {
        return Err(Error::Format("bad magic, not a bank file".into()));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Corruption("truncated header".into()));
    }
    let h: Vec<usize> = (0..HEADER_FIELDS).map(|i| u32_at(bytes, 8 + 4 * i) as usize).collect();
    let (b, t_fut, d_emb, n_clusters, n_elements) = (h[0], h[1], h[2], h[3], h[4]);
    let expected = HEADER_LEN + 4 * b * (2 * t_fut + d_emb) + 4;
    if bytes.len() != expected {
        return Err(Error::Corruption(format!("header implies {expected} bytes, file has {}", bytes.len())));
    }
    let body = bytes.len() - 4;
    let stored = u32_at(bytes, body);
    let actual = crc32fast::hash(&bytes[..body]);
    if stored != actual {
        return Err(Error::Corruption(format!("checksum {actual:08x} does not match stored {stored:08x}")));
    }
    let build_mode = BuildMode::from_code(h[5] as u32).ok_or_else(|| Error::Format(format!("unknown build mode {}", h[5])))?;
    let traj = f32_block(bytes, HEADER_LEN, b * 2 * t_fut);
    let emb = f32_block(bytes, HEADER_LEN + 4 * b * 2 * t_fut, b * d_emb);
    let bank = MotionBank {
        trajectories: Tensor::from_vec(b, 2 * t_fut, traj),
        embeddings: Tensor::from_vec(b, d_emb, emb),
        t_fut,
        n_clusters,
        n_elements,
        build_mode,
        projection_seed: h[6] as u32,
    };
    bank.validate()?;
    Ok(bank)
}

pub fn write_bank(path: impl AsRef<Path>, bank: &MotionBank) -> Result<()> {
    std::fs::write(path, encode_bank(bank))?;
    Ok(())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<MotionBank> {
    decode_bank(&std::fs::read(path)?)
}
