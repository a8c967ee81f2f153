//! Stable hashing: sentence ids, feature buckets, seed derivation,
//! and content digests.
//!
//! All identifiers that must survive across runs and machines are
//! derived from FNV-1a over well-defined byte sequences, never from
//! `std::hash` (whose output is allowed to change between releases).

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Seeded FNV-1a over a sequence of parts. Each part is terminated by
/// a 0xFF sentinel so that part boundaries are unambiguous.
pub fn fnv1a_seeded(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in &seed.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h ^= 0xFF;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Avalanche finalizer (murmur3 fmix64). FNV-1a disperses poorly in
/// its low bits, so any hash that gets reduced modulo a small table
/// size must pass through this first.
pub fn mix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    h
}

/// Derive a per-stage seed from the single global seed, so stages and
/// encoder specs never share RNG streams by accident.
pub fn derive_seed(global_seed: u64, stage: &str, spec_id: &str) -> u64 {
    mix64(fnv1a_seeded(global_seed, &[stage.as_bytes(), spec_id.as_bytes()]))
}

/// Lowercase hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// SHA-256 digest of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}
