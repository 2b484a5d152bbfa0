//! Encryption parameter selection from a multiplicative level.

use serde::{Deserialize, Serialize};

use crate::error::{HeError, Result};

pub const DEFAULT_SCALE_BITS: u32 = 33;
pub const MAX_LEVEL: usize = 40;

/// Largest total modulus (bits) admitted at 128-bit security, per
/// polynomial degree.
pub const MAX_Q_BITS_128: [(usize, u32); 4] = [(1 << 13, 218), (1 << 14, 438), (1 << 15, 881), (1 << 16, 1761)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptionProfile {
    pub n: usize,
    pub q_bits: u32,
    pub scale_bits: u32,
    pub base_bits: u32,
    pub levels: usize,
    pub security: u32,
}

impl EncryptionProfile {
    pub fn slots(&self) -> usize {
        self.n / 2
    }
}

/// Picks the smallest degree whose bound admits `Q = q0 + p * L`.
pub fn select_parameters(levels: usize, base_bits: u32, scale_bits: u32) -> Result<EncryptionProfile> {
    select_with_bounds(levels, base_bits, scale_bits, &MAX_Q_BITS_128)
}

pub fn select_with_bounds(
    levels: usize,
    base_bits: u32,
    scale_bits: u32,
    bounds: &[(usize, u32)],
) -> Result<EncryptionProfile> {
    if levels == 0 || levels > MAX_LEVEL {
        return Err(HeError::Unsupported(format!(
            "level {levels} outside 1..={MAX_LEVEL}"
        )));
    }
    let q_bits = base_bits + scale_bits * levels as u32;
    let n = bounds
        .iter()
        .find(|&&(_, max)| q_bits <= max)
        .map(|&(n, _)| n)
        .ok_or_else(|| {
            HeError::Unsupported(format!(
                "Q = {q_bits} bits exceeds every supported degree; bootstrapping is not modeled"
            ))
        })?;
    Ok(EncryptionProfile {
        n,
        q_bits,
        scale_bits,
        base_bits,
        levels,
        security: 128,
    })
}
