use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::net::PruningMask;

use super::{malformed, IoError};

const MAGIC: &[u8; 6] = b"GSCCM1";

/// Writes a mask: magic, u32 unit count, then `ceil(C/8)` bytes packed
/// LSB-first (bit set means pruned).
pub fn write_mask(path: &Path, mask: &PruningMask) -> Result<(), IoError> {
    let mut w = File::create(path)?;
    w.write_all(MAGIC)?;
    w.write_all(&(mask.len() as u32).to_le_bytes())?;
    let mut packed = vec![0u8; mask.len().div_ceil(8)];
    for (i, &pruned) in mask.bits().iter().enumerate() {
        if pruned {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    w.write_all(&packed)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<PruningMask, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic { expected: "GSCCM1", found: magic.to_vec() });
    }
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let units = u32::from_le_bytes(len_buf) as usize;
    let mut packed = vec![0u8; units.div_ceil(8)];
    r.read_exact(&mut packed)?;
    // Trailing padding bits must be zero.
    if units % 8 != 0 {
        let last = packed[units / 8];
        if last >> (units % 8) != 0 {
            return Err(malformed("mask file", "nonzero padding bits"));
        }
    }
    let bits = (0..units).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(PruningMask::from_bits(bits))
}
