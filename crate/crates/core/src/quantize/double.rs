//! Second-level quantization of per-block scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::affine::{compute_affine_params, AffineMode};

/// Bits used for the second level.
pub const DOUBLE_QUANT_BITS: u32 = 8;
pub const DEFAULT_SUPER_BLOCK: usize = 256;

/// First-level scales stored as 8-bit symmetric codes, one `f32` scale per
/// group of `super_block` codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedScales {
    pub super_block: usize,
    pub group_scales: Vec<f32>,
    pub codes: Vec<i8>,
}

pub fn double_quantize_scales(scales: &[f32], super_block: usize) -> Result<QuantizedScales> {
    if super_block == 0 {
        return Err(Error::argument("super_block must be at least 1"));
    }
    let mut group_scales = Vec::with_capacity(scales.len().div_ceil(super_block));
    let mut codes = Vec::with_capacity(scales.len());
    for group in scales.chunks(super_block) {
        let p = compute_affine_params(group, DOUBLE_QUANT_BITS, AffineMode::Symmetric)?;
        group_scales.push(p.scale);
        codes.extend(group.iter().map(|&s| p.quantize_value(s) as i8));
    }
    Ok(QuantizedScales {
        super_block,
        group_scales,
        codes,
    })
}

impl QuantizedScales {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn scale_of(&self, i: usize) -> f32 {
        self.group_scales[i / self.super_block] * f32::from(self.codes[i])
    }

    pub fn dequantize(&self) -> Vec<f32> {
        (0..self.codes.len()).map(|i| self.scale_of(i)).collect()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.super_block == 0 {
            return Err(Error::format("super_block of zero"));
        }
        if self.group_scales.len() != self.codes.len().div_ceil(self.super_block) {
            return Err(Error::format("group scale count does not match codes"));
        }
        if self.codes.contains(&i8::MIN) {
            return Err(Error::format("second-level code -128 outside symmetric range"));
        }
        Ok(())
    }

    /// Bytes in the constants section: super-block size, group scales, codes.
    pub fn byte_len(&self) -> usize {
        8 + 4 * self.group_scales.len() + self.codes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scale_groups_roundtrip_exactly() {
        let s = vec![0.3, 1.7, 0.0012, 5.0];
        let q = double_quantize_scales(&s, 1).unwrap();
        assert_eq!(q.dequantize(), s);
    }

    #[test]
    fn constant_scales_roundtrip_exactly() {
        let s = vec![0.123; 100];
        let q = double_quantize_scales(&s, 64).unwrap();
        assert_eq!(q.dequantize(), s);
    }

    #[test]
    fn storage_for_256_scales() {
        let s: Vec<f32> = (0..256).map(|i| 0.01 + i as f32 * 0.003).collect();
        let q = double_quantize_scales(&s, 64).unwrap();
        assert_eq!(q.codes.len(), 256);
        assert_eq!(q.group_scales.len(), 4);
        let back = q.dequantize();
        for (g, chunk) in s.chunks(64).enumerate() {
            let s2 = q.group_scales[g];
            for (j, &orig) in chunk.iter().enumerate() {
                assert!((orig - back[g * 64 + j]).abs() <= 0.5 * s2 + f32::EPSILON * orig);
            }
        }
    }

    #[test]
    fn zero_super_block_rejected() {
        assert!(double_quantize_scales(&[1.0], 0).is_err());
    }
}
