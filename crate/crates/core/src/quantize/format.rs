//! `PFTQ` quantized tensor file.
//!
//! ```text
//! b"PFTQ"
//! codec: u8          0 = affine int8, 1 = affine int4, 2 = nf4
//! flags: u8          bit 0 = double-quantized scales, bit 1 = asymmetric (zero points present)
//! rows: u64, cols: u64, block_size: u64
//! codes              int8: one byte per element; 4-bit: two per byte, low nibble first
//! constants          plain:  f32 scale per block
//!                    double: super_block u64, f32 per group, i8 scale code per block
//!                    then, if asymmetric, i8 zero point per block
//! ```
//! All integers and floats little-endian.

use crate::error::{Error, Result};
use crate::matrix::ByteReader;
use crate::quantize::{AffineMode, BlockScales, Codec, QuantizedScales, QuantizedTensor};

pub const QTENSOR_MAGIC: &[u8; 4] = b"PFTQ";
pub const QTENSOR_HEADER_BYTES: usize = 4 + 1 + 1 + 8 * 3;

const FLAG_DOUBLE: u8 = 1 << 0;
const FLAG_ASYMMETRIC: u8 = 1 << 1;

impl QuantizedTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.storage_report().total_bytes);
        out.extend_from_slice(QTENSOR_MAGIC);
        out.push(self.codec.tag());
        let mut flags = 0;
        if self.is_double_quantized() {
            flags |= FLAG_DOUBLE;
        }
        if self.zero_points.is_some() {
            flags |= FLAG_ASYMMETRIC;
        }
        out.push(flags);
        for v in [self.rows, self.cols, self.block_size] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.codes);
        match &self.scales {
            BlockScales::Plain(s) => s.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            BlockScales::Double(q) => {
                out.extend_from_slice(&(q.super_block as u64).to_le_bytes());
                q.group_scales
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                out.extend(q.codes.iter().map(|&c| c as u8));
            }
        }
        if let Some(z) = &self.zero_points {
            out.extend(z.iter().map(|&v| v as u8));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(QTENSOR_MAGIC)?;
        let codec = Codec::from_tag(r.read_u8()?)?;
        let flags = r.read_u8()?;
        if flags & !(FLAG_DOUBLE | FLAG_ASYMMETRIC) != 0 {
            return Err(Error::format(format!("unknown flag bits {flags:#04x}")));
        }
        let asymmetric = flags & FLAG_ASYMMETRIC != 0;
        if asymmetric && !codec.is_affine() {
            return Err(Error::format("asymmetric flag on an nf4 tensor"));
        }
        let rows = r.read_len()?;
        let cols = r.read_len()?;
        let block_size = r.read_len()?;
        if block_size == 0 {
            return Err(Error::format("block_size of zero"));
        }
        let n = rows.checked_mul(cols).ok_or_else(|| Error::format("dims overflow"))?;
        let blocks = n.div_ceil(block_size);
        let codes = r.take(codec.code_bytes(n))?.to_vec();
        let scales = if flags & FLAG_DOUBLE != 0 {
            let super_block = r.read_len()?;
            if super_block == 0 {
                return Err(Error::format("super_block of zero"));
            }
            let groups = blocks.div_ceil(super_block);
            let group_scales = (0..groups).map(|_| r.read_f32()).collect::<Result<_>>()?;
            let codes = r.take(blocks)?.iter().map(|&b| b as i8).collect();
            BlockScales::Double(QuantizedScales {
                super_block,
                group_scales,
                codes,
            })
        } else {
            BlockScales::Plain((0..blocks).map(|_| r.read_f32()).collect::<Result<_>>()?)
        };
        let zero_points = if asymmetric {
            Some(r.take(blocks)?.iter().map(|&b| b as i8).collect())
        } else {
            None
        };
        if !r.is_exhausted() {
            return Err(Error::format("trailing bytes after quantized tensor"));
        }
        let qt = QuantizedTensor {
            codec,
            mode: if asymmetric {
                AffineMode::Asymmetric
            } else {
                AffineMode::Symmetric
            },
            rows,
            cols,
            block_size,
            codes,
            scales,
            zero_points,
        };
        qt.validate()?;
        Ok(qt)
    }
}
