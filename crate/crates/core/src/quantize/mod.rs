//! Block-wise weight quantization: affine int8/int4 (symmetric or asymmetric)
//! and the 4-bit normal-float codebook, with optional double quantization of
//! the per-block scales.
//!
//! Blocks are taken over the row-major flattening of the matrix, so the last
//! block may be short. Each block is quantized independently; with
//! [`Exec::Parallel`] blocks are processed on the rayon pool and the output is
//! bit-identical to the sequential path.

pub mod affine;
pub mod double;
mod format;
pub mod nf4;
pub mod pack;

use serde::{Deserialize, Serialize};

pub use affine::{code_range, compute_affine_params, dequantize_affine, quantize_affine, AffineMode, AffineParams};
pub use double::{double_quantize_scales, QuantizedScales, DEFAULT_SUPER_BLOCK};
pub use format::{QTENSOR_HEADER_BYTES, QTENSOR_MAGIC};
pub use nf4::{build_nf4_codebook, nf4_codebook, Nf4Codebook};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    AffineInt8,
    AffineInt4,
    Nf4,
}

impl Codec {
    pub fn bits(self) -> u32 {
        match self {
            Codec::AffineInt8 => 8,
            Codec::AffineInt4 | Codec::Nf4 => 4,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Codec::AffineInt8 => 0,
            Codec::AffineInt4 => 1,
            Codec::Nf4 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Codec::AffineInt8),
            1 => Ok(Codec::AffineInt4),
            2 => Ok(Codec::Nf4),
            t => Err(Error::format(format!("unknown codec byte {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Codec::AffineInt8 => "int8",
            Codec::AffineInt4 => "int4",
            Codec::Nf4 => "nf4",
        }
    }

    pub fn is_affine(self) -> bool {
        self != Codec::Nf4
    }

    fn affine_for_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(Codec::AffineInt8),
            4 => Ok(Codec::AffineInt4),
            b => Err(Error::argument(format!("bits must be 4 or 8, got {b}"))),
        }
    }

    fn code_bytes(self, elements: usize) -> usize {
        match self.bits() {
            8 => elements,
            _ => elements.div_ceil(2),
        }
    }
}

/// Per-block scales, either full precision or double quantized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlockScales {
    Plain(Vec<f32>),
    Double(QuantizedScales),
}

impl BlockScales {
    pub fn len(&self) -> usize {
        match self {
            BlockScales::Plain(s) => s.len(),
            BlockScales::Double(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> f32 {
        match self {
            BlockScales::Plain(s) => s[i],
            BlockScales::Double(q) => q.scale_of(i),
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    fn byte_len(&self) -> usize {
        match self {
            BlockScales::Plain(s) => 4 * s.len(),
            BlockScales::Double(q) => q.byte_len(),
        }
    }
}

/// A frozen, packed weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    codec: Codec,
    /// Meaningful for affine codecs only; NF4 tensors carry `Symmetric`.
    mode: AffineMode,
    rows: usize,
    cols: usize,
    block_size: usize,
    /// Stored codes: one byte each for int8, nibble-packed otherwise. Affine
    /// codes are stored offset by `2^(bits-1)`; NF4 codes are level indices.
    codes: Vec<u8>,
    scales: BlockScales,
    zero_points: Option<Vec<i8>>,
}

/// How to quantize a weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub codec: Codec,
    pub mode: AffineMode,
    pub block_size: usize,
    /// Super-block size when the scales are double quantized.
    pub double_quant: Option<usize>,
}

impl QuantScheme {
    pub fn apply(&self, x: &Matrix) -> Result<QuantizedTensor> {
        self.apply_with(x, Exec::default())
    }

    pub fn apply_with(&self, x: &Matrix, exec: Exec) -> Result<QuantizedTensor> {
        let qt = match self.codec {
            Codec::Nf4 => quantize_nf4_with(x, self.block_size, exec)?,
            c => quantize_blockwise_affine_with(x, c.bits(), self.mode, self.block_size, exec)?,
        };
        match self.double_quant {
            Some(sb) => qt.with_double_quant(sb),
            None => Ok(qt),
        }
    }
}

fn check_block_size(block_size: usize) -> Result<()> {
    if block_size == 0 {
        return Err(Error::argument("block_size must be at least 1"));
    }
    Ok(())
}

fn block_count(n: usize, block_size: usize) -> usize {
    n.div_ceil(block_size)
}

struct BlockOut {
    codes: Vec<u8>,
    scale: f32,
    zero_point: i8,
}

fn assemble(
    codec: Codec,
    mode: AffineMode,
    x: &Matrix,
    block_size: usize,
    blocks: Vec<BlockOut>,
    with_zero_points: bool,
) -> QuantizedTensor {
    let mut flat = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(blocks.len());
    let mut zps = Vec::with_capacity(blocks.len());
    for b in blocks {
        flat.extend_from_slice(&b.codes);
        scales.push(b.scale);
        zps.push(b.zero_point);
    }
    let codes = if codec.bits() == 8 {
        flat
    } else {
        pack::pack_nibbles(&flat)
    };
    QuantizedTensor {
        codec,
        mode,
        rows: x.rows(),
        cols: x.cols(),
        block_size,
        codes,
        scales: BlockScales::Plain(scales),
        zero_points: with_zero_points.then_some(zps),
    }
}

pub fn quantize_nf4(x: &Matrix, block_size: usize) -> Result<QuantizedTensor> {
    quantize_nf4_with(x, block_size, Exec::default())
}

/// Absmax scaling per block, then nearest codebook level.
pub fn quantize_nf4_with(x: &Matrix, block_size: usize, exec: Exec) -> Result<QuantizedTensor> {
    check_block_size(block_size)?;
    if !x.is_finite() {
        return Err(Error::argument("non-finite value in quantization input"));
    }
    let cb = nf4_codebook();
    let data = x.data();
    let blocks = exec.map_range(block_count(data.len(), block_size), |b| {
        let chunk = &data[b * block_size..((b + 1) * block_size).min(data.len())];
        let amax = chunk.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if amax == 0.0 { 1.0 } else { amax };
        BlockOut {
            codes: chunk.iter().map(|&v| cb.nearest(v / scale)).collect(),
            scale,
            zero_point: 0,
        }
    });
    Ok(assemble(
        Codec::Nf4,
        AffineMode::Symmetric,
        x,
        block_size,
        blocks,
        false,
    ))
}

pub fn quantize_blockwise_affine(
    x: &Matrix,
    bits: u32,
    mode: AffineMode,
    block_size: usize,
) -> Result<QuantizedTensor> {
    quantize_blockwise_affine_with(x, bits, mode, block_size, Exec::default())
}

/// Independent [`AffineParams`] per block.
pub fn quantize_blockwise_affine_with(
    x: &Matrix,
    bits: u32,
    mode: AffineMode,
    block_size: usize,
    exec: Exec,
) -> Result<QuantizedTensor> {
    let codec = Codec::affine_for_bits(bits)?;
    check_block_size(block_size)?;
    let data = x.data();
    let offset = 1i32 << (bits - 1);
    let blocks = exec.map_range(block_count(data.len(), block_size), |b| {
        let chunk = &data[b * block_size..((b + 1) * block_size).min(data.len())];
        compute_affine_params(chunk, bits, mode).map(|p| BlockOut {
            codes: chunk.iter().map(|&v| (p.quantize_value(v) + offset) as u8).collect(),
            scale: p.scale,
            zero_point: p.zero_point as i8,
        })
    });
    let blocks = blocks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(assemble(
        codec,
        mode,
        x,
        block_size,
        blocks,
        mode == AffineMode::Asymmetric,
    ))
}

/// Byte accounting of the `PFTQ` encoding of one tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub header_bytes: usize,
    pub code_bytes: usize,
    pub constant_bytes: usize,
    pub total_bytes: usize,
    /// Size of the same matrix as dense `f32`.
    pub dense_bytes: usize,
    /// `dense_bytes / total_bytes`.
    pub compression_ratio: f64,
}

impl StorageReport {
    fn new(code_bytes: usize, constant_bytes: usize, elements: usize) -> Self {
        let total = QTENSOR_HEADER_BYTES + code_bytes + constant_bytes;
        let dense = 4 * elements;
        Self {
            header_bytes: QTENSOR_HEADER_BYTES,
            code_bytes,
            constant_bytes,
            total_bytes: total,
            dense_bytes: dense,
            compression_ratio: dense as f64 / total as f64,
        }
    }
}

/// Storage a tensor of this shape would need under `scheme`, without
/// quantizing anything.
pub fn storage_layout(rows: usize, cols: usize, scheme: &QuantScheme) -> Result<StorageReport> {
    check_block_size(scheme.block_size)?;
    let n = rows * cols;
    let blocks = block_count(n, scheme.block_size);
    let scale_bytes = match scheme.double_quant {
        None => 4 * blocks,
        Some(0) => return Err(Error::argument("super_block must be at least 1")),
        Some(sb) => 8 + 4 * blocks.div_ceil(sb) + blocks,
    };
    let zp_bytes = if scheme.codec.is_affine() && scheme.mode == AffineMode::Asymmetric {
        blocks
    } else {
        0
    };
    Ok(StorageReport::new(
        scheme.codec.code_bytes(n),
        scale_bytes + zp_bytes,
        n,
    ))
}

pub fn storage_report(qt: &QuantizedTensor) -> StorageReport {
    qt.storage_report()
}

pub fn dequantize(qt: &QuantizedTensor) -> Result<Matrix> {
    dequantize_with(qt, Exec::default())
}

/// Inverse of the stored codec chain, including double-quantized scales.
pub fn dequantize_with(qt: &QuantizedTensor, exec: Exec) -> Result<Matrix> {
    qt.validate()?;
    let n = qt.len();
    let mut out = Matrix::zeros(qt.rows, qt.cols);
    if n == 0 {
        return Ok(out);
    }
    let bs = qt.block_size;
    let cb = nf4_codebook();
    exec.for_each_chunk_mut(out.data_mut(), bs, |b, chunk| {
        let scale = qt.scales.get(b);
        match qt.codec {
            Codec::Nf4 => {
                for (j, o) in chunk.iter_mut().enumerate() {
                    *o = cb.level(pack::nibble_at(&qt.codes, b * bs + j)) * scale;
                }
            }
            codec => {
                let offset = 1i32 << (codec.bits() - 1);
                let zp = qt.zero_points.as_ref().map_or(0, |z| i32::from(z[b]));
                for (j, o) in chunk.iter_mut().enumerate() {
                    let stored = qt.stored_code(b * bs + j);
                    *o = scale * (i32::from(stored) - offset - zp) as f32;
                }
            }
        }
    });
    Ok(out)
}

impl QuantizedTensor {
    pub fn codec(&self) -> Codec {
        self.codec
    }

    pub fn mode(&self) -> AffineMode {
        self.mode
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        block_count(self.len(), self.block_size)
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &BlockScales {
        &self.scales
    }

    /// Effective (dequantized) scale of every block.
    pub fn block_scales(&self) -> Vec<f32> {
        self.scales.to_vec()
    }

    pub fn zero_points(&self) -> Option<&[i8]> {
        self.zero_points.as_deref()
    }

    pub fn is_double_quantized(&self) -> bool {
        matches!(self.scales, BlockScales::Double(_))
    }

    pub fn scheme(&self) -> QuantScheme {
        QuantScheme {
            codec: self.codec,
            mode: self.mode,
            block_size: self.block_size,
            double_quant: match &self.scales {
                BlockScales::Plain(_) => None,
                BlockScales::Double(q) => Some(q.super_block),
            },
        }
    }

    #[inline]
    fn stored_code(&self, i: usize) -> u8 {
        if self.codec.bits() == 8 {
            self.codes[i]
        } else {
            pack::nibble_at(&self.codes, i)
        }
    }

    /// Code of element `i`: the signed integer code for affine codecs, the
    /// level index for NF4.
    pub fn code(&self, i: usize) -> i32 {
        let stored = i32::from(self.stored_code(i));
        match self.codec {
            Codec::Nf4 => stored,
            c => stored - (1i32 << (c.bits() - 1)),
        }
    }

    /// Quantize the per-block scales with an 8-bit symmetric second level.
    pub fn with_double_quant(self, super_block: usize) -> Result<Self> {
        let scales = match self.scales {
            BlockScales::Plain(s) => BlockScales::Double(double_quantize_scales(&s, super_block)?),
            BlockScales::Double(_) => return Err(Error::argument("scales are already double quantized")),
        };
        Ok(Self { scales, ..self })
    }

    pub fn storage_report(&self) -> StorageReport {
        let zp = self.zero_points.as_ref().map_or(0, |z| z.len());
        StorageReport::new(self.codes.len(), self.scales.byte_len() + zp, self.len())
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.block_size == 0 {
            return Err(Error::format("block_size of zero"));
        }
        if self.codes.len() != self.codec.code_bytes(n) {
            return Err(Error::format(format!(
                "expected {} code bytes, found {}",
                self.codec.code_bytes(n),
                self.codes.len()
            )));
        }
        let blocks = self.num_blocks();
        if self.scales.len() != blocks {
            return Err(Error::format(format!(
                "expected {blocks} block scales, found {}",
                self.scales.len()
            )));
        }
        if let BlockScales::Double(q) = &self.scales {
            q.validate()?;
        }
        if self.codec.bits() == 4 && n % 2 == 1 && self.codes[self.codes.len() - 1] >> 4 != 0 {
            return Err(Error::format("nonzero padding nibble"));
        }
        if self.codec.is_affine() {
            let bits = self.codec.bits();
            let (q_min, q_max) = code_range(bits, self.mode);
            let offset = 1i32 << (bits - 1);
            if (0..n).any(|i| {
                let c = i32::from(self.stored_code(i)) - offset;
                c < q_min || c > q_max
            }) {
                return Err(Error::format("code outside the codec range"));
            }
            match (&self.zero_points, self.mode) {
                (Some(z), AffineMode::Asymmetric) => {
                    if z.len() != blocks {
                        return Err(Error::format("zero point count does not match blocks"));
                    }
                    if z.iter().any(|&v| i32::from(v) < q_min || i32::from(v) > q_max) {
                        return Err(Error::format("zero point outside the code range"));
                    }
                }
                (None, AffineMode::Symmetric) => {}
                _ => return Err(Error::format("zero points inconsistent with mode")),
            }
        } else if self.zero_points.is_some() {
            return Err(Error::format("nf4 tensors carry no zero points"));
        }
        Ok(())
    }
}
