use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffineMode {
    Asymmetric,
    Symmetric,
}

/// Scale and zero point of one affine quantization range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: f32,
    pub zero_point: i32,
    pub q_min: i32,
    pub q_max: i32,
    pub r_min: f32,
    pub r_max: f32,
    pub mode: AffineMode,
    pub bits: u32,
}

/// Signed code range for `bits`. Symmetric ranges give up the most negative
/// code so that they are balanced around zero.
pub fn code_range(bits: u32, mode: AffineMode) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    match mode {
        AffineMode::Asymmetric => (-half, half - 1),
        AffineMode::Symmetric => (-(half - 1), half - 1),
    }
}

pub(crate) fn check_bits(bits: u32) -> Result<()> {
    if bits == 4 || bits == 8 {
        Ok(())
    } else {
        Err(Error::argument(format!("bits must be 4 or 8, got {bits}")))
    }
}

/// Round half to even, then clamp.
#[inline]
pub(crate) fn round_clamp(v: f64, lo: i32, hi: i32) -> i32 {
    let r = v.round_ties_even();
    if r.is_nan() {
        return 0.clamp(lo, hi);
    }
    (r.max(f64::from(lo)).min(f64::from(hi))) as i32
}

/// Derive `S` and `Z` from the data.
///
/// Asymmetric ranges are widened to contain zero so that `Z` lands inside the
/// code range and zero is representable. A constant input (all values equal)
/// gets `S = |c|` and `Z = 0` (or `S = 1` when `c = 0`), which reconstructs the
/// constant exactly.
pub fn compute_affine_params(values: &[f32], bits: u32, mode: AffineMode) -> Result<AffineParams> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::argument("cannot derive quantization params from no values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("non-finite value in quantization input"));
    }
    let (q_min, q_max) = code_range(bits, mode);
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });

    if lo == hi {
        let scale = if lo == 0.0 { 1.0 } else { lo.abs() };
        return Ok(AffineParams {
            scale,
            zero_point: 0,
            q_min,
            q_max,
            r_min: lo,
            r_max: hi,
            mode,
            bits,
        });
    }

    match mode {
        AffineMode::Asymmetric => {
            let r_min = lo.min(0.0);
            let r_max = hi.max(0.0);
            let span = f64::from(q_max - q_min);
            let exact = (f64::from(r_max) - f64::from(r_min)) / span;
            let zero_point = round_clamp(f64::from(q_min) - f64::from(r_min) / exact, q_min, q_max);
            Ok(AffineParams {
                scale: exact as f32,
                zero_point,
                q_min,
                q_max,
                r_min,
                r_max,
                mode,
                bits,
            })
        }
        AffineMode::Symmetric => {
            let amax = lo.abs().max(hi.abs());
            let scale = (f64::from(amax) / f64::from(q_max)) as f32;
            Ok(AffineParams {
                scale,
                zero_point: 0,
                q_min,
                q_max,
                r_min: -amax,
                r_max: amax,
                mode,
                bits,
            })
        }
    }
}

impl AffineParams {
    #[inline]
    pub fn quantize_value(&self, x: f32) -> i32 {
        round_clamp(
            f64::from(x) / f64::from(self.scale) + f64::from(self.zero_point),
            self.q_min,
            self.q_max,
        )
    }

    #[inline]
    pub fn dequantize_value(&self, code: i32) -> f32 {
        self.scale * (code - self.zero_point) as f32
    }
}

/// `clamp(round(x / S + Z), q_min, q_max)` element-wise, row-major.
pub fn quantize_affine(x: &Matrix, params: &AffineParams) -> Vec<i32> {
    x.data().iter().map(|&v| params.quantize_value(v)).collect()
}

/// `S (q - Z)` element-wise into a `rows x cols` matrix.
pub fn dequantize_affine(codes: &[i32], rows: usize, cols: usize, params: &AffineParams) -> Result<Matrix> {
    if let Some(bad) = codes.iter().find(|&&c| c < params.q_min || c > params.q_max) {
        return Err(Error::format(format!(
            "code {bad} outside [{}, {}]",
            params.q_min, params.q_max
        )));
    }
    Matrix::new(rows, cols, codes.iter().map(|&c| params.dequantize_value(c)).collect())
}
