//! 4-bit normal-float codebook.
//!
//! Sixteen levels on `[-1, 1]`: both endpoints, seven interior levels below
//! zero, six above, and an exact zero. Each side is built from evenly spaced
//! probabilities of the standard normal restricted to that half-line, scaled
//! so that the most extreme quantile lands on the endpoint.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const NF4_LEVELS: usize = 16;
pub const NF4_NEGATIVE_INTERIOR: usize = 7;
pub const NF4_POSITIVE_INTERIOR: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nf4Codebook {
    levels: [f32; NF4_LEVELS],
}

/// `count + 1` quantiles of the half-normal, endpoint first, normalized to
/// magnitude one. Entry 0 is exactly 1.
fn half_levels(count: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let slots = (count + 1) as f64;
    let q: Vec<f64> = (0..=count)
        .map(|j| -normal.inverse_cdf(0.5 * (j as f64 + 0.5) / slots))
        .collect();
    let extreme = q[0];
    let mut out: Vec<f64> = q.iter().map(|v| v / extreme).collect();
    out[0] = 1.0;
    out
}

pub fn build_nf4_codebook() -> Nf4Codebook {
    let mut levels = Vec::with_capacity(NF4_LEVELS);
    levels.extend(half_levels(NF4_NEGATIVE_INTERIOR).iter().map(|v| -v as f32));
    levels.push(0.0);
    levels.extend(half_levels(NF4_POSITIVE_INTERIOR).iter().map(|&v| v as f32));
    levels.sort_by(f32::total_cmp);
    let cb = Nf4Codebook {
        levels: levels.try_into().expect("16 levels"),
    };
    debug_assert!(cb.validate().is_ok());
    cb
}

/// Process-wide codebook instance.
pub fn nf4_codebook() -> &'static Nf4Codebook {
    static CODEBOOK: OnceLock<Nf4Codebook> = OnceLock::new();
    CODEBOOK.get_or_init(build_nf4_codebook)
}

impl Nf4Codebook {
    pub fn from_levels(levels: [f32; NF4_LEVELS]) -> Result<Self> {
        let cb = Self { levels };
        cb.validate()?;
        Ok(cb)
    }

    pub fn levels(&self) -> &[f32; NF4_LEVELS] {
        &self.levels
    }

    pub fn level(&self, code: u8) -> f32 {
        self.levels[code as usize]
    }

    pub fn zero_code(&self) -> u8 {
        self.levels.iter().position(|&l| l == 0.0).expect("zero level") as u8
    }

    /// Index of the nearest level; on an exact tie the lower index wins.
    #[inline]
    pub fn nearest(&self, v: f32) -> u8 {
        let mut best = 0u8;
        let mut best_d = (v - self.levels[0]).abs();
        for (i, &l) in self.levels.iter().enumerate().skip(1) {
            let d = (v - l).abs();
            if d < best_d {
                best_d = d;
                best = i as u8;
            }
        }
        best
    }

    /// Width of the codebook interval containing `v` (clamped to `[-1, 1]`).
    pub fn local_gap(&self, v: f32) -> f32 {
        let v = v.clamp(-1.0, 1.0);
        let i = self.levels.windows(2).position(|w| v <= w[1]).unwrap_or(NF4_LEVELS - 2);
        self.levels[i + 1] - self.levels[i]
    }

    pub fn max_gap(&self) -> f32 {
        self.levels.windows(2).map(|w| w[1] - w[0]).fold(0.0, f32::max)
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.levels;
        if l.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::argument("nf4 levels must be strictly increasing"));
        }
        if l[0] != -1.0 || l[NF4_LEVELS - 1] != 1.0 {
            return Err(Error::argument("nf4 endpoints must be exactly -1 and 1"));
        }
        if !l.contains(&0.0) {
            return Err(Error::argument("nf4 levels must contain exact zero"));
        }
        let neg = l.iter().filter(|&&v| v < 0.0 && v > -1.0).count();
        let pos = l.iter().filter(|&&v| v > 0.0 && v < 1.0).count();
        if neg != NF4_NEGATIVE_INTERIOR || pos != NF4_POSITIVE_INTERIOR {
            return Err(Error::argument(format!(
                "nf4 needs 7 negative and 6 positive interior levels, got {neg}/{pos}"
            )));
        }
        Ok(())
    }
}
