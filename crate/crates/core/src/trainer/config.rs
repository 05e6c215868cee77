use serde::{Deserialize, Serialize};

use crate::adalora::BudgetSchedule;
use crate::adapter::AdapterKind;
use crate::error::{Error, Result};
use crate::lora::DEFAULT_INIT_SIGMA;
use crate::quantize::{AffineMode, Codec, QuantScheme, DEFAULT_SUPER_BLOCK};
use crate::trainer::model::Projection;

pub const DEFAULT_ETA: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub d_k: usize,
    pub seq_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 16,
            d_k: 8,
            seq_len: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub r: usize,
    pub sigma: f32,
    pub gamma: f32,
    pub targets: Vec<Projection>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Lora,
            r: 4,
            sigma: DEFAULT_INIT_SIGMA,
            gamma: 0.1,
            targets: Projection::ALL.to_vec(),
        }
    }
}

/// AdaLoRA budget. `b_init` defaults to the adapter rank and `b_final` to
/// `b_init`; the schedule always spans the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub b_init: Option<usize>,
    pub b_final: Option<usize>,
    pub warmup_steps: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    None,
    Int8,
    Int4,
    Nf4,
}

impl Precision {
    pub const ALL: [Precision; 4] = [Precision::None, Precision::Int8, Precision::Int4, Precision::Nf4];

    pub fn codec(self) -> Option<Codec> {
        match self {
            Precision::None => None,
            Precision::Int8 => Some(Codec::AffineInt8),
            Precision::Int4 => Some(Codec::AffineInt4),
            Precision::Nf4 => Some(Codec::Nf4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::None => "fp32",
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
            Precision::Nf4 => "nf4",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub precision: Precision,
    /// Affine codecs only; NF4 is always symmetric.
    pub mode: AffineMode,
    pub block_size: usize,
    pub double_quant: bool,
    pub super_block: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            precision: Precision::None,
            mode: AffineMode::Symmetric,
            block_size: 64,
            double_quant: false,
            super_block: DEFAULT_SUPER_BLOCK,
        }
    }
}

impl QuantConfig {
    pub fn scheme_for(&self, precision: Precision) -> Option<QuantScheme> {
        precision.codec().map(|codec| QuantScheme {
            codec,
            mode: if codec.is_affine() {
                self.mode
            } else {
                AffineMode::Symmetric
            },
            block_size: self.block_size,
            double_quant: self.double_quant.then_some(self.super_block),
        })
    }

    pub fn scheme(&self) -> Option<QuantScheme> {
        self.scheme_for(self.precision)
    }
}

/// The teacher is the student's base plus a rank-`shift_rank` perturbation of
/// each targeted projection with entries of size about `shift_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub shift_rank: usize,
    pub shift_scale: f32,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            shift_rank: 2,
            shift_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: ModelDims,
    pub dataset_size: usize,
    pub adapter: AdapterConfig,
    pub head_trainable: bool,
    pub eta: f32,
    pub steps: usize,
    /// `None` means full-batch gradient descent over the training split.
    pub batch_size: Option<usize>,
    pub budget: BudgetConfig,
    pub quantization: QuantConfig,
    pub teacher: TeacherConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: ModelDims::default(),
            dataset_size: 256,
            adapter: AdapterConfig::default(),
            head_trainable: false,
            eta: DEFAULT_ETA,
            steps: 100,
            batch_size: None,
            budget: BudgetConfig::default(),
            quantization: QuantConfig::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Argument(format!("{path}: {msg}"))
}

impl RunConfig {
    /// Check every field; errors name the offending field path.
    pub fn validate(&self) -> Result<()> {
        let ModelDims { d_model, d_k, seq_len } = self.dims;
        for (v, path) in [(d_model, "dims.d_model"), (d_k, "dims.d_k"), (seq_len, "dims.seq_len")] {
            if v == 0 {
                return Err(invalid(path, "must be positive"));
            }
        }
        if self.dataset_size < 2 {
            return Err(invalid(
                "dataset_size",
                "need at least 2 examples for a train/validation split",
            ));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.batch_size == Some(0) {
            return Err(invalid("batch_size", "must be positive"));
        }
        let a = &self.adapter;
        if a.kind != AdapterKind::None {
            let max = d_model.min(d_k);
            if a.r == 0 || a.r > max {
                return Err(invalid("adapter.r", format!("{} outside [1, {max}]", a.r)));
            }
            if a.targets.is_empty() {
                return Err(invalid("adapter.targets", "empty target list"));
            }
            let mut seen = a.targets.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != a.targets.len() {
                return Err(invalid("adapter.targets", "duplicate target"));
            }
        }
        if a.kind == AdapterKind::Lora && !(a.sigma > 0.0 && a.sigma.is_finite()) {
            return Err(invalid("adapter.sigma", format!("must be positive, got {}", a.sigma)));
        }
        if !(a.gamma >= 0.0 && a.gamma.is_finite()) {
            return Err(invalid(
                "adapter.gamma",
                format!("must be non-negative, got {}", a.gamma),
            ));
        }
        if a.kind == AdapterKind::None && !self.head_trainable {
            return Err(invalid(
                "head_trainable",
                "nothing to train without an adapter or a trainable head",
            ));
        }
        if a.kind == AdapterKind::AdaLora {
            let s = self.schedule()?.expect("adalora has a schedule");
            if s.b_init > a.r {
                return Err(invalid(
                    "budget.b_init",
                    format!("{} exceeds adapter.r {}", s.b_init, a.r),
                ));
            }
            if s.b_final > s.b_init {
                return Err(invalid(
                    "budget.b_final",
                    format!("{} exceeds b_init {}", s.b_final, s.b_init),
                ));
            }
            if s.warmup_steps > s.total_steps {
                return Err(invalid("budget.warmup_steps", "exceeds steps"));
            }
        }
        let q = &self.quantization;
        if q.precision != Precision::None {
            if q.block_size == 0 {
                return Err(invalid("quantization.block_size", "must be positive"));
            }
            if q.double_quant && q.super_block == 0 {
                return Err(invalid("quantization.super_block", "must be positive"));
            }
            if q.precision == Precision::Nf4 && q.mode == AffineMode::Asymmetric {
                return Err(invalid("quantization.mode", "nf4 has no asymmetric mode"));
            }
        }
        Ok(())
    }

    /// Budget schedule for AdaLoRA runs.
    pub fn schedule(&self) -> Result<Option<BudgetSchedule>> {
        if self.adapter.kind != AdapterKind::AdaLora {
            return Ok(None);
        }
        let b_init = self.budget.b_init.unwrap_or(self.adapter.r);
        Ok(Some(BudgetSchedule {
            b_init,
            b_final: self.budget.b_final.unwrap_or(b_init),
            total_steps: self.steps,
            warmup_steps: self.budget.warmup_steps,
        }))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Argument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::default().eta, 1e-3);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c =
            RunConfig::from_json(r#"{"seed": 3, "adapter": {"kind": "adalora", "r": 4}, "budget": {"b_final": 2}}"#)
                .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.adapter.targets, Projection::ALL.to_vec());
        let s = c.schedule().unwrap().unwrap();
        assert_eq!((s.b_init, s.b_final, s.total_steps), (4, 2, 100));
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (r#"{"eta": 0}"#, "eta"),
            (r#"{"adapter": {"r": 99}}"#, "adapter.r"),
            (r#"{"dims": {"d_model": 0, "d_k": 2, "seq_len": 2}}"#, "dims.d_model"),
            (
                r#"{"adapter": {"kind": "adalora", "r": 2}, "budget": {"b_final": 3}}"#,
                "budget.b_final",
            ),
            (
                r#"{"quantization": {"precision": "nf4", "mode": "asymmetric"}}"#,
                "quantization.mode",
            ),
        ];
        for (json, field) in cases {
            let err = RunConfig::from_json(json).unwrap_err().to_string();
            assert!(err.contains(field), "{json}: {err}");
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_json(r#"{"sead": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"adapter": {"rank": 1}}"#).is_err());
    }
}
