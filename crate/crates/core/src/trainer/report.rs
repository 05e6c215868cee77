//! Byte and parameter accounting for a run configuration, computed from the
//! shapes alone.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterKind;
use crate::error::Result;
use crate::quantize::storage_layout;
use crate::trainer::config::{ModelDims, Precision, QuantConfig, RunConfig};

/// Stored size of the three attention projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenStorage {
    pub bytes: usize,
    pub dense_bytes: usize,
}

impl FrozenStorage {
    pub fn ratio(&self) -> f64 {
        if self.bytes == 0 {
            1.0
        } else {
            self.dense_bytes as f64 / self.bytes as f64
        }
    }
}

/// Projection bytes at `precision`. Dense storage counts raw 32-bit values
/// so the unquantized ratio is exactly 1.
pub fn frozen_storage(dims: ModelDims, quant: &QuantConfig, precision: Precision) -> Result<FrozenStorage> {
    let dense = 4 * dims.d_model * dims.d_k;
    let per = match quant.scheme_for(precision) {
        None => dense,
        Some(scheme) => storage_layout(dims.d_model, dims.d_k, &scheme)?.total_bytes,
    };
    Ok(FrozenStorage {
        bytes: 3 * per,
        dense_bytes: 3 * dense,
    })
}

/// Trainable parameter count implied by `config`.
pub fn trainable_param_count(config: &RunConfig) -> usize {
    let a = &config.adapter;
    let (n, k) = (config.dims.d_model, config.dims.d_k);
    let per = match a.kind {
        AdapterKind::None => 0,
        AdapterKind::Lora => a.r * (n + k),
        AdapterKind::AdaLora => a.r * (n + k) + a.r,
    };
    let head = if config.head_trainable { k * n } else { 0 };
    per * a.targets.len() + head
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub precision: String,
    pub bytes: usize,
    pub dense_bytes: usize,
    pub ratio: f64,
    pub trainable_params: usize,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub d_model: usize,
    pub d_k: usize,
    pub block_size: usize,
    pub double_quant: bool,
    pub adapter_kind: AdapterKind,
    pub rows: Vec<CompressionRow>,
}

/// One row per storage precision; the configured one is marked `selected`.
pub fn compression_report(config: &RunConfig) -> Result<CompressionReport> {
    config.validate()?;
    let trainable = trainable_param_count(config);
    let rows = Precision::ALL
        .iter()
        .map(|&p| {
            let s = frozen_storage(config.dims, &config.quantization, p)?;
            Ok(CompressionRow {
                precision: p.name().to_string(),
                bytes: s.bytes,
                dense_bytes: s.dense_bytes,
                ratio: s.ratio(),
                trainable_params: trainable,
                selected: p == config.quantization.precision,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CompressionReport {
        d_model: config.dims.d_model,
        d_k: config.dims.d_k,
        block_size: config.quantization.block_size,
        double_quant: config.quantization.double_quant,
        adapter_kind: config.adapter.kind,
        rows,
    })
}

impl CompressionReport {
    pub fn selected(&self) -> &CompressionRow {
        self.rows.iter().find(|r| r.selected).expect("one row is selected")
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "projections 3 x {}x{}, block {}{}, adapter {}",
            self.d_model,
            self.d_k,
            self.block_size,
            if self.double_quant { " (double-quant)" } else { "" },
            self.adapter_kind.name()
        );
        let _ = writeln!(
            s,
            "  {:<9} {:>12} {:>8} {:>10}",
            "precision", "bytes", "ratio", "trainable"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{} {:<9} {:>12} {:>8.3} {:>10}",
                if r.selected { "*" } else { " " },
                r.precision,
                r.bytes,
                r.ratio,
                r.trainable_params
            );
        }
        s
    }
}
