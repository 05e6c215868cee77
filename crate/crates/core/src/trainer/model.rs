//! The toy attention model: frozen input embedding, three attention
//! projections that may be quantized and carry adapters, and an output head.
//!
//! ```text
//! h = x E
//! O = softmax((h Wq')(h Wk')^T / sqrt(d_k)) (h Wv')      Wp' = Wp + adapter
//! y = O H
//! ```

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{linear_backward, linear_forward, Adapter, AdapterGrads};
use crate::error::{Error, Result};
use crate::linalg::{attention_backward, attention_from_projections, matmul, AttentionCache};
use crate::matrix::Matrix;
use crate::qlora::QuantizedLinear;
use crate::quantize::{dequantize, storage_report, QuantScheme, QuantizedTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }

    /// Per-projection seed so each adapter is independent but reproducible.
    pub fn derive_seed(self, seed: u64) -> u64 {
        let salt = match self {
            Projection::Q => 0x51,
            Projection::K => 0x4b,
            Projection::V => 0x56,
        };
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" | "wq" => Ok(Projection::Q),
            "k" | "wk" => Ok(Projection::K),
            "v" | "wv" => Ok(Projection::V),
            other => Err(Error::argument(format!(
                "unknown projection {other:?}; expected q, k or v"
            ))),
        }
    }
}

/// A frozen weight, stored dense or quantized.
#[derive(Clone, Debug, PartialEq)]
pub enum FrozenWeight {
    Dense(Matrix),
    Quantized(QuantizedTensor),
}

impl FrozenWeight {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            FrozenWeight::Dense(m) => m.shape(),
            FrozenWeight::Quantized(q) => q.shape(),
        }
    }

    /// The weight in compute precision. Quantized weights are dequantized on
    /// each call.
    pub fn materialize(&self) -> Result<Cow<'_, Matrix>> {
        match self {
            FrozenWeight::Dense(m) => Ok(Cow::Borrowed(m)),
            FrozenWeight::Quantized(q) => Ok(Cow::Owned(dequantize(q)?)),
        }
    }

    /// Serialized bytes: `PFT1` for dense, `PFTQ` for quantized.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            FrozenWeight::Dense(m) => m.to_bytes(),
            FrozenWeight::Quantized(q) => q.to_bytes(),
        }
    }

    pub fn storage_bytes(&self) -> usize {
        match self {
            FrozenWeight::Dense(m) => 4 * m.len(),
            FrozenWeight::Quantized(q) => storage_report(q).total_bytes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: FrozenWeight,
    pub adapter: Adapter,
}

impl Linear {
    pub fn dense(w: Matrix) -> Self {
        Self {
            weight: FrozenWeight::Dense(w),
            adapter: Adapter::None,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        linear_forward(x, &*self.weight.materialize()?, &self.adapter)
    }

    pub fn backward(&self, x: &Matrix, g: &Matrix) -> Result<(AdapterGrads, Matrix)> {
        linear_backward(x, &*self.weight.materialize()?, &self.adapter, g)
    }
}

impl From<QuantizedLinear> for Linear {
    fn from(layer: QuantizedLinear) -> Self {
        Self {
            weight: FrozenWeight::Quantized(layer.weight().clone()),
            adapter: layer.adapter,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterizedModel {
    /// `d_model x d_model`, always frozen.
    pub embedding: Matrix,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// `d_k x d_model`.
    pub head: Matrix,
    pub head_trainable: bool,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub h: Matrix,
    pub attention: AttentionCache,
    pub out: Matrix,
}

/// Gradients for every trainable parameter of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub q: AdapterGrads,
    pub k: AdapterGrads,
    pub v: AdapterGrads,
    pub head: Option<Matrix>,
}

impl ModelGrads {
    pub fn projection(&self, p: Projection) -> &AdapterGrads {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut AdapterGrads {
        match p {
            Projection::Q => &mut self.q,
            Projection::K => &mut self.k,
            Projection::V => &mut self.v,
        }
    }

    pub fn accumulate(&mut self, other: &ModelGrads) -> Result<()> {
        self.q.accumulate(&other.q)?;
        self.k.accumulate(&other.k)?;
        self.v.accumulate(&other.v)?;
        match (&mut self.head, &other.head) {
            (Some(a), Some(b)) => a.add_assign(b),
            (None, None) => Ok(()),
            _ => Err(Error::argument("head gradient presence differs")),
        }
    }

    /// All gradient values in [`AdapterizedModel::flat_params`] order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for p in Projection::ALL {
            out.extend(self.projection(p).flatten());
        }
        if let Some(h) = &self.head {
            out.extend_from_slice(h.data());
        }
        out
    }
}

impl AdapterizedModel {
    /// Dense model with no adapters; the head starts frozen.
    pub fn new(embedding: Matrix, wq: Matrix, wk: Matrix, wv: Matrix, head: Matrix) -> Result<Self> {
        let d_model = embedding.cols();
        if embedding.rows() != d_model {
            return Err(Error::argument("embedding must be square"));
        }
        for (w, op) in [(&wq, "model W^Q"), (&wk, "model W^K"), (&wv, "model W^V")] {
            if w.rows() != d_model {
                return Err(Error::Shape {
                    op,
                    lhs: embedding.shape(),
                    rhs: w.shape(),
                });
            }
        }
        if wq.cols() != wk.cols() {
            return Err(Error::Shape {
                op: "model d_k",
                lhs: wq.shape(),
                rhs: wk.shape(),
            });
        }
        if head.rows() != wv.cols() {
            return Err(Error::Shape {
                op: "model head",
                lhs: wv.shape(),
                rhs: head.shape(),
            });
        }
        Ok(Self {
            embedding,
            wq: Linear::dense(wq),
            wk: Linear::dense(wk),
            wv: Linear::dense(wv),
            head,
            head_trainable: false,
        })
    }

    pub fn d_model(&self) -> usize {
        self.embedding.rows()
    }

    pub fn projection(&self, p: Projection) -> &Linear {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Linear {
        match p {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
        }
    }

    /// Replace each projection's dense weight with its quantized form.
    pub fn quantize_projections(&mut self, scheme: &QuantScheme) -> Result<()> {
        for p in Projection::ALL {
            let layer = self.projection_mut(p);
            if let FrozenWeight::Dense(w) = &layer.weight {
                layer.weight = FrozenWeight::Quantized(scheme.apply(w)?);
            }
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        let h = matmul(x, &self.embedding)?;
        let q = self.wq.forward(&h)?;
        let k = self.wk.forward(&h)?;
        let v = self.wv.forward(&h)?;
        let attention = attention_from_projections(q, k, v)?;
        let out = matmul(&attention.out, &self.head)?;
        Ok(ForwardCache { h, attention, out })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.out)
    }

    /// Gradients of the trainable parameters for upstream `g = dL/dy`.
    pub fn backward(&self, cache: &ForwardCache, g: &Matrix) -> Result<ModelGrads> {
        let head = if self.head_trainable {
            Some(matmul(&cache.attention.out.transpose(), g)?)
        } else {
            None
        };
        let d_attn = matmul(g, &self.head.transpose())?;
        let ag = attention_backward(&cache.attention, &d_attn)?;
        let (q, _) = self.wq.backward(&cache.h, &ag.dq)?;
        let (k, _) = self.wk.backward(&cache.h, &ag.dk)?;
        let (v, _) = self.wv.backward(&cache.h, &ag.dv)?;
        Ok(ModelGrads { q, k, v, head })
    }

    /// Sum of the adapters' orthogonality penalties.
    pub fn penalty(&self) -> Result<f32> {
        let mut total = 0.0;
        for p in Projection::ALL {
            total += self.projection(p).adapter.penalty()?;
        }
        Ok(total)
    }

    pub fn add_penalty_grads(&self, grads: &mut ModelGrads) -> Result<()> {
        for p in Projection::ALL {
            self.projection(p).adapter.add_penalty_grads(grads.projection_mut(p))?;
        }
        Ok(())
    }

    pub fn trainable_params(&self) -> usize {
        let adapters: usize = Projection::ALL
            .iter()
            .map(|&p| self.projection(p).adapter.trainable_params())
            .sum();
        adapters + if self.head_trainable { self.head.len() } else { 0 }
    }

    /// Frozen plus trainable parameter count.
    pub fn total_params(&self) -> usize {
        let frozen: usize = Projection::ALL
            .iter()
            .map(|&p| {
                let (r, c) = self.projection(p).weight.shape();
                r * c
            })
            .sum();
        let head = if self.head_trainable { 0 } else { self.head.len() };
        self.embedding.len() + frozen + head + self.trainable_params()
    }

    /// Trainable values in a fixed order: Q, K, V adapters, then the head.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for p in Projection::ALL {
            out.extend(self.projection(p).adapter.flat_params());
        }
        if self.head_trainable {
            out.extend_from_slice(self.head.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.trainable_params() {
            return Err(Error::argument(format!(
                "expected {} parameters, got {}",
                self.trainable_params(),
                values.len()
            )));
        }
        let mut rest = values;
        for p in Projection::ALL {
            let adapter = &mut self.projection_mut(p).adapter;
            let (head, tail) = rest.split_at(adapter.trainable_params());
            adapter.set_flat_params(head)?;
            rest = tail;
        }
        if self.head_trainable {
            self.head.data_mut().copy_from_slice(rest);
        }
        Ok(())
    }

    /// Digest of every frozen weight in its stored form.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.embedding.to_bytes());
        for p in Projection::ALL {
            h.update(self.projection(p).weight.to_bytes());
        }
        if !self.head_trainable {
            h.update(self.head.to_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
