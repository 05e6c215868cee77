//! Linear layer with a frozen quantized weight and a full-precision adapter.
//! The weight is dequantized on every call and never receives a gradient.

use crate::adapter::{linear_backward, linear_forward, Adapter, AdapterGrads};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quantize::{dequantize, QuantizedTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    w_q: QuantizedTensor,
    pub adapter: Adapter,
}

impl QuantizedLinear {
    pub fn new(w_q: QuantizedTensor, adapter: Adapter) -> Result<Self> {
        let layer = Self { w_q, adapter };
        layer.check_adapter()?;
        Ok(layer)
    }

    /// The frozen weight. There is deliberately no mutable accessor.
    pub fn weight(&self) -> &QuantizedTensor {
        &self.w_q
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w_q.shape()
    }

    fn check_adapter(&self) -> Result<()> {
        let dims = match &self.adapter {
            Adapter::None => return Ok(()),
            Adapter::Lora(a) => (a.in_dim(), a.out_dim()),
            Adapter::AdaLora(a) => (a.in_dim(), a.out_dim()),
        };
        if dims != self.w_q.shape() {
            return Err(Error::Shape {
                op: "quantized linear adapter",
                lhs: self.w_q.shape(),
                rhs: dims,
            });
        }
        Ok(())
    }
}

/// `x dequant(W_q) + adapter(x)`.
pub fn qlora_forward(x: &Matrix, layer: &QuantizedLinear) -> Result<Matrix> {
    layer.check_adapter()?;
    linear_forward(x, &dequantize(&layer.w_q)?, &layer.adapter)
}

/// Adapter gradients and `dL/dx` (through the dequantized weight). No
/// gradient is produced for the quantized weight.
pub fn qlora_backward(x: &Matrix, layer: &QuantizedLinear, upstream: &Matrix) -> Result<(AdapterGrads, Matrix)> {
    layer.check_adapter()?;
    linear_backward(x, &dequantize(&layer.w_q)?, &layer.adapter, upstream)
}
