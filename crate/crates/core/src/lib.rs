//! Parameter-efficient fine-tuning toolkit: LoRA and AdaLoRA adapters,
//! affine and NF4 weight quantization, a quantized linear layer with
//! adapter-only gradients, ROUGE/WER metrics, and a small attention model to
//! train them on.

pub mod adalora;
pub mod adapter;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod lora;
pub mod matrix;
pub mod metrics;
pub mod qlora;
pub mod quantize;
pub mod trainer;

pub use adapter::{Adapter, AdapterGrads, AdapterKind};
pub use error::{Error, Result};
pub use exec::Exec;
pub use matrix::Matrix;
