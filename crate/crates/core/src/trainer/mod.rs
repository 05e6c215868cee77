//! Desk-scale training harness for the adapter and quantization code.

pub mod audit;
pub mod config;
pub mod model;
pub mod report;
pub mod task;
pub mod train;

pub use audit::{finite_difference_audit, AuditReport};
pub use config::{AdapterConfig, BudgetConfig, ModelDims, Precision, QuantConfig, RunConfig, TeacherConfig};
pub use model::{AdapterizedModel, FrozenWeight, Linear, ModelGrads, Projection};
pub use report::{compression_report, CompressionReport, CompressionRow};
pub use task::{make_toy_task, make_toy_task_with, Example, ToyTask};
pub use train::{build_model, train, train_model_with, write_checkpoint, TrainReport};
