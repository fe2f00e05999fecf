//! Microscaling (MX) block formats.
//!
//! An MX block stores `k` narrow elements that share one power-of-two scale
//! encoded as E8M0. This crate provides:
//!
//! * [`element`]: bit-exact FP8/FP6/FP4/INT8 element codecs and the E8M0 scale
//! * [`block`]: FP32 → MX block conversion and dequantization
//! * [`tensor`]: tensors quantized blockwise along a principal axis
//! * [`linalg`]: two-level-scaled dot products and GEMM with FP32 accumulation
//! * [`flow`]: quantized linear layers, FP32 master weights and a small training demo
//! * [`io`]: the MXT and F32 tensor file formats
//!
//! ```
//! use mx_core::{dequantize_block, quantize_block, ElementFormat, QuantConfig};
//!
//! let cfg = QuantConfig::new(ElementFormat::E2M1).with_block_size(4);
//! let block = quantize_block(&[0.0, 2.0, 4.0, -6.5], &cfg).unwrap();
//! assert_eq!(block.scale.to_f64(), 1.0);
//! assert_eq!(dequantize_block(&block), [0.0, 2.0, 4.0, -6.0]);
//! ```

pub mod block;
pub mod cli;
pub mod element;
pub mod error;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod tensor;

pub use block::{
    compute_shared_exp, dequantize_block, quantization_error, quantize_block, MxBlock, QuantConfig,
    QuantErrorReport, QuantStats, SpecialPolicy,
};
pub use element::{
    decode_element, decode_scale, encode_element, enumerate_format, ElementFormat, RoundingMode, ScaleE8M0,
};
pub use error::{MxError, Result};
pub use flow::{
    linear_backward, linear_forward, sgd_step, train_demo, FlowConfig, GemmOperand, GemmPrecision,
    QuantizedLinearState, TrainOutcome, TrainRecord,
};
pub use linalg::{compare_to_fp32, fp32_gemm, mx_dot, mx_gemm, quantized_gemm, GemmResult};
pub use metrics::ErrorReport;
pub use tensor::{dequantize_tensor, quantize_tensor, transpose_2d, Fp32Tensor, MxTensor};
