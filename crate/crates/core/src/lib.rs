//! Decoder-only patched-attention forecasting model.

pub mod tensor;
pub mod model;
pub mod data;
pub mod checkpoint;
pub mod training;
pub mod eval;
pub mod inference;
