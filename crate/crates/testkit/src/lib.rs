//! Reference implementations written straight from the format and metric
//! definitions, kept apart from the production code they check, plus a
//! synthetic shapes dataset.

pub mod crc;
pub mod eval;
pub mod shapes;
pub mod wire;
