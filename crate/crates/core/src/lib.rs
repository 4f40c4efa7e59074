//! LCPFormer: a point-cloud transformer with local context propagation,
//! built on a minimal tape-based autodiff core so the whole mechanism can
//! be trained and verified on synthetic point clouds at desk scale.

pub mod attention;
pub mod config;
pub mod gradcheck;
pub mod io;
pub mod lcp;
pub mod model;
pub mod points;
pub mod synth;
pub mod tensor;
pub mod training;
