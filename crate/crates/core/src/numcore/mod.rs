//! Dense f64 tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
mod gemm;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Bound, Param, ParamId, ParamSet};
pub use tape::{Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;

/// Adds `src` into `dst` element by element.
pub fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
