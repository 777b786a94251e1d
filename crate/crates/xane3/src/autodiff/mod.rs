//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use params::ParamStore;
pub use tape::{sigmoid, softplus, BinKind, Coeff3, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
