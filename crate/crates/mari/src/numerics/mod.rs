//! Tensors, reverse-mode differentiation, and the small dense linear algebra
//! and order statistics the rest of the crate leans on.

pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod stats;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use linalg::{pca_fit, project_split, reduced_qr, spectral_norm, sym_eigen, Basis, PcaFit};
pub use optim::Adam;
pub use stats::{entropy, median, quantile};
pub use tape::{backward, Grads, Tape, Var};
pub use tensor::Tensor;
