//! Dense linear algebra: the matrix type, thin SVD, and damped symmetric roots.

mod eigen;
mod matrix;
mod svd;

pub use eigen::{regularized_root_diag, sym_eigen, sym_root, sym_root_pair, SymRoots, SymmetricEigen};
pub use matrix::{dot, norm, Matrix};
pub use svd::{svd_rank, svd_thin, svd_truncate, SvdFactors};
