// SPDX-License-Identifier: Apache-2.0

//! Dense tensors, seeded randomness and the small set of linear-algebra
//! kernels used everywhere else.

mod linalg;
mod rng;
mod tensor;

pub use linalg::{
    frobenius, lowrank_truncate, matmul, numeric_rank, psnr, psnr_from_mse, svd, svd_warm, Svd,
    DEFAULT_RANK_TOL, PSNR_CAP_DB, SVD_MAX_SWEEPS, SVD_TOL,
};
pub use rng::SeededRng;
pub use tensor::Tensor;
