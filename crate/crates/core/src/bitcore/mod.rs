//! Bit-packed ±1 tensors and the XNOR-popcount matrix product.

mod bits;
mod gemm;
mod lower;
mod tensor;

pub use bits::{pack, sign, unpack, BitMatrix, BitTensor};
pub use gemm::{bin_dot, bin_gemm, bin_gemm_tensors};
pub use lower::{lower_conv1x1, raise_conv1x1, shift_pad, shift_pad_real};
pub use tensor::{IntTensor, RealTensor};

pub(crate) use bits::words_for;
pub(crate) use lower::sign_lowered;
