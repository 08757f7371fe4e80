use rayon::prelude::*;

use crate::error::{Error, Result};

use super::bits::{words_for, BitMatrix, BitTensor};
use super::tensor::IntTensor;

/// Dot product of two packed ±1 vectors of length `k`: `k - 2 * popcount(a ^ b)`.
///
/// Both operands must carry exactly `ceil(k / 64)` words with zeroed padding.
pub fn bin_dot(a: &[u64], b: &[u64], k: usize) -> Result<i32> {
    let words = words_for(k);
    if a.len() != words || b.len() != words {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len().max(words),
        });
    }
    Ok(k as i32 - 2 * xor_popcount(a, b) as i32)
}

#[inline(always)]
fn xor_popcount_generic(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xor_popcount_popcnt(a: &[u64], b: &[u64]) -> u32 {
    xor_popcount_generic(a, b)
}

#[inline]
fn xor_popcount(a: &[u64], b: &[u64]) -> u32 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("popcnt") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { xor_popcount_popcnt(a, b) };
    }
    xor_popcount_generic(a, b)
}

/// Mismatch counts of one `a` row against every row of `bt`, four rows at a time.
#[inline(always)]
fn row_kernel(a_row: &[u64], bt: &BitMatrix, k: i32, out: &mut [i32]) {
    let n = bt.rows();
    let mut j = 0;
    while j + 4 <= n {
        let (b0, b1, b2, b3) = (bt.row(j), bt.row(j + 1), bt.row(j + 2), bt.row(j + 3));
        let (mut c0, mut c1, mut c2, mut c3) = (0u32, 0u32, 0u32, 0u32);
        for (w, &x) in a_row.iter().enumerate() {
            c0 += (x ^ b0[w]).count_ones();
            c1 += (x ^ b1[w]).count_ones();
            c2 += (x ^ b2[w]).count_ones();
            c3 += (x ^ b3[w]).count_ones();
        }
        out[j] = k - 2 * c0 as i32;
        out[j + 1] = k - 2 * c1 as i32;
        out[j + 2] = k - 2 * c2 as i32;
        out[j + 3] = k - 2 * c3 as i32;
        j += 4;
    }
    for (jj, o) in out.iter_mut().enumerate().skip(j) {
        *o = k - 2 * xor_popcount_generic(a_row, bt.row(jj)) as i32;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn row_kernel_popcnt(a_row: &[u64], bt: &BitMatrix, k: i32, out: &mut [i32]) {
    row_kernel(a_row, bt, k, out)
}

/// Binary matrix product `A (M x K) * B (K x N)`, with `B` supplied transposed
/// (`bt` is `N x K`) so that both operands stream row-contiguously.
///
/// Output rows are computed independently, so the result does not depend on
/// the rayon pool size.
pub fn bin_gemm(a: &BitMatrix, bt: &BitMatrix) -> Result<IntTensor> {
    if a.cols() != bt.cols() {
        return Err(Error::shape(&[a.rows(), a.cols()], &[bt.cols(), bt.rows()]));
    }
    let (m, n, k) = (a.rows(), bt.rows(), a.cols() as i32);
    let mut out = vec![0i32; m * n];
    if n == 0 {
        return IntTensor::new(vec![m, n], out);
    }
    #[cfg(target_arch = "x86_64")]
    let fast = std::arch::is_x86_feature_detected!("popcnt");
    #[cfg(not(target_arch = "x86_64"))]
    let fast = false;

    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = a.row(i);
        #[cfg(target_arch = "x86_64")]
        if fast {
            // SAFETY: the feature was detected at runtime.
            unsafe { row_kernel_popcnt(a_row, bt, k, row) };
            return;
        }
        let _ = fast;
        row_kernel(a_row, bt, k, row);
    });
    IntTensor::new(vec![m, n], out)
}

/// [`bin_gemm`] on dense rank-2 tensors `A: [M, K]`, `B: [K, N]`.
pub fn bin_gemm_tensors(a: &BitTensor, b: &BitTensor) -> Result<IntTensor> {
    let am = BitMatrix::from_tensor(a)?;
    let bm = BitMatrix::from_tensor(b)?;
    if am.cols() != bm.rows() {
        return Err(Error::shape(&[am.cols(), bm.cols()], b.shape()));
    }
    bin_gemm(&am, &bm.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcore::{pack, unpack, RealTensor};
    use proptest::prelude::*;

    fn bits_from_signs(v: &[f32]) -> BitTensor {
        pack(&RealTensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn dot_self_and_complement() {
        let a = BitTensor::from_fn(vec![64], |i| i % 5 == 1);
        assert_eq!(bin_dot(a.words(), a.words(), 64).unwrap(), 64);
        let c = a.complement();
        assert_eq!(bin_dot(a.words(), c.words(), 64).unwrap(), -64);
    }

    #[test]
    fn dot_small_vector() {
        let a = bits_from_signs(&[1., 1., -1., 1., -1., -1., 1., -1.]);
        let b = bits_from_signs(&[1., -1., -1., 1., 1., -1., -1., -1.]);
        // unpacked multiply-accumulate
        let expect: f32 = unpack(&a)
            .values()
            .iter()
            .zip(unpack(&b).values())
            .map(|(x, y)| x * y)
            .sum();
        assert_eq!(expect, 2.0);
        assert_eq!(bin_dot(a.words(), b.words(), 8).unwrap(), 2);
    }

    #[test]
    fn dot_length_mismatch() {
        assert!(bin_dot(&[0, 0], &[0], 65).is_err());
        assert!(bin_dot(&[0], &[0], 65).is_err());
    }

    #[test]
    fn gemm_small_cases() {
        let one = BitTensor::positive(vec![1, 1]);
        let c = bin_gemm_tensors(&one, &one).unwrap();
        assert_eq!(c.values(), &[1]);

        let a = BitTensor::positive(vec![4, 8]);
        let b = BitTensor::positive(vec![8, 3]);
        let c = bin_gemm_tensors(&a, &b).unwrap();
        assert_eq!(c.shape(), &[4, 3]);
        assert!(c.values().iter().all(|&v| v == 8));
    }

    #[test]
    fn gemm_dimension_mismatch() {
        let a = BitTensor::positive(vec![2, 3]);
        let b = BitTensor::positive(vec![4, 2]);
        assert!(bin_gemm_tensors(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn dot_parity_and_range(bits in proptest::collection::vec(any::<(bool, bool)>(), 1..200)) {
            let k = bits.len();
            let a = BitTensor::from_fn(vec![k], |i| bits[i].0);
            let b = BitTensor::from_fn(vec![k], |i| bits[i].1);
            let d = bin_dot(a.words(), b.words(), k).unwrap();
            prop_assert!(d.unsigned_abs() as usize <= k);
            prop_assert_eq!((d + k as i32).rem_euclid(2), 0);
            prop_assert_eq!(bin_dot(a.words(), a.words(), k).unwrap(), k as i32);
            prop_assert_eq!(bin_dot(a.words(), a.complement().words(), k).unwrap(), -(k as i32));
        }
    }
}
