use crate::error::{Error, Result};

use super::tensor::RealTensor;

pub(crate) const WORD_BITS: usize = 64;

#[inline]
pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask selecting the valid bits of the last word of a `bits`-long run.
#[inline]
pub(crate) fn tail_mask(bits: usize) -> u64 {
    match bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// The binarization used everywhere in the crate: `sign(0) = +1`.
#[inline]
pub fn sign(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Bit-packed tensor of ±1 values.
///
/// Element `i` lives in bit `i % 64` of word `i / 64` (little-endian within a
/// word). A set bit encodes `+1`, a clear bit encodes `-1`. Bits past the last
/// element are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
}

impl BitTensor {
    /// All elements `-1`.
    pub fn negative(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            words: vec![0; words_for(n)],
        }
    }

    /// All elements `+1`.
    pub fn positive(shape: Vec<usize>) -> Self {
        let mut t = Self::negative(shape);
        t.words.iter_mut().for_each(|w| *w = u64::MAX);
        t.clear_padding();
        t
    }

    /// Wraps raw words, rejecting a wrong word count or dirty padding.
    pub fn from_words(shape: Vec<usize>, words: Vec<u64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if words.len() != words_for(n) {
            return Err(Error::LengthMismatch {
                left: words_for(n),
                right: words.len(),
            });
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(n) != 0 {
                return Err(Error::InvalidArgument(
                    "padding bits beyond the last element must be zero".into(),
                ));
            }
        }
        Ok(Self { shape, words })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut t = Self::negative(shape);
        for i in 0..t.len() {
            if f(i) {
                t.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len());
        self.words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1
    }

    /// Decoded ±1 value of element `i`.
    #[inline]
    pub fn value(&self, i: usize) -> f32 {
        if self.bit(i) {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, positive: bool) {
        let (w, b) = (i / WORD_BITS, i % WORD_BITS);
        if positive {
            self.words[w] |= 1 << b;
        } else {
            self.words[w] &= !(1 << b);
        }
    }

    /// Elementwise negation.
    pub fn complement(&self) -> Self {
        let mut out = Self {
            shape: self.shape.clone(),
            words: self.words.iter().map(|w| !w).collect(),
        };
        out.clear_padding();
        out
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::LengthMismatch {
                left: shape.iter().product(),
                right: self.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    fn clear_padding(&mut self) {
        let n = self.len();
        if let Some(last) = self.words.last_mut() {
            *last &= tail_mask(n);
        }
    }
}

/// Binarizes a real tensor with `sign(0) = +1`.
pub fn pack(v: &RealTensor) -> BitTensor {
    let mut out = BitTensor::negative(v.shape().to_vec());
    for (chunk, word) in v.values().chunks(WORD_BITS).zip(out.words.iter_mut()) {
        let mut w = 0u64;
        for (b, &x) in chunk.iter().enumerate() {
            w |= ((x >= 0.0) as u64) << b;
        }
        *word = w;
    }
    out
}

/// Decodes bits to `+1.0` / `-1.0`.
pub fn unpack(b: &BitTensor) -> RealTensor {
    RealTensor::from_parts(b.shape.clone(), (0..b.len()).map(|i| b.value(i)).collect())
}

/// Row-major bit matrix whose rows each start on a word boundary.
///
/// This is the operand layout of [`bin_gemm`](super::bin_gemm): a dot product
/// between two rows is a straight walk over `words_per_row` words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    stride: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn negative(rows: usize, cols: usize) -> Self {
        let stride = words_for(cols);
        Self {
            rows,
            cols,
            stride,
            words: vec![0; rows * stride],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::negative(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    /// Packs a row-major slice of reals (`sign(0) = +1`).
    pub fn pack_rows(rows: usize, cols: usize, values: &[f32]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: rows * cols,
                right: values.len(),
            });
        }
        let mut m = Self::negative(rows, cols);
        for (r, row) in values.chunks(cols.max(1)).take(rows).enumerate() {
            let dst = &mut m.words[r * m.stride..(r + 1) * m.stride];
            for (chunk, word) in row.chunks(WORD_BITS).zip(dst.iter_mut()) {
                let mut w = 0u64;
                for (b, &x) in chunk.iter().enumerate() {
                    w |= ((x >= 0.0) as u64) << b;
                }
                *word = w;
            }
        }
        Ok(m)
    }

    /// Re-lays a rank-2 [`BitTensor`] with word-aligned rows.
    pub fn from_tensor(t: &BitTensor) -> Result<Self> {
        let [rows, cols] = t.shape()[..] else {
            return Err(Error::InvalidArgument(format!(
                "expected a rank-2 bit tensor, got shape {:?}",
                t.shape()
            )));
        };
        if cols % WORD_BITS == 0 {
            return Ok(Self {
                rows,
                cols,
                stride: cols / WORD_BITS,
                words: t.words().to_vec(),
            });
        }
        Ok(Self::from_fn(rows, cols, |r, c| t.bit(r * cols + c)))
    }

    /// Densely packed copy, shape `[rows, cols]`.
    pub fn to_tensor(&self) -> BitTensor {
        if self.cols.is_multiple_of(WORD_BITS) {
            return BitTensor {
                shape: vec![self.rows, self.cols],
                words: self.words.clone(),
            };
        }
        BitTensor::from_fn(vec![self.rows, self.cols], |i| {
            self.get(i / self.cols, i % self.cols)
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.stride..(r + 1) * self.stride]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [u64] {
        &mut self.words[r * self.stride..(r + 1) * self.stride]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.words[r * self.stride + c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, positive: bool) {
        let w = &mut self.words[r * self.stride + c / WORD_BITS];
        if positive {
            *w |= 1 << (c % WORD_BITS);
        } else {
            *w &= !(1 << (c % WORD_BITS));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_signs() {
        let v = RealTensor::new(vec![4], vec![1.0, -1.0, 0.5, -0.2]).unwrap();
        let b = pack(&v);
        assert_eq!(b.words(), &[0b0101]);
        let z = pack(&RealTensor::new(vec![1], vec![0.0]).unwrap());
        assert!(z.bit(0));
    }

    #[test]
    fn unpack_values() {
        let b = BitTensor::from_fn(vec![2], |i| i == 0);
        assert_eq!(unpack(&b).values(), &[1.0, -1.0]);
        let ones = BitTensor::positive(vec![64]);
        assert_eq!(ones.words(), &[u64::MAX]);
        assert!(unpack(&ones).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn padding_stays_clear() {
        let t = BitTensor::positive(vec![3, 5]);
        assert_eq!(t.words(), &[(1 << 15) - 1]);
        assert_eq!(t.complement().words(), &[0]);
        assert!(BitTensor::from_words(vec![3], vec![0b1000]).is_err());
        assert!(BitTensor::from_words(vec![65], vec![0]).is_err());
    }

    #[test]
    fn matrix_tensor_relayout() {
        let t = BitTensor::from_fn(vec![3, 70], |i| i % 3 == 0);
        let m = BitMatrix::from_tensor(&t).unwrap();
        assert_eq!(m.words_per_row(), 2);
        for r in 0..3 {
            for c in 0..70 {
                assert_eq!(m.get(r, c), t.bit(r * 70 + c));
            }
        }
        assert_eq!(m.to_tensor(), t);
        assert_eq!(m.transpose().transpose(), m);
    }

    proptest! {
        #[test]
        fn pack_matches_elementwise_sign(v in proptest::collection::vec(-10.0f32..10.0, 0..200)) {
            let t = RealTensor::new(vec![v.len()], v.clone()).unwrap();
            let round = unpack(&pack(&t));
            for (x, y) in v.iter().zip(round.values()) {
                prop_assert_eq!(sign(*x), *y);
            }
            // pack is idempotent under unpack . pack
            prop_assert_eq!(pack(&round), pack(&t));
        }

        #[test]
        fn bit_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
            let b = BitTensor::from_fn(vec![bits.len()], |i| bits[i]);
            prop_assert_eq!(pack(&unpack(&b)), b);
        }
    }
}
