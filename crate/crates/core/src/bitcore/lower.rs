//! Reindexing helpers that turn 1x1 convolutions into matrix products.

use crate::error::{Error, Result};

use super::bits::{BitMatrix, BitTensor};
use super::tensor::RealTensor;

fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::InvalidArgument(format!(
            "expected a C x H x W tensor, got shape {s:?}"
        ))),
    }
}

/// `C x H x W` to `(H*W) x C`: row `p` is the channel vector of pixel `p`.
pub fn lower_conv1x1(x: &BitTensor) -> Result<BitTensor> {
    let (c, h, w) = chw(x.shape())?;
    let hw = h * w;
    Ok(BitTensor::from_fn(vec![hw, c], |i| x.bit((i % c) * hw + i / c)))
}

/// Inverse of [`lower_conv1x1`].
pub fn raise_conv1x1(m: &BitTensor, c: usize, h: usize, w: usize) -> Result<BitTensor> {
    if m.shape() != [h * w, c] {
        return Err(Error::shape(&[h * w, c], m.shape()));
    }
    let hw = h * w;
    Ok(BitTensor::from_fn(vec![c, h, w], |i| {
        m.bit((i % hw) * c + i / hw)
    }))
}

/// Binarizes a real `C x H x W` map after adding a per-channel bias and
/// writes it straight into the lowered `(H*W) x C` GEMM operand.
pub(crate) fn sign_lowered(x: &RealTensor, bias: &[f32]) -> Result<BitMatrix> {
    let (c, h, w) = x.chw()?;
    if bias.len() != c {
        return Err(Error::LengthMismatch {
            left: c,
            right: bias.len(),
        });
    }
    let hw = h * w;
    let mut m = BitMatrix::negative(hw, c);
    let v = x.values();
    for (ch, &b) in bias.iter().enumerate() {
        let plane = &v[ch * hw..(ch + 1) * hw];
        let (word, bit) = (ch / 64, ch % 64);
        for (p, &val) in plane.iter().enumerate() {
            if val + b >= 0.0 {
                m.row_mut(p)[word] |= 1 << bit;
            }
        }
    }
    Ok(m)
}

fn check_shift(h: usize, w: usize, dy: isize, dx: isize) -> Result<()> {
    if dy.unsigned_abs() >= h.max(1) || dx.unsigned_abs() >= w.max(1) {
        return Err(Error::InvalidArgument(format!(
            "shift ({dy}, {dx}) too large for a {h} x {w} map"
        )));
    }
    Ok(())
}

/// Spatial translation `out[c, i, j] = x[c, i - dy, j - dx]`; vacated positions
/// take the `-1` bit.
pub fn shift_pad(x: &BitTensor, dy: isize, dx: isize) -> Result<BitTensor> {
    let (c, h, w) = chw(x.shape())?;
    check_shift(h, w, dy, dx)?;
    Ok(BitTensor::from_fn(vec![c, h, w], |idx| {
        let (ch, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
        let (si, sj) = (i as isize - dy, j as isize - dx);
        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
            false
        } else {
            x.bit(ch * h * w + si as usize * w + sj as usize)
        }
    }))
}

/// Real-valued counterpart of [`shift_pad`] with zero fill. Applied ahead of
/// the pre-sign bias, padded positions binarize as `sign(0 + bias)`.
pub fn shift_pad_real(x: &RealTensor, dy: isize, dx: isize) -> Result<RealTensor> {
    let (c, h, w) = x.chw()?;
    check_shift(h, w, dy, dx)?;
    let src = x.values();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            let si = i as isize - dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let sj = j as isize - dx;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                out[(ch * h + i) * w + j] = src[(ch * h + si as usize) * w + sj as usize];
            }
        }
    }
    Ok(RealTensor::from_parts(vec![c, h, w], out))
}
