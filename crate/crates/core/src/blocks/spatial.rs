use rand::Rng;

use crate::bitcore::RealTensor;
use crate::error::{Error, Result};

use super::conv::{prelu, BatchNorm, PRELU_INIT};

/// Output channel `j` is input channel `j mod C`.
pub fn replicate_channels(x: &RealTensor, r: usize) -> Result<RealTensor> {
    if r < 1 {
        return Err(Error::InvalidArgument("replication factor must be >= 1".into()));
    }
    let (c, h, w) = x.chw()?;
    if r == 1 {
        return Ok(x.clone());
    }
    let mut values = Vec::with_capacity(r * x.len());
    for _ in 0..r {
        values.extend_from_slice(x.values());
    }
    Ok(RealTensor::from_parts(vec![r * c, h, w], values))
}

/// Non-overlapping `S x S` mean pooling.
pub fn avgpool(x: &RealTensor, s: usize) -> Result<RealTensor> {
    let (c, h, w) = x.chw()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h} x {w} map is not divisible by pooling factor {s}"
        )));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / s, w / s);
    let norm = (s * s) as f32;
    let v = x.values();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &v[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0f32;
                for di in 0..s {
                    let row = &plane[(i * s + di) * w + j * s..][..s];
                    acc += row.iter().sum::<f32>();
                }
                out.push(acc / norm);
            }
        }
    }
    Ok(RealTensor::from_parts(vec![c, oh, ow], out))
}

/// Real depthwise 3x3 convolution (zero pad 1, stride `S`), batch norm, PReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DwConvModule3x3 {
    pub channels: usize,
    /// `C x 3 x 3`, one filter per channel.
    pub weights: Vec<f32>,
    pub stride: usize,
    pub bn: BatchNorm,
    pub prelu_slope: Vec<f32>,
}

impl DwConvModule3x3 {
    pub fn new(channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            channels,
            weights: (0..channels * 9).map(|_| rng.gen_range(-1.0f32..=1.0)).collect(),
            stride,
            bn: BatchNorm::identity(channels),
            prelu_slope: vec![PRELU_INIT; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.stride < 1 {
            return Err(Error::Config("depthwise stride must be >= 1".into()));
        }
        if self.weights.len() != 9 * c || self.bn.channels() != c || self.prelu_slope.len() != c {
            return Err(Error::Config(format!(
                "depthwise parameter shapes disagree with {c} channels"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        let (c, h, w) = x.chw()?;
        let s = self.stride;
        if c != self.channels {
            return Err(Error::shape(&[self.channels, h, w], x.shape()));
        }
        if h % s != 0 || w % s != 0 {
            return Err(Error::InvalidArgument(format!(
                "{h} x {w} map is not divisible by stride {s}"
            )));
        }
        let (oh, ow) = (h / s, w / s);
        let mut out = depthwise3x3(x.values(), c, h, w, s, &self.weights);
        let (scale, shift) = self.bn.folded();
        for ch in 0..c {
            let a = self.prelu_slope[ch];
            for v in &mut out[ch * oh * ow..(ch + 1) * oh * ow] {
                *v = prelu(*v * scale[ch] + shift[ch], a);
            }
        }
        RealTensor::new(vec![c, oh, ow], out)
    }
}

/// Raw depthwise correlation, taps in row-major window order.
pub(crate) fn depthwise3x3(x: &[f32], c: usize, h: usize, w: usize, s: usize, k: &[f32]) -> Vec<f32> {
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let kern = &k[ch * 9..ch * 9 + 9];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0f32;
                for ky in 0..3 {
                    let y = (i * s + ky) as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = (j * s + kx) as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += kern[ky * 3 + kx] * plane[y as usize * w + xx as usize];
                    }
                }
                dst[i * ow + j] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn replicate_small() {
        let x = RealTensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(replicate_channels(&x, 1).unwrap(), x);
        let r = replicate_channels(&x, 2).unwrap();
        assert_eq!(r.values(), &[3.0, 4.0, 3.0, 4.0]);
        assert!(replicate_channels(&x, 0).is_err());
    }

    #[test]
    fn replicate_index_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = RealTensor::from_fn(vec![4, 3, 3], |_| rng.gen());
        let r = replicate_channels(&x, 8).unwrap();
        assert_eq!(r.shape(), &[32, 3, 3]);
        for j in 0..32 {
            assert_eq!(&r.values()[j * 9..j * 9 + 9], &x.values()[(j % 4) * 9..(j % 4) * 9 + 9]);
        }
    }

    #[test]
    fn avgpool_cases() {
        let x = RealTensor::new(vec![1, 2, 2], vec![1., 3., 5., 7.]).unwrap();
        assert_eq!(avgpool(&x, 1).unwrap(), x);
        assert_eq!(avgpool(&x, 2).unwrap().values(), &[4.0]);
        assert!(avgpool(&RealTensor::zeros(vec![1, 3, 2]), 2).is_err());
    }

    #[test]
    fn avgpool_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = RealTensor::from_fn(vec![3, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let got = avgpool(&x, 2).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let at = |a: usize, b: usize| x.values()[c * 64 + a * 8 + b] as f64;
                    let mean = (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j)
                        + at(2 * i + 1, 2 * j + 1))
                        / 4.0;
                    assert_relative_eq!(got.values()[c * 16 + i * 4 + j] as f64, mean, epsilon = 1e-6);
                }
            }
        }
    }

    fn identity_dw(c: usize, s: usize) -> DwConvModule3x3 {
        let mut w = vec![0.0; 9 * c];
        for ch in 0..c {
            w[ch * 9 + 4] = 1.0;
        }
        DwConvModule3x3 {
            channels: c,
            weights: w,
            stride: s,
            bn: BatchNorm::from_folded(vec![1.0; c], vec![0.0; c]),
            prelu_slope: vec![1.0; c],
        }
    }

    #[test]
    fn dw_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = RealTensor::from_fn(vec![2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(identity_dw(2, 1).forward(&x).unwrap(), x);
    }

    #[test]
    fn dw_ones_kernel_interior() {
        let mut m = identity_dw(1, 1);
        m.weights = vec![1.0; 9];
        let out = m.forward(&RealTensor::filled(vec![1, 4, 4], 0.5)).unwrap();
        assert_eq!(out.values()[5], 4.5);
        // corner sees four taps
        assert_eq!(out.values()[0], 2.0);
    }

    #[test]
    fn dw_stride_two_shape() {
        let m = identity_dw(1, 2);
        let out = m.forward(&RealTensor::zeros(vec![1, 224, 224])).unwrap();
        assert_eq!(out.shape(), &[1, 112, 112]);
        assert!(m.forward(&RealTensor::zeros(vec![1, 5, 4])).is_err());
    }
}
