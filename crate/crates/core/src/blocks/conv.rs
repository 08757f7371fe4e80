use rand::Rng;

use crate::bitcore::{bin_gemm, shift_pad_real, sign, sign_lowered, BitMatrix, RealTensor};
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const PRELU_INIT: f32 = 0.25;

/// Which weights feed the 1x1 binary convolution.
///
/// `Real` runs the shadow weights against binary activations (training step 1);
/// `Binary` runs the packed sign of the shadow weights through `bin_gemm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Real,
    Binary,
}

/// Per-channel batch norm parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    /// Batch norm that is already folded: `y = scale * x + shift` exactly.
    pub fn from_folded(scale: Vec<f32>, shift: Vec<f32>) -> Self {
        let c = scale.len();
        Self {
            gamma: scale,
            beta: shift,
            mean: vec![0.0; c],
            var: vec![1.0; c],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference form `(scale, shift)` with `scale = gamma / sqrt(var + eps)`
    /// and `shift = beta - mean * scale`.
    pub fn folded(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

#[inline]
pub(crate) fn prelu(x: f32, slope: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// One of the `P` parallel residual branches of a 1x1 module.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    /// Learnable pre-sign bias, one per input channel.
    pub bias: Vec<f32>,
    /// Shadow weights, `c_out x c_in` row-major.
    pub weights_real: Vec<f32>,
    /// `sign(weights_real)`, rows are output channels.
    pub weights_bin: BitMatrix,
    pub bn: BatchNorm,
}

impl BranchParams {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let weights_real: Vec<f32> = (0..channels * channels)
            .map(|_| rng.gen_range(-1.0f32..=1.0))
            .collect();
        Self::from_weights(channels, vec![0.0; channels], weights_real, BatchNorm::identity(channels))
    }

    pub fn from_weights(channels: usize, bias: Vec<f32>, weights_real: Vec<f32>, bn: BatchNorm) -> Self {
        let weights_bin = BitMatrix::pack_rows(channels, channels, &weights_real)
            .expect("weight count matches channels^2");
        Self {
            bias,
            weights_real,
            weights_bin,
            bn,
        }
    }

    /// Re-derives the packed weights from the shadow weights.
    pub fn rebinarize(&mut self) {
        let c = self.bias.len();
        self.weights_bin = BitMatrix::pack_rows(c, c, &self.weights_real)
            .expect("weight count matches channels^2");
    }
}

/// 1x1 convolution module: `P` branches of bias, sign, binary 1x1 conv and
/// batch norm, summed onto the identity, then an optional PReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvModule1x1 {
    pub channels: usize,
    pub branches: Vec<BranchParams>,
    /// Per-channel slope; `None` for the identity-path module of a transition block.
    pub prelu_slope: Option<Vec<f32>>,
    pub weight_mode: WeightMode,
}

impl ConvModule1x1 {
    pub fn new(channels: usize, parallel: usize, with_prelu: bool, rng: &mut impl Rng) -> Self {
        assert!(parallel >= 1, "a module needs at least one branch");
        let branches = (0..parallel).map(|_| BranchParams::new(channels, rng)).collect();
        Self {
            channels,
            branches,
            prelu_slope: with_prelu.then(|| vec![PRELU_INIT; channels]),
            weight_mode: WeightMode::Binary,
        }
    }

    pub fn parallel(&self) -> usize {
        self.branches.len()
    }

    /// Checks the structural invariants (shared widths, `P >= 1`).
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.branches.is_empty() {
            return Err(Error::Config("conv module without branches".into()));
        }
        for b in &self.branches {
            if b.bias.len() != c
                || b.weights_real.len() != c * c
                || b.weights_bin.rows() != c
                || b.weights_bin.cols() != c
                || b.bn.channels() != c
                || b.bn.var.len() != c
                || b.bn.mean.len() != c
                || b.bn.beta.len() != c
            {
                return Err(Error::Config(format!(
                    "branch parameter shapes disagree with {c} channels"
                )));
            }
            if b.bn.var.iter().any(|v| *v < 0.0) {
                return Err(Error::Config("negative batch norm variance".into()));
            }
        }
        if let Some(s) = &self.prelu_slope {
            if s.len() != c {
                return Err(Error::Config("PReLU slope length".into()));
            }
        }
        Ok(())
    }

    /// `PReLU( sum_p BN_p(conv_p(sign(x + bias_p))) + x )`.
    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        self.forward_impl(x, None, None)
    }

    /// Like [`forward`](Self::forward), with `extra` added to the identity sum
    /// before the PReLU. The building block routes its own identity path here.
    pub fn forward_with_identity(&self, x: &RealTensor, extra: &RealTensor) -> Result<RealTensor> {
        self.forward_impl(x, None, Some(extra))
    }

    pub(crate) fn forward_impl(
        &self,
        x: &RealTensor,
        shifts: Option<&[(isize, isize)]>,
        extra: Option<&RealTensor>,
    ) -> Result<RealTensor> {
        let (c, h, w) = x.chw()?;
        if c != self.channels {
            return Err(Error::shape(&[self.channels, h, w], x.shape()));
        }
        if let Some(e) = extra {
            if e.shape() != x.shape() {
                return Err(Error::shape(x.shape(), e.shape()));
            }
        }
        let hw = h * w;
        let mut sum = vec![0.0f32; c * hw];
        for (p, branch) in self.branches.iter().enumerate() {
            let shifted;
            let input = match shifts {
                Some(s) if s[p] != (0, 0) => {
                    shifted = shift_pad_real(x, s[p].0, s[p].1)?;
                    &shifted
                }
                _ => x,
            };
            let acc = self.branch_accumulate(branch, input)?;
            let (scale, shift) = branch.bn.folded();
            for o in 0..c {
                let (s, t) = (scale[o], shift[o]);
                let row = &mut sum[o * hw..(o + 1) * hw];
                for (dst, a) in row.iter_mut().zip(&acc[o * hw..(o + 1) * hw]) {
                    *dst += a * s + t;
                }
            }
        }
        for (dst, id) in sum.iter_mut().zip(x.values()) {
            *dst += id;
        }
        if let Some(e) = extra {
            for (dst, id) in sum.iter_mut().zip(e.values()) {
                *dst += id;
            }
        }
        if let Some(slopes) = &self.prelu_slope {
            for (o, &a) in slopes.iter().enumerate() {
                for v in &mut sum[o * hw..(o + 1) * hw] {
                    *v = prelu(*v, a);
                }
            }
        }
        RealTensor::new(vec![c, h, w], sum)
    }

    /// Convolution accumulator laid out `c_out x (H*W)`, exact integers in both modes.
    fn branch_accumulate(&self, branch: &BranchParams, x: &RealTensor) -> Result<Vec<f32>> {
        let (c, h, w) = x.chw()?;
        let hw = h * w;
        match self.weight_mode {
            WeightMode::Binary => {
                let lowered = sign_lowered(x, &branch.bias)?;
                let acc = bin_gemm(&lowered, &branch.weights_bin)?;
                let acc = acc.values();
                let mut out = vec![0.0f32; c * hw];
                for p in 0..hw {
                    for o in 0..c {
                        out[o * hw + p] = acc[p * c + o] as f32;
                    }
                }
                Ok(out)
            }
            WeightMode::Real => {
                let mut act = vec![0.0f32; c * hw];
                for ch in 0..c {
                    let b = branch.bias[ch];
                    for (dst, v) in act[ch * hw..(ch + 1) * hw]
                        .iter_mut()
                        .zip(&x.values()[ch * hw..(ch + 1) * hw])
                    {
                        *dst = sign(v + b);
                    }
                }
                let mut out = vec![0.0f32; c * hw];
                sgemm(c, c, hw, &branch.weights_real, &act, &mut out);
                Ok(out)
            }
        }
    }
}

/// Row-major `out (m x n) = a (m x k) * b (k x n)`.
pub(crate) fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: slice lengths match the dimensions and strides passed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial offsets for the `F*F` branches of an `F x F` kernel, row-major
/// over the window, centre at `(0, 0)`.
pub fn fxf_shifts(f: usize) -> Vec<(isize, isize)> {
    let r = (f / 2) as isize;
    (0..f * f)
        .map(|p| ((p / f) as isize - r, (p % f) as isize - r))
        .collect()
}

/// Binary `F x F` convolution built from `F^2` parallel 1x1 branches, each
/// reading the input shifted (zero fill) to one window offset before its bias.
pub fn fxf_via_shifts(m: &ConvModule1x1, x: &RealTensor) -> Result<RealTensor> {
    let p = m.parallel();
    let f = (p as f64).sqrt().round() as usize;
    if f * f != p || f.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "branch count {p} is not the square of an odd kernel size"
        )));
    }
    let shifts = fxf_shifts(f);
    m.forward_impl(x, Some(&shifts), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcore::{shift_pad_real, sign};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_module() -> ConvModule1x1 {
        ConvModule1x1 {
            channels: 1,
            branches: vec![BranchParams::from_weights(
                1,
                vec![0.0],
                vec![1.0],
                BatchNorm::identity(1),
            )],
            prelu_slope: Some(vec![1.0]),
            weight_mode: WeightMode::Binary,
        }
    }

    fn scalar(v: f32) -> RealTensor {
        RealTensor::new(vec![1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn unit_module_hand_values() {
        let m = unit_module();
        let bn = 1.0 / (1.0f32 + BN_EPS).sqrt();
        assert_relative_eq!(m.forward(&scalar(0.5)).unwrap().values()[0], 1.5, epsilon = 1e-5);
        assert_relative_eq!(m.forward(&scalar(0.5)).unwrap().values()[0], bn + 0.5);
        assert_relative_eq!(m.forward(&scalar(-2.0)).unwrap().values()[0], -3.0, epsilon = 1e-5);
    }

    /// Straight-line float evaluation of the module formula.
    fn oracle(m: &ConvModule1x1, x: &RealTensor, shifts: Option<&[(isize, isize)]>) -> Vec<f32> {
        let (c, h, w) = x.chw().unwrap();
        let hw = h * w;
        let mut out = x.values().to_vec();
        for (p, br) in m.branches.iter().enumerate() {
            let xs = match shifts {
                Some(s) => shift_pad_real(x, s[p].0, s[p].1).unwrap(),
                None => x.clone(),
            };
            for o in 0..c {
                for px in 0..hw {
                    let mut acc = 0.0f64;
                    for i in 0..c {
                        let a = sign(xs.values()[i * hw + px] + br.bias[i]) as f64;
                        let wv = match m.weight_mode {
                            WeightMode::Real => br.weights_real[o * c + i] as f64,
                            WeightMode::Binary => sign(br.weights_real[o * c + i]) as f64,
                        };
                        acc += a * wv;
                    }
                    let bn = &br.bn;
                    let y = bn.gamma[o] as f64 * (acc - bn.mean[o] as f64)
                        / (bn.var[o] as f64 + bn.eps as f64).sqrt()
                        + bn.beta[o] as f64;
                    out[o * hw + px] += y as f32;
                }
            }
        }
        let slopes = m.prelu_slope.as_ref().unwrap();
        for o in 0..c {
            for px in 0..hw {
                out[o * hw + px] = prelu(out[o * hw + px], slopes[o]);
            }
        }
        out
    }

    fn random_module(c: usize, p: usize, rng: &mut ChaCha8Rng) -> ConvModule1x1 {
        let mut m = ConvModule1x1::new(c, p, true, rng);
        for br in &mut m.branches {
            br.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
            br.bn.gamma.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            br.bn.beta.iter_mut().for_each(|g| *g = rng.gen_range(-0.5..0.5));
            br.bn.mean.iter_mut().for_each(|g| *g = rng.gen_range(-1.0..1.0));
            br.bn.var.iter_mut().for_each(|g| *g = rng.gen_range(0.5..2.0));
        }
        m.prelu_slope = Some((0..c).map(|_| rng.gen_range(0.0..0.5)).collect());
        m
    }

    #[test]
    fn module_matches_float_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for mode in [WeightMode::Binary, WeightMode::Real] {
            let mut m = random_module(4, 2, &mut rng);
            m.weight_mode = mode;
            let x = RealTensor::from_fn(vec![4, 2, 2], |_| rng.gen_range(-2.0..2.0));
            let got = m.forward(&x).unwrap();
            for (g, e) in got.values().iter().zip(oracle(&m, &x, None)) {
                assert_relative_eq!(*g, e, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn modes_agree_on_sign_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = random_module(8, 3, &mut rng);
        for br in &mut m.branches {
            br.weights_real.iter_mut().for_each(|w| *w = sign(*w));
            br.rebinarize();
        }
        let x = RealTensor::from_fn(vec![8, 3, 5], |_| rng.gen_range(-2.0..2.0));
        let bin = m.forward(&x).unwrap();
        m.weight_mode = WeightMode::Real;
        assert_eq!(m.forward(&x).unwrap(), bin);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = unit_module();
        assert!(m.forward(&RealTensor::zeros(vec![2, 1, 1])).is_err());
        assert!(m.forward(&RealTensor::zeros(vec![1, 1])).is_err());
    }

    #[test]
    fn fxf_with_one_branch_is_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_module(3, 1, &mut rng);
        let x = RealTensor::from_fn(vec![3, 4, 4], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(fxf_via_shifts(&m, &x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn fxf_rejects_non_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_module(2, 2, &mut rng);
        assert!(fxf_via_shifts(&m, &RealTensor::zeros(vec![2, 3, 3])).is_err());
        let m = random_module(2, 4, &mut rng);
        assert!(fxf_via_shifts(&m, &RealTensor::zeros(vec![2, 3, 3])).is_err());
    }

    #[test]
    fn fxf_constant_input_interior_matches_unshifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut m = random_module(2, 9, &mut rng);
        for br in &mut m.branches {
            br.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let x = RealTensor::filled(vec![2, 5, 5], 1.0);
        let shifted = fxf_via_shifts(&m, &x).unwrap();
        let plain = m.forward(&x).unwrap();
        for ch in 0..2 {
            for i in 1..4 {
                for j in 1..4 {
                    let idx = ch * 25 + i * 5 + j;
                    assert_eq!(shifted.values()[idx], plain.values()[idx]);
                }
            }
        }
    }

    #[test]
    fn fxf_matches_explicit_shifted_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = random_module(3, 9, &mut rng);
        let x = RealTensor::from_fn(vec![3, 4, 5], |_| rng.gen_range(-1.5..1.5));
        let got = fxf_via_shifts(&m, &x).unwrap();
        let expect = oracle(&m, &x, Some(&fxf_shifts(3)));
        for (g, e) in got.values().iter().zip(expect) {
            assert_relative_eq!(*g, e, epsilon = 1e-4);
        }
    }

    #[test]
    fn folded_bn_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bn = BatchNorm {
            gamma: (0..5).map(|_| rng.gen_range(0.1..2.0)).collect(),
            beta: (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mean: (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            var: (0..5).map(|_| rng.gen_range(0.1..3.0)).collect(),
            eps: BN_EPS,
        };
        let (s, t) = bn.folded();
        let refolded = BatchNorm::from_folded(s.clone(), t.clone()).folded();
        assert_eq!(refolded, (s, t));
    }
}
