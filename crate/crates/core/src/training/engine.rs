//! Batched forward and backward passes over a flat parameter vector.
//!
//! Activations are laid out channel-major over the whole batch: a tensor with
//! `C` channels holds `C` rows of `N * H * W` values (image-major within a
//! row). A 1x1 convolution over the batch is then a single `C x C` by
//! `C x NHW` matrix product.

use std::ops::Range;

use num_traits::Float;

use crate::blocks::{BatchNorm, BranchParams, BuildingBlock, ConvModule1x1, DwConvModule3x3, WeightMode, BN_EPS};
use crate::error::{Error, Result};
use crate::network::{Decoder, Model, NetworkConfig};

use super::loss::batch_loss_grad;

/// Float type the engine runs on: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    /// `c = alpha * a b + beta * c` with explicit row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f32(v: f32) -> Self;

    fn to_single(self) -> f32;
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: every strided access stays inside the spans asserted above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn from_f32(v: f32) -> Self {
                v as $t
            }

            fn to_single(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `c (m x n) = a (m x k) b (k x n)`, all row-major.
fn matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, T::zero(), c, n as isize, 1);
}

/// Parameter groups; only convolution weights take L2 decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    DepthwiseWeight,
    Bias,
    BnGamma,
    BnBeta,
    Prelu,
    DecoderWeight,
    DecoderBias,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, Self::ConvWeight | Self::DepthwiseWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BnLayout {
    gamma: Range<usize>,
    beta: Range<usize>,
    /// Into the running-statistics vector.
    mean: Range<usize>,
    var: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct BranchLayout {
    bias: Range<usize>,
    weight: Range<usize>,
    bn: BnLayout,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayout {
    c: usize,
    branches: Vec<BranchLayout>,
    prelu: Option<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
struct DwLayout {
    c: usize,
    stride: usize,
    weight: Range<usize>,
    bn: BnLayout,
    prelu: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    c_in: usize,
    replication: usize,
    stride: usize,
    conv_a: ConvLayout,
    dw: DwLayout,
    conv_b: ConvLayout,
    conv_id: Option<ConvLayout>,
}

/// Where each parameter tensor lives in the flat vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    blocks: Vec<BlockLayout>,
    dec_w: Range<usize>,
    dec_b: Range<usize>,
    kinds: Vec<(Range<usize>, ParamKind)>,
    n_params: usize,
    n_running: usize,
}

#[derive(Default)]
struct Alloc {
    params: usize,
    running: usize,
    kinds: Vec<(Range<usize>, ParamKind)>,
}

impl Alloc {
    fn param(&mut self, len: usize, kind: ParamKind) -> Range<usize> {
        let r = self.params..self.params + len;
        self.params += len;
        self.kinds.push((r.clone(), kind));
        r
    }

    fn running(&mut self, len: usize) -> Range<usize> {
        let r = self.running..self.running + len;
        self.running += len;
        r
    }

    fn bn(&mut self, c: usize) -> BnLayout {
        BnLayout {
            gamma: self.param(c, ParamKind::BnGamma),
            beta: self.param(c, ParamKind::BnBeta),
            mean: self.running(c),
            var: self.running(c),
        }
    }

    fn conv(&mut self, c: usize, parallel: usize, prelu: bool) -> ConvLayout {
        let branches = (0..parallel)
            .map(|_| BranchLayout {
                bias: self.param(c, ParamKind::Bias),
                weight: self.param(c * c, ParamKind::ConvWeight),
                bn: self.bn(c),
            })
            .collect();
        ConvLayout {
            c,
            branches,
            prelu: prelu.then(|| self.param(c, ParamKind::Prelu)),
        }
    }
}

impl Layout {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let mut a = Alloc::default();
        let blocks = cfg
            .block_shapes()
            .into_iter()
            .map(|(c_in, r, s)| {
                let c = c_in * r;
                let conv_a = a.conv(c, cfg.parallel_p, true);
                let dw = DwLayout {
                    c,
                    stride: s,
                    weight: a.param(9 * c, ParamKind::DepthwiseWeight),
                    bn: a.bn(c),
                    prelu: a.param(c, ParamKind::Prelu),
                };
                let conv_b = a.conv(c, cfg.parallel_p, true);
                let conv_id = BuildingBlock::is_transition(r, s).then(|| a.conv(c, cfg.parallel_p, false));
                BlockLayout {
                    c_in,
                    replication: r,
                    stride: s,
                    conv_a,
                    dw,
                    conv_b,
                    conv_id,
                }
            })
            .collect();
        let f = cfg.feature_channels();
        let dec_w = a.param(cfg.classes * f, ParamKind::DecoderWeight);
        let dec_b = a.param(cfg.classes, ParamKind::DecoderBias);
        Self {
            blocks,
            dec_w,
            dec_b,
            kinds: a.kinds,
            n_params: a.params,
            n_running: a.running,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_running(&self) -> usize {
        self.n_running
    }

    /// Parameter ranges with their group.
    pub fn groups(&self) -> &[(Range<usize>, ParamKind)] {
        &self.kinds
    }

    pub fn kind_of(&self, index: usize) -> ParamKind {
        self.kinds
            .iter()
            .find(|(r, _)| r.contains(&index))
            .map(|(_, k)| *k)
            .expect("index inside the parameter vector")
    }
}

struct BranchCache<T> {
    /// Pre-sign input `x + bias`.
    u: Vec<T>,
    /// Effective weights the forward pass used.
    weff: Vec<T>,
    zhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
}

struct ConvCache<T> {
    m: usize,
    branches: Vec<BranchCache<T>>,
    /// Pre-PReLU sum, kept only when the module has a PReLU.
    pre: Option<Vec<T>>,
}

struct DwCache<T> {
    x: Vec<T>,
    n: usize,
    h: usize,
    w: usize,
    zhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
    pre: Vec<T>,
}

struct BlockCache<T> {
    n: usize,
    h: usize,
    w: usize,
    conv_a: ConvCache<T>,
    dw: DwCache<T>,
    conv_b: ConvCache<T>,
    conv_id: Option<ConvCache<T>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<T> {
    n: usize,
    blocks: Vec<BlockCache<T>>,
    features: Vec<T>,
    final_hw: usize,
}

/// `(loss, gradients, logits, cache)`.
pub type LossAndGrad<T> = (T, Vec<T>, Vec<T>, ForwardCache<T>);

/// Trainable network state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainNet<T> {
    pub config: NetworkConfig,
    layout: Layout,
    pub params: Vec<T>,
    /// Batch norm running means and variances.
    pub running: Vec<T>,
    pub weight_mode: WeightMode,
    /// Evaluate the smooth surrogates in place of `sign` (gradient checks only).
    pub surrogate: bool,
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

#[inline]
fn soft_sign<T: Scalar>(x: T) -> T {
    let one = T::one();
    let two = one + one;
    if x < -one {
        -one
    } else if x < T::zero() {
        x * x + two * x
    } else if x < one {
        -x * x + two * x
    } else {
        one
    }
}

#[inline]
fn soft_sign_grad<T: Scalar>(x: T) -> T {
    let two = T::one() + T::one();
    if x.abs() <= T::one() {
        two - two * x.abs()
    } else {
        T::zero()
    }
}

#[inline]
fn prelu<T: Scalar>(x: T, a: T) -> T {
    if x >= T::zero() {
        x
    } else {
        a * x
    }
}

fn copy_f32<T: Scalar>(dst: &mut [T], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = T::from_f32(s));
}

fn to_f32<T: Scalar>(src: &[T]) -> Vec<f32> {
    src.iter().map(|v| v.to_single()).collect()
}

/// Batch statistics over `m` values per channel, normalized output, and
/// `y = gamma * zhat + beta` written into `out`.
#[allow(clippy::type_complexity)]
fn bn_train<T: Scalar>(
    z: &[T],
    c: usize,
    m: usize,
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
    accumulate: bool,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let mut zhat = vec![T::zero(); c * m];
    let mut inv_std = vec![T::zero(); c];
    let mut means = vec![T::zero(); c];
    let mut vars = vec![T::zero(); c];
    let mf = T::from(m).unwrap();
    let eps = T::from_f32(BN_EPS);
    for ch in 0..c {
        let row = &z[ch * m..(ch + 1) * m];
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) / mf;
        let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / mf;
        let inv = T::one() / (var + eps).sqrt();
        let (g, bt) = (gamma[ch], beta[ch]);
        let zh = &mut zhat[ch * m..(ch + 1) * m];
        let dst = &mut out[ch * m..(ch + 1) * m];
        for ((zh, &v), o) in zh.iter_mut().zip(row).zip(dst.iter_mut()) {
            *zh = (v - mean) * inv;
            let y = g * *zh + bt;
            *o = if accumulate { *o + y } else { y };
        }
        inv_std[ch] = inv;
        means[ch] = mean;
        vars[ch] = var;
    }
    (zhat, inv_std, means, vars)
}

/// Gradient through training-mode batch norm; accumulates `dgamma`, `dbeta`.
fn bn_backward<T: Scalar>(
    dy: &[T],
    zhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    m: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let c = inv_std.len();
    let mut dz = vec![T::zero(); c * m];
    let mf = T::from(m).unwrap();
    for ch in 0..c {
        let dyr = &dy[ch * m..(ch + 1) * m];
        let zr = &zhat[ch * m..(ch + 1) * m];
        let sum_dy = dyr.iter().fold(T::zero(), |a, &b| a + b);
        let sum_dyz = dyr.iter().zip(zr).fold(T::zero(), |a, (&d, &z)| a + d * z);
        dgamma[ch] = dgamma[ch] + sum_dyz;
        dbeta[ch] = dbeta[ch] + sum_dy;
        let k = gamma[ch] * inv_std[ch] / mf;
        for ((o, &d), &z) in dz[ch * m..(ch + 1) * m].iter_mut().zip(dyr).zip(zr) {
            *o = k * (mf * d - sum_dy - z * sum_dyz);
        }
    }
    dz
}

fn prelu_backward<T: Scalar>(dout: &mut [T], pre: &[T], slopes: &[T], m: usize, dslope: &mut [T]) {
    for (ch, &a) in slopes.iter().enumerate() {
        let mut acc = T::zero();
        for (d, &s) in dout[ch * m..(ch + 1) * m].iter_mut().zip(&pre[ch * m..(ch + 1) * m]) {
            if s < T::zero() {
                acc = acc + *d * s;
                *d = *d * a;
            }
        }
        dslope[ch] = dslope[ch] + acc;
    }
}

/// CNHW replication of `c` channels `r` times (channel `j` copies `j mod c`).
fn replicate<T: Scalar>(x: &[T], r: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() * r);
    for _ in 0..r {
        out.extend_from_slice(x);
    }
    out
}

fn unreplicate<T: Scalar>(dx: &[T], c_in: usize, r: usize, m: usize) -> Vec<T> {
    let mut out = dx[..c_in * m].to_vec();
    for copy in 1..r {
        for (o, &d) in out.iter_mut().zip(&dx[copy * c_in * m..(copy + 1) * c_in * m]) {
            *o = *o + d;
        }
    }
    out
}

fn avgpool_fwd<T: Scalar>(x: &[T], c: usize, n: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    if s == 1 {
        return x.to_vec();
    }
    let (oh, ow) = (h / s, w / s);
    let norm = T::from(s * s).unwrap();
    let mut out = Vec::with_capacity(c * n * oh * ow);
    for plane in x.chunks(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = T::zero();
                for di in 0..s {
                    for dj in 0..s {
                        acc = acc + plane[(i * s + di) * w + j * s + dj];
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    debug_assert_eq!(out.len(), c * n * oh * ow);
    out
}

fn avgpool_bwd<T: Scalar>(dy: &[T], c: usize, n: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    if s == 1 {
        return dy.to_vec();
    }
    let (oh, ow) = (h / s, w / s);
    let norm = T::from(s * s).unwrap();
    let mut out = vec![T::zero(); c * n * h * w];
    for (plane, dplane) in out.chunks_mut(h * w).zip(dy.chunks(oh * ow)) {
        for i in 0..h {
            for j in 0..w {
                plane[i * w + j] = dplane[(i / s) * ow + j / s] / norm;
            }
        }
    }
    out
}

impl<T: Scalar> TrainNet<T> {
    /// Copies every parameter of `model`; batch norm statistics become the running statistics.
    pub fn from_model(model: &Model, weight_mode: WeightMode) -> Result<Self> {
        model.validate()?;
        let layout = Layout::new(&model.config);
        let mut params = vec![T::zero(); layout.n_params];
        let mut running = vec![T::zero(); layout.n_running];
        let mut put_bn = |params: &mut [T], l: &BnLayout, bn: &BatchNorm| {
            copy_f32(&mut params[l.gamma.clone()], &bn.gamma);
            copy_f32(&mut params[l.beta.clone()], &bn.beta);
            copy_f32(&mut running[l.mean.clone()], &bn.mean);
            copy_f32(&mut running[l.var.clone()], &bn.var);
        };
        let put_conv = |params: &mut [T], l: &ConvLayout, m: &ConvModule1x1, put_bn: &mut dyn FnMut(&mut [T], &BnLayout, &BatchNorm)| {
            for (bl, br) in l.branches.iter().zip(&m.branches) {
                copy_f32(&mut params[bl.bias.clone()], &br.bias);
                copy_f32(&mut params[bl.weight.clone()], &br.weights_real);
                put_bn(params, &bl.bn, &br.bn);
            }
            if let (Some(r), Some(s)) = (&l.prelu, &m.prelu_slope) {
                copy_f32(&mut params[r.clone()], s);
            }
        };
        for (bl, b) in layout.blocks.iter().zip(&model.blocks) {
            put_conv(&mut params, &bl.conv_a, &b.conv_a, &mut put_bn);
            copy_f32(&mut params[bl.dw.weight.clone()], &b.dw.weights);
            put_bn(&mut params, &bl.dw.bn, &b.dw.bn);
            copy_f32(&mut params[bl.dw.prelu.clone()], &b.dw.prelu_slope);
            put_conv(&mut params, &bl.conv_b, &b.conv_b, &mut put_bn);
            if let (Some(l), Some(m)) = (&bl.conv_id, &b.down_identity) {
                put_conv(&mut params, l, m, &mut put_bn);
            }
        }
        copy_f32(&mut params[layout.dec_w.clone()], &model.decoder.weights);
        copy_f32(&mut params[layout.dec_b.clone()], &model.decoder.bias);
        Ok(Self {
            config: model.config.clone(),
            layout,
            params,
            running,
            weight_mode,
            surrogate: false,
        })
    }

    /// Network from raw flat vectors laid out as [`Layout::new`] describes.
    pub fn from_parts(config: NetworkConfig, params: Vec<T>, running: Vec<T>, weight_mode: WeightMode) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.n_params {
            return Err(Error::LengthMismatch {
                left: layout.n_params,
                right: params.len(),
            });
        }
        if running.len() != layout.n_running {
            return Err(Error::LengthMismatch {
                left: layout.n_running,
                right: running.len(),
            });
        }
        Ok(Self {
            config,
            layout,
            params,
            running,
            weight_mode,
            surrogate: false,
        })
    }

    /// Inference model with the current shadow weights and running statistics.
    pub fn to_model(&self) -> Model {
        let p = &self.params;
        let bn = |l: &BnLayout| BatchNorm {
            gamma: to_f32(&p[l.gamma.clone()]),
            beta: to_f32(&p[l.beta.clone()]),
            mean: to_f32(&self.running[l.mean.clone()]),
            var: to_f32(&self.running[l.var.clone()]),
            eps: BN_EPS,
        };
        let conv = |l: &ConvLayout| ConvModule1x1 {
            channels: l.c,
            branches: l
                .branches
                .iter()
                .map(|b| BranchParams::from_weights(l.c, to_f32(&p[b.bias.clone()]), to_f32(&p[b.weight.clone()]), bn(&b.bn)))
                .collect(),
            prelu_slope: l.prelu.as_ref().map(|r| to_f32(&p[r.clone()])),
            weight_mode: self.weight_mode,
        };
        let blocks = self
            .layout
            .blocks
            .iter()
            .map(|bl| BuildingBlock {
                in_channels: bl.c_in,
                replication: bl.replication,
                stride: bl.stride,
                conv_a: conv(&bl.conv_a),
                dw: DwConvModule3x3 {
                    channels: bl.dw.c,
                    weights: to_f32(&p[bl.dw.weight.clone()]),
                    stride: bl.dw.stride,
                    bn: bn(&bl.dw.bn),
                    prelu_slope: to_f32(&p[bl.dw.prelu.clone()]),
                },
                conv_b: conv(&bl.conv_b),
                down_identity: bl.conv_id.as_ref().map(conv),
            })
            .collect();
        Model {
            config: self.config.clone(),
            blocks,
            decoder: Decoder {
                weights: to_f32(&p[self.layout.dec_w.clone()]),
                bias: to_f32(&p[self.layout.dec_b.clone()]),
            },
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    fn effective_weight(&self, w: T) -> T {
        match (self.weight_mode, self.surrogate) {
            (WeightMode::Real, _) => w,
            (WeightMode::Binary, false) => sign(w),
            (WeightMode::Binary, true) => w.max(-T::one()).min(T::one()),
        }
    }

    fn activation(&self, u: T) -> T {
        if self.surrogate {
            soft_sign(u)
        } else {
            sign(u)
        }
    }

    fn conv_forward(&self, l: &ConvLayout, x: &[T], m: usize, extra: Option<&[T]>) -> (Vec<T>, ConvCache<T>) {
        let c = l.c;
        let p = &self.params;
        let mut sum = x.to_vec();
        if let Some(e) = extra {
            sum.iter_mut().zip(e).for_each(|(s, &v)| *s = *s + v);
        }
        let mut branches = Vec::with_capacity(l.branches.len());
        let mut z = vec![T::zero(); c * m];
        let mut act = vec![T::zero(); c * m];
        for bl in &l.branches {
            let bias = &p[bl.bias.clone()];
            let mut u = vec![T::zero(); c * m];
            for ch in 0..c {
                let b = bias[ch];
                for ((uu, a), &v) in u[ch * m..(ch + 1) * m]
                    .iter_mut()
                    .zip(&mut act[ch * m..(ch + 1) * m])
                    .zip(&x[ch * m..(ch + 1) * m])
                {
                    *uu = v + b;
                    *a = self.activation(*uu);
                }
            }
            let weff: Vec<T> = p[bl.weight.clone()].iter().map(|&w| self.effective_weight(w)).collect();
            matmul(c, c, m, &weff, &act, &mut z);
            let (zhat, inv_std, mean, var) =
                bn_train(&z, c, m, &p[bl.bn.gamma.clone()], &p[bl.bn.beta.clone()], &mut sum, true);
            branches.push(BranchCache {
                u,
                weff,
                zhat,
                inv_std,
                mean,
                var,
            });
        }
        let pre = l.prelu.as_ref().map(|r| {
            let pre = sum.clone();
            for (ch, &a) in p[r.clone()].iter().enumerate() {
                sum[ch * m..(ch + 1) * m].iter_mut().for_each(|v| *v = prelu(*v, a));
            }
            pre
        });
        (sum, ConvCache { m, branches, pre })
    }

    /// Returns the gradient with respect to the module input (which equals the
    /// gradient with respect to the extra identity plus the branch terms).
    /// The gradient for the extra identity alone is the second element.
    fn conv_backward(&self, l: &ConvLayout, cache: &ConvCache<T>, dout: &[T], grads: &mut [T]) -> (Vec<T>, Vec<T>) {
        let c = l.c;
        let m = cache.m;
        let p = &self.params;
        let mut ds = dout.to_vec();
        if let (Some(r), Some(pre)) = (&l.prelu, &cache.pre) {
            let slopes = &p[r.clone()];
            let mut dslope = vec![T::zero(); c];
            prelu_backward(&mut ds, pre, slopes, m, &mut dslope);
            grads[r.clone()].iter_mut().zip(&dslope).for_each(|(g, &d)| *g = *g + d);
        }
        let mut dx = ds.clone();
        let mut act = vec![T::zero(); c * m];
        let mut da = vec![T::zero(); c * m];
        let mut dweff = vec![T::zero(); c * c];
        for (bl, bc) in l.branches.iter().zip(&cache.branches) {
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let dz = bn_backward(&ds, &bc.zhat, &bc.inv_std, &p[bl.bn.gamma.clone()], m, &mut dgamma, &mut dbeta);
            grads[bl.bn.gamma.clone()].iter_mut().zip(&dgamma).for_each(|(g, &d)| *g = *g + d);
            grads[bl.bn.beta.clone()].iter_mut().zip(&dbeta).for_each(|(g, &d)| *g = *g + d);
            act.iter_mut().zip(&bc.u).for_each(|(a, &u)| *a = self.activation(u));
            // dW_eff = dZ act^T
            T::gemm(c, m, c, T::one(), &dz, m as isize, 1, &act, 1, m as isize, T::zero(), &mut dweff, c as isize, 1);
            let w = &p[bl.weight.clone()];
            for ((g, &d), &wv) in grads[bl.weight.clone()].iter_mut().zip(&dweff).zip(w) {
                let pass = match self.weight_mode {
                    WeightMode::Real => true,
                    WeightMode::Binary => wv.abs() <= T::one(),
                };
                if pass {
                    *g = *g + d;
                }
            }
            // dA = W_eff^T dZ
            T::gemm(c, c, m, T::one(), &bc.weff, 1, c as isize, &dz, m as isize, 1, T::zero(), &mut da, m as isize, 1);
            let db = &mut grads[bl.bias.clone()];
            for ch in 0..c {
                let mut acc = T::zero();
                for ((dxv, &dav), &u) in dx[ch * m..(ch + 1) * m]
                    .iter_mut()
                    .zip(&da[ch * m..(ch + 1) * m])
                    .zip(&bc.u[ch * m..(ch + 1) * m])
                {
                    let du = dav * soft_sign_grad(u);
                    acc = acc + du;
                    *dxv = *dxv + du;
                }
                db[ch] = db[ch] + acc;
            }
        }
        (dx, ds)
    }

    fn dw_forward(&self, l: &DwLayout, x: &[T], n: usize, h: usize, w: usize) -> (Vec<T>, DwCache<T>) {
        let (c, s) = (l.c, l.stride);
        let (oh, ow) = (h / s, w / s);
        let mo = n * oh * ow;
        let k = &self.params[l.weight.clone()];
        let mut z = vec![T::zero(); c * mo];
        for ch in 0..c {
            let kern = &k[ch * 9..ch * 9 + 9];
            for img in 0..n {
                let plane = &x[(ch * n + img) * h * w..][..h * w];
                let dst = &mut z[(ch * n + img) * oh * ow..][..oh * ow];
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = T::zero();
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
                                acc = acc + kern[ky * 3 + kx] * plane[y as usize * w + xx as usize];
                            }
                        }
                        dst[i * ow + j] = acc;
                    }
                }
            }
        }
        let mut out = vec![T::zero(); c * mo];
        let p = &self.params;
        let (zhat, inv_std, mean, var) = bn_train(&z, c, mo, &p[l.bn.gamma.clone()], &p[l.bn.beta.clone()], &mut out, false);
        let pre = out.clone();
        for (ch, &a) in p[l.prelu.clone()].iter().enumerate() {
            out[ch * mo..(ch + 1) * mo].iter_mut().for_each(|v| *v = prelu(*v, a));
        }
        (
            out,
            DwCache {
                x: x.to_vec(),
                n,
                h,
                w,
                zhat,
                inv_std,
                mean,
                var,
                pre,
            },
        )
    }

    fn dw_backward(&self, l: &DwLayout, cache: &DwCache<T>, dout: &[T], grads: &mut [T]) -> Vec<T> {
        let (c, s) = (l.c, l.stride);
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let (oh, ow) = (h / s, w / s);
        let mo = n * oh * ow;
        let p = &self.params;
        let mut dy = dout.to_vec();
        let mut dslope = vec![T::zero(); c];
        prelu_backward(&mut dy, &cache.pre, &p[l.prelu.clone()], mo, &mut dslope);
        grads[l.prelu.clone()].iter_mut().zip(&dslope).for_each(|(g, &d)| *g = *g + d);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let dz = bn_backward(&dy, &cache.zhat, &cache.inv_std, &p[l.bn.gamma.clone()], mo, &mut dgamma, &mut dbeta);
        grads[l.bn.gamma.clone()].iter_mut().zip(&dgamma).for_each(|(g, &d)| *g = *g + d);
        grads[l.bn.beta.clone()].iter_mut().zip(&dbeta).for_each(|(g, &d)| *g = *g + d);
        let k = &p[l.weight.clone()];
        let mut dk = vec![T::zero(); 9 * c];
        let mut dx = vec![T::zero(); c * n * h * w];
        for ch in 0..c {
            let kern = &k[ch * 9..ch * 9 + 9];
            let dkern = &mut dk[ch * 9..ch * 9 + 9];
            for img in 0..n {
                let base = (ch * n + img) * h * w;
                let plane = &cache.x[base..base + h * w];
                let dplane = &mut dx[base..base + h * w];
                let g = &dz[(ch * n + img) * oh * ow..][..oh * ow];
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = g[i * ow + j];
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
                                let idx = y as usize * w + xx as usize;
                                dkern[ky * 3 + kx] = dkern[ky * 3 + kx] + gv * plane[idx];
                                dplane[idx] = dplane[idx] + gv * kern[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        grads[l.weight.clone()].iter_mut().zip(&dk).for_each(|(g, &d)| *g = *g + d);
        dx
    }

    /// Training-mode forward over a batch in channel-major layout
    /// (`input_channels x N*H*W`). Returns `N x classes` logits.
    pub fn forward(&self, x: &[T], n: usize, h: usize, w: usize) -> Result<(Vec<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        let stride = cfg.total_stride();
        if x.len() != cfg.input_channels * n * h * w || n == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) || h == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![cfg.input_channels, n, h, w],
                actual: vec![x.len()],
            });
        }
        let mut cur = x.to_vec();
        let (mut ch, mut cw) = (h, w);
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for bl in &self.layout.blocks {
            let m_in = n * ch * cw;
            let xr = replicate(&cur, bl.replication);
            let (a, ca) = self.conv_forward(&bl.conv_a, &xr, m_in, None);
            let (d, cd) = self.dw_forward(&bl.dw, &a, n, ch, cw);
            let (oh, ow) = (ch / bl.stride, cw / bl.stride);
            let m_out = n * oh * ow;
            let (identity, cid) = match &bl.conv_id {
                Some(l) => {
                    let pooled = avgpool_fwd(&xr, bl.conv_a.c, n, ch, cw, bl.stride);
                    let (y, c) = self.conv_forward(l, &pooled, m_out, None);
                    (y, Some(c))
                }
                None => (xr, None),
            };
            let (y, cb) = self.conv_forward(&bl.conv_b, &d, m_out, Some(&identity));
            blocks.push(BlockCache {
                n,
                h: ch,
                w: cw,
                conv_a: ca,
                dw: cd,
                conv_b: cb,
                conv_id: cid,
            });
            cur = y;
            ch = oh;
            cw = ow;
        }
        let f = cfg.feature_channels();
        let hw = ch * cw;
        let hwf = T::from(hw).unwrap();
        let mut features = vec![T::zero(); f * n];
        for (dst, plane) in features.iter_mut().zip(cur.chunks(hw)) {
            *dst = plane.iter().fold(T::zero(), |a, &b| a + b) / hwf;
        }
        let k = cfg.classes;
        let mut logits = vec![T::zero(); n * k];
        for row in logits.chunks_mut(k) {
            row.copy_from_slice(&self.params[self.layout.dec_b.clone()]);
        }
        // logits (N x K) += features^T (N x F) W^T (F x K)
        T::gemm(
            n,
            f,
            k,
            T::one(),
            &features,
            1,
            n as isize,
            &self.params[self.layout.dec_w.clone()],
            1,
            f as isize,
            T::one(),
            &mut logits,
            k as isize,
            1,
        );
        Ok((
            logits,
            ForwardCache {
                n,
                blocks,
                features,
                final_hw: hw,
            },
        ))
    }

    /// Parameter gradients for upstream `N x classes` logit gradients.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Vec<T> {
        let cfg = &self.config;
        let (n, k, f) = (cache.n, cfg.classes, cfg.feature_channels());
        let mut grads = vec![T::zero(); self.layout.n_params];
        for row in dlogits.chunks(k) {
            for (g, &d) in grads[self.layout.dec_b.clone()].iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        // dW (K x F) = dlogits^T (K x N) features^T (N x F)
        T::gemm(
            k,
            n,
            f,
            T::one(),
            dlogits,
            1,
            k as isize,
            &cache.features,
            1,
            n as isize,
            T::zero(),
            &mut grads[self.layout.dec_w.clone()],
            f as isize,
            1,
        );
        let mut dfeat = vec![T::zero(); f * n];
        // dfeat (F x N) = W^T (F x K) dlogits^T (K x N)
        T::gemm(
            f,
            k,
            n,
            T::one(),
            &self.params[self.layout.dec_w.clone()],
            1,
            f as isize,
            dlogits,
            1,
            k as isize,
            T::zero(),
            &mut dfeat,
            n as isize,
            1,
        );
        let hw = cache.final_hw;
        let hwf = T::from(hw).unwrap();
        let mut dcur: Vec<T> = dfeat.iter().flat_map(|&d| std::iter::repeat_n(d / hwf, hw)).collect();
        for (bl, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            let (dd, did) = self.conv_backward(&bl.conv_b, &bc.conv_b, &dcur, &mut grads);
            let da = self.dw_backward(&bl.dw, &bc.dw, &dd, &mut grads);
            let (mut dxr, _) = self.conv_backward(&bl.conv_a, &bc.conv_a, &da, &mut grads);
            let c = bl.conv_a.c;
            let contribution = match (&bl.conv_id, &bc.conv_id) {
                (Some(l), Some(cc)) => {
                    let (dpool, _) = self.conv_backward(l, cc, &did, &mut grads);
                    avgpool_bwd(&dpool, c, bc.n, bc.h, bc.w, bl.stride)
                }
                _ => did,
            };
            dxr.iter_mut().zip(&contribution).for_each(|(a, &b)| *a = *a + b);
            dcur = unreplicate(&dxr, bl.c_in, bl.replication, bc.n * bc.h * bc.w);
        }
        grads
    }

    /// Exponential moving average of the batch statistics seen in `cache`.
    pub fn update_running(&mut self, cache: &ForwardCache<T>, momentum: T) {
        let keep = T::one() - momentum;
        let running = &mut self.running;
        let mut upd = |l: &BnLayout, mean: &[T], var: &[T], m: usize| {
            let unbias = if m > 1 { T::from(m).unwrap() / T::from(m - 1).unwrap() } else { T::one() };
            for (r, &v) in running[l.mean.clone()].iter_mut().zip(mean) {
                *r = keep * *r + momentum * v;
            }
            for (r, &v) in running[l.var.clone()].iter_mut().zip(var) {
                *r = keep * *r + momentum * v * unbias;
            }
        };
        for (bl, bc) in self.layout.blocks.iter().zip(&cache.blocks) {
            let mut conv = |l: &ConvLayout, c: &ConvCache<T>| {
                for (b, bcache) in l.branches.iter().zip(&c.branches) {
                    upd(&b.bn, &bcache.mean, &bcache.var, c.m);
                }
            };
            conv(&bl.conv_a, &bc.conv_a);
            conv(&bl.conv_b, &bc.conv_b);
            if let (Some(l), Some(c)) = (&bl.conv_id, &bc.conv_id) {
                conv(l, c);
            }
            let mo = bc.dw.zhat.len() / bl.dw.c;
            upd(&bl.dw.bn, &bc.dw.mean, &bc.dw.var, mo);
        }
    }

    /// Mean loss against `N x classes` target distributions, with parameter gradients.
    pub fn loss_and_grad(&self, x: &[T], n: usize, h: usize, w: usize, targets: &[T]) -> Result<LossAndGrad<T>> {
        let (logits, cache) = self.forward(x, n, h, w)?;
        if targets.len() != logits.len() {
            return Err(Error::LengthMismatch {
                left: logits.len(),
                right: targets.len(),
            });
        }
        let (loss, dlogits) = batch_loss_grad(&logits, targets, self.config.classes);
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let grads = self.backward(&cache, &dlogits);
        Ok((loss, grads, logits, cache))
    }

    /// Mean loss only.
    pub fn loss(&self, x: &[T], n: usize, h: usize, w: usize, targets: &[T]) -> Result<T> {
        let (logits, _) = self.forward(x, n, h, w)?;
        Ok(batch_loss_grad(&logits, targets, self.config.classes).0)
    }

    /// Adds `weight_decay * w` to the gradients of convolution weights.
    pub fn apply_weight_decay(&self, grads: &mut [T], weight_decay: T) {
        if weight_decay == T::zero() {
            return;
        }
        for (r, kind) in &self.layout.kinds {
            if kind.decays() {
                for (g, &w) in grads[r.clone()].iter_mut().zip(&self.params[r.clone()]) {
                    *g = *g + weight_decay * w;
                }
            }
        }
    }

    /// Same network in another float type.
    pub fn cast<U: Scalar>(&self) -> TrainNet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from(*x).unwrap()).collect();
        TrainNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: conv(&self.params),
            running: conv(&self.running),
            weight_mode: self.weight_mode,
            surrogate: self.surrogate,
        }
    }
}

/// Gathers `C x H x W` images into the channel-major batch layout.
pub fn gather_batch<T: Scalar>(images: &[&[f32]], c: usize, hw: usize) -> Vec<T> {
    let n = images.len();
    let mut out = vec![T::zero(); c * n * hw];
    for (i, img) in images.iter().enumerate() {
        for ch in 0..c {
            copy_f32(&mut out[(ch * n + i) * hw..][..hw], &img[ch * hw..(ch + 1) * hw]);
        }
    }
    out
}
