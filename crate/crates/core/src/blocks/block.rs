use rand::Rng;

use crate::bitcore::RealTensor;
use crate::error::{Error, Result};

use super::conv::{ConvModule1x1, WeightMode};
use super::spatial::{avgpool, replicate_channels, DwConvModule3x3};

/// The common building block: channel replication by `R`, then a
/// 1x1 / depthwise 3x3 (stride `S`) / 1x1 residual path.
///
/// Transition blocks (`R > 1` or `S > 1`) route their identity through
/// `S x S` average pooling and a PReLU-free 1x1 module (`down_identity`).
/// The final module adds both its own input and the block identity before
/// its PReLU:
///
/// ```text
/// x' = replicate(x, R)
/// d  = dw(conv_a(x'))
/// id = conv_id(avgpool(x', S))   or x' when not a transition
/// y  = PReLU( sum_p BN_p(conv_p(sign(d + b_p))) + d + id )
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingBlock {
    pub in_channels: usize,
    pub replication: usize,
    pub stride: usize,
    pub conv_a: ConvModule1x1,
    pub dw: DwConvModule3x3,
    pub conv_b: ConvModule1x1,
    pub down_identity: Option<ConvModule1x1>,
}

impl BuildingBlock {
    pub fn is_transition(replication: usize, stride: usize) -> bool {
        replication > 1 || stride > 1
    }

    pub fn new(
        in_channels: usize,
        replication: usize,
        stride: usize,
        parallel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c = in_channels * replication;
        let conv_a = ConvModule1x1::new(c, parallel, true, rng);
        let dw = DwConvModule3x3::new(c, stride, rng);
        let conv_b = ConvModule1x1::new(c, parallel, true, rng);
        let down_identity = Self::is_transition(replication, stride)
            .then(|| ConvModule1x1::new(c, parallel, false, rng));
        Self {
            in_channels,
            replication,
            stride,
            conv_a,
            dw,
            conv_b,
            down_identity,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels * self.replication
    }

    pub fn modules_1x1(&self) -> impl Iterator<Item = &ConvModule1x1> {
        [&self.conv_a, &self.conv_b]
            .into_iter()
            .chain(self.down_identity.as_ref())
    }

    pub fn modules_1x1_mut(&mut self) -> impl Iterator<Item = &mut ConvModule1x1> {
        [&mut self.conv_a, &mut self.conv_b]
            .into_iter()
            .chain(self.down_identity.as_mut())
    }

    pub fn set_weight_mode(&mut self, mode: WeightMode) {
        self.modules_1x1_mut().for_each(|m| m.weight_mode = mode);
    }

    pub fn validate(&self) -> Result<()> {
        if self.replication < 1 || self.stride < 1 {
            return Err(Error::Config("R and S must be >= 1".into()));
        }
        let c = self.out_channels();
        for m in self.modules_1x1() {
            m.validate()?;
            if m.channels != c {
                return Err(Error::Config(format!(
                    "1x1 module has {} channels, block carries {c}",
                    m.channels
                )));
            }
        }
        self.dw.validate()?;
        if self.dw.channels != c || self.dw.stride != self.stride {
            return Err(Error::Config("depthwise module disagrees with block".into()));
        }
        if self.down_identity.is_some() != Self::is_transition(self.replication, self.stride) {
            return Err(Error::Config(
                "identity-path module must exist exactly for transition blocks".into(),
            ));
        }
        if let Some(id) = &self.down_identity {
            if id.prelu_slope.is_some() {
                return Err(Error::Config("identity-path module carries no PReLU".into()));
            }
        }
        if self.conv_a.prelu_slope.is_none() || self.conv_b.prelu_slope.is_none() {
            return Err(Error::Config("residual-path modules need a PReLU".into()));
        }
        Ok(())
    }

    /// Maps `C x H x W` to `RC x H/S x W/S`.
    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        let (c, _, _) = x.chw()?;
        if c != self.in_channels {
            return Err(Error::InvalidArgument(format!(
                "block expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let xr = replicate_channels(x, self.replication)?;
        let a = self.conv_a.forward(&xr)?;
        let d = self.dw.forward(&a)?;
        let identity = match &self.down_identity {
            Some(conv_id) => conv_id.forward(&avgpool(&xr, self.stride)?)?,
            None => xr,
        };
        self.conv_b.forward_with_identity(&d, &identity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::conv::{BatchNorm, BranchParams};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_conv(prelu: bool) -> ConvModule1x1 {
        ConvModule1x1 {
            channels: 1,
            branches: vec![BranchParams::from_weights(1, vec![0.0], vec![1.0], BatchNorm::identity(1))],
            prelu_slope: prelu.then(|| vec![1.0]),
            weight_mode: WeightMode::Binary,
        }
    }

    #[test]
    fn unit_block_on_zero_input() {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let block = BuildingBlock {
            in_channels: 1,
            replication: 1,
            stride: 1,
            conv_a: unit_conv(true),
            dw: DwConvModule3x3 {
                channels: 1,
                weights: w,
                stride: 1,
                bn: BatchNorm::identity(1),
                prelu_slope: vec![1.0],
            },
            conv_b: unit_conv(true),
            down_identity: None,
        };
        block.validate().unwrap();
        // conv_a: sign(0) = 1; dw passes 1 through; conv_b: sign(1) + 1 + 0
        let bn = 1.0 / (1.0f32 + 1e-5).sqrt();
        let out = block.forward(&RealTensor::zeros(vec![1, 3, 3])).unwrap();
        for v in out.values() {
            assert_relative_eq!(*v, bn + bn * bn, epsilon = 1e-6);
            assert_relative_eq!(*v, 2.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn shape_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (c, r, s, hw) in [(4, 8, 1, 8), (8, 2, 2, 8), (6, 1, 1, 4), (3, 1, 2, 6)] {
            let b = BuildingBlock::new(c, r, s, 2, &mut rng);
            b.validate().unwrap();
            let x = RealTensor::from_fn(vec![c, hw, hw], |_| rng.gen_range(-1.0..1.0));
            let y = b.forward(&x).unwrap();
            assert_eq!(y.shape(), &[r * c, hw / s, hw / s]);
        }
    }

    #[test]
    fn level_down_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = BuildingBlock::new(64, 2, 2, 1, &mut rng);
        assert_eq!(b.out_channels(), 128);
        let b = BuildingBlock::new(4, 2, 2, 1, &mut rng);
        let y = b.forward(&RealTensor::zeros(vec![4, 56, 56])).unwrap();
        assert_eq!(y.shape(), &[8, 28, 28]);
    }

    #[test]
    fn zero_bn_scale_leaves_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, s) in [(1, 1), (2, 1), (2, 2)] {
            let mut b = BuildingBlock::new(3, r, s, 2, &mut rng);
            for m in b.modules_1x1_mut() {
                for br in &mut m.branches {
                    br.bn.gamma.iter_mut().for_each(|g| *g = 0.0);
                }
                if let Some(sl) = &mut m.prelu_slope {
                    sl.iter_mut().for_each(|a| *a = 1.0);
                }
            }
            b.dw.bn.gamma.iter_mut().for_each(|g| *g = 0.0);
            let x = RealTensor::from_fn(vec![3, 4, 4], |_| rng.gen_range(-1.0..1.0));
            let y = b.forward(&x).unwrap();
            let expect = avgpool(&replicate_channels(&x, r).unwrap(), s).unwrap();
            // d = 0; conv_a and conv_b reduce to their identity sums
            for (g, e) in y.values().iter().zip(expect.values()) {
                assert_relative_eq!(*g, *e, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = BuildingBlock::new(4, 2, 1, 1, &mut rng);
        assert!(b.forward(&RealTensor::zeros(vec![8, 4, 4])).is_err());
    }

    #[test]
    fn validate_catches_missing_identity_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = BuildingBlock::new(4, 2, 2, 1, &mut rng);
        b.down_identity = None;
        assert!(b.validate().is_err());
    }
}
