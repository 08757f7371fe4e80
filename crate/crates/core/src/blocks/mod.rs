//! Convolution modules and the common building block.

mod block;
mod conv;
mod spatial;

pub use block::BuildingBlock;
pub use conv::{
    fxf_shifts, fxf_via_shifts, BatchNorm, BranchParams, ConvModule1x1, WeightMode, BN_EPS,
    PRELU_INIT,
};
pub use spatial::{avgpool, replicate_channels, DwConvModule3x3};


use crate::bitcore::RealTensor;
use crate::error::Result;

/// Free-function form of [`ConvModule1x1::forward`].
pub fn conv_module_1x1_forward(m: &ConvModule1x1, x: &RealTensor) -> Result<RealTensor> {
    m.forward(x)
}

/// Free-function form of [`DwConvModule3x3::forward`].
pub fn dw_conv_module_forward(m: &DwConvModule3x3, x: &RealTensor) -> Result<RealTensor> {
    m.forward(x)
}

/// Free-function form of [`BuildingBlock::forward`].
pub fn building_block_forward(b: &BuildingBlock, x: &RealTensor) -> Result<RealTensor> {
    b.forward(x)
}
