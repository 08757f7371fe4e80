//! Model file format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic            4 bytes  "BCNN"
//! version          u16      1
//! input_channels   u32
//! input_size       u32
//! classes          u32
//! parallel_p       u32
//! levels           u32      number of levels after the stem
//! stem             4 x u32  blocks S R RC
//! level[i]         4 x u32  blocks S R RC
//! -- parameters, blocks in network order --
//! block:   conv_a, depthwise, conv_b, identity-path module (transition blocks only)
//! 1x1 module:  per branch { bias f32[C], weights u64[ceil(C*C/64)], bn_scale f32[C], bn_shift f32[C] }
//!              then prelu f32[C] unless it is the identity-path module
//! depthwise:   weights f32[9C], bn_scale f32[C], bn_shift f32[C], prelu f32[C]
//! decoder:     weights f32[classes * C_last], bias f32[classes]
//! ```
//!
//! Binary weights are the packed sign of the shadow weights, one bit each
//! (element `i` of the `C_out x C_in` matrix in bit `i % 64` of word `i / 64`,
//! set bit = +1). Batch norm is stored folded. Loading yields a model in
//! binary weight mode whose shadow weights are the decoded ±1 values.

use std::io::Write;
use std::path::Path;

use crate::bitcore::{words_for, BitMatrix, BitTensor};
use crate::blocks::{
    BatchNorm, BranchParams, BuildingBlock, ConvModule1x1, DwConvModule3x3, WeightMode,
};
use crate::error::{Error, Result};

use super::config::{LevelSpec, NetworkConfig};
use super::model::{Decoder, Model};

pub const MAGIC: [u8; 4] = *b"BCNN";
pub const VERSION: u16 = 1;

/// Header length in bytes for a config with `levels` levels after the stem.
pub fn header_len(levels: usize) -> usize {
    4 + 2 + 5 * 4 + 16 * (levels + 1)
}

/// Byte length of the parameter payload implied by a config.
pub fn payload_len(cfg: &NetworkConfig) -> usize {
    let p = cfg.parallel_p;
    let mut bytes = 0usize;
    for (c_in, r, s) in cfg.block_shapes() {
        let c = c_in * r;
        let branch = 4 * 3 * c + 8 * words_for(c * c);
        let modules_with_prelu = 2;
        bytes += modules_with_prelu * (p * branch + 4 * c);
        bytes += 4 * 12 * c;
        if BuildingBlock::is_transition(r, s) {
            bytes += p * branch;
        }
    }
    bytes += 4 * cfg.classes * (cfg.feature_channels() + 1);
    bytes
}

pub fn file_len(cfg: &NetworkConfig) -> usize {
    header_len(cfg.levels.len()) + payload_len(cfg)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn words(&mut self, v: &[u64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn level(&mut self, l: &LevelSpec) {
        for v in [l.blocks, l.stride, l.replication, l.channels_out] {
            self.u32(v);
        }
    }
    fn conv(&mut self, m: &ConvModule1x1) {
        for br in &m.branches {
            self.f32s(&br.bias);
            self.words(br.weights_bin.to_tensor().words());
            let (scale, shift) = br.bn.folded();
            self.f32s(&scale);
            self.f32s(&shift);
        }
        if let Some(slope) = &m.prelu_slope {
            self.f32s(slope);
        }
    }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let cfg = &model.config;
    let mut w = Writer {
        buf: Vec::with_capacity(file_len(cfg)),
    };
    w.buf.extend_from_slice(&MAGIC);
    w.u16(VERSION);
    for v in [cfg.input_channels, cfg.input_size, cfg.classes, cfg.parallel_p, cfg.levels.len()] {
        w.u32(v);
    }
    w.level(&cfg.stem);
    cfg.levels.iter().for_each(|l| w.level(l));
    for b in &model.blocks {
        // binary mode is what gets stored; real-mode shadow weights are reduced to their sign
        w.conv(&b.conv_a);
        w.f32s(&b.dw.weights);
        let (scale, shift) = b.dw.bn.folded();
        w.f32s(&scale);
        w.f32s(&shift);
        w.f32s(&b.dw.prelu_slope);
        w.conv(&b.conv_b);
        if let Some(id) = &b.down_identity {
            w.conv(id);
        }
    }
    w.f32s(&model.decoder.weights);
    w.f32s(&model.decoder.bias);
    debug_assert_eq!(w.buf.len(), file_len(cfg));
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let v: Vec<f32> = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(v)
    }
    fn level(&mut self) -> Result<LevelSpec> {
        Ok(LevelSpec::new(self.u32()?, self.u32()?, self.u32()?, self.u32()?))
    }
    fn conv(&mut self, c: usize, p: usize, with_prelu: bool) -> Result<ConvModule1x1> {
        let mut branches = Vec::with_capacity(p);
        for _ in 0..p {
            let bias = self.f32s(c, "pre-sign bias")?;
            let words: Vec<u64> = self
                .take(8 * words_for(c * c))?
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let bits = BitTensor::from_words(vec![c, c], words)
                .map_err(|_| Error::Inconsistent("non-zero padding bits in packed weights".into()))?;
            let weights_bin = BitMatrix::from_tensor(&bits)?;
            let weights_real = (0..c * c).map(|i| bits.value(i)).collect();
            let scale = self.f32s(c, "batch norm scale")?;
            let shift = self.f32s(c, "batch norm shift")?;
            branches.push(BranchParams {
                bias,
                weights_real,
                weights_bin,
                bn: BatchNorm::from_folded(scale, shift),
            });
        }
        let prelu_slope = if with_prelu {
            Some(self.f32s(c, "PReLU slope")?)
        } else {
            None
        };
        Ok(ConvModule1x1 {
            channels: c,
            branches,
            prelu_slope,
            weight_mode: WeightMode::Binary,
        })
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let input_channels = r.u32()?;
    let input_size = r.u32()?;
    let classes = r.u32()?;
    let parallel_p = r.u32()?;
    let n_levels = r.u32()?;
    if n_levels > 64 {
        return Err(Error::Inconsistent(format!("{n_levels} levels")));
    }
    let stem = r.level()?;
    let levels = (0..n_levels).map(|_| r.level()).collect::<Result<Vec<_>>>()?;
    let config = NetworkConfig {
        input_channels,
        input_size,
        stem,
        levels,
        classes,
        parallel_p,
    };
    config
        .validate()
        .map_err(|e| Error::Inconsistent(format!("header config: {e}")))?;
    let expected = file_len(&config);
    if buf.len() < expected {
        return Err(Error::Truncated {
            offset: buf.len(),
            needed: expected - buf.len(),
        });
    }
    if buf.len() > expected {
        return Err(Error::Inconsistent(format!(
            "{} trailing bytes after the parameters",
            buf.len() - expected
        )));
    }

    let p = config.parallel_p;
    let mut blocks = Vec::new();
    for (c_in, rep, s) in config.block_shapes() {
        let c = c_in * rep;
        let conv_a = r.conv(c, p, true)?;
        let weights = r.f32s(9 * c, "depthwise weights")?;
        let scale = r.f32s(c, "depthwise batch norm scale")?;
        let shift = r.f32s(c, "depthwise batch norm shift")?;
        let prelu_slope = r.f32s(c, "depthwise PReLU slope")?;
        let dw = DwConvModule3x3 {
            channels: c,
            weights,
            stride: s,
            bn: BatchNorm::from_folded(scale, shift),
            prelu_slope,
        };
        let conv_b = r.conv(c, p, true)?;
        let down_identity = if BuildingBlock::is_transition(rep, s) {
            Some(r.conv(c, p, false)?)
        } else {
            None
        };
        blocks.push(BuildingBlock {
            in_channels: c_in,
            replication: rep,
            stride: s,
            conv_a,
            dw,
            conv_b,
            down_identity,
        });
    }
    let f = config.feature_channels();
    let weights = r.f32s(classes * f, "decoder weights")?;
    let bias = r.f32s(classes, "decoder bias")?;
    let model = Model {
        config,
        blocks,
        decoder: Decoder { weights, bias },
    };
    model
        .validate()
        .map_err(|e| Error::Inconsistent(e.to_string()))?;
    Ok(model)
}

/// Writes the model atomically (temp file in the target directory, then rename).
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
