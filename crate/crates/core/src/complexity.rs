//! Parameter and operation accounting.
//!
//! Counts come from a structural walk of a [`NetworkConfig`]; nothing is
//! executed. Conventions per element of the tensor an operation produces:
//!
//! | operation | tally |
//! |---|---|
//! | binary 1x1 conv, per branch | `C_in` binary MACs per output, `C_out * C_in` binary params |
//! | pre-sign bias, per branch | 1 real add, 1 sign; `C` real params |
//! | batch norm (folded) | 1 real mult + 1 real add; 2 real params per channel |
//! | branch sum + module identity | 1 real add per branch (`P - 1` sums and the identity) |
//! | block identity into the final module | 1 real add |
//! | PReLU | 1 PReLU op; 1 real param per channel |
//! | depthwise 3x3 | 9 real MACs; 9 real params per channel |
//! | average pooling `S x S` | `S^2` real adds (the `1/S^2` scale folds into the next batch norm) |
//! | global average pooling | `HW - 1` adds and 1 mult per channel |
//! | classifier | 1 real MAC per weight, 1 add per bias |
//!
//! The identity-path module of a transition block has no PReLU. Pooling is
//! counted in every transition block, including the stem's `S = 1` one.

use std::fmt::Write as _;
use std::ops::AddAssign;

use crate::blocks::{BuildingBlock, ConvModule1x1};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCountReport {
    pub binary_params: u64,
    pub binary_macs: u64,
    pub real_params: u64,
    pub real_macs: u64,
    pub real_adds: u64,
    pub real_mults: u64,
    pub sign_ops: u64,
    pub prelu_ops: u64,
}

impl AddAssign for OpCountReport {
    fn add_assign(&mut self, o: Self) {
        self.binary_params += o.binary_params;
        self.binary_macs += o.binary_macs;
        self.real_params += o.real_params;
        self.real_macs += o.real_macs;
        self.real_adds += o.real_adds;
        self.real_mults += o.real_mults;
        self.sign_ops += o.sign_ops;
        self.prelu_ops += o.prelu_ops;
    }
}

impl OpCountReport {
    /// `(name, value)` rows in table order.
    pub fn rows(&self) -> [(&'static str, u64); 8] {
        [
            ("Binary parameters", self.binary_params),
            ("Binary MACs", self.binary_macs),
            ("Real parameters", self.real_params),
            ("Real MACs", self.real_macs),
            ("Real adds", self.real_adds),
            ("Real mults", self.real_mults),
            ("Sign", self.sign_ops),
            ("PReLU", self.prelu_ops),
        ]
    }

    /// Only the parameter fields.
    pub fn params_only(&self) -> Self {
        Self {
            binary_params: self.binary_params,
            real_params: self.real_params,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedReport {
    /// Binary params at 1 bit plus real params at 1 byte (int8), in MB.
    pub param_megabytes: f64,
    /// `binary MACs / 64 + real ops / 2`, in millions.
    pub normalized_mops: f64,
}

/// One 1x1 conv module with `P` branches applied to `C x HW`.
pub fn count_conv_module(channels: usize, hw: usize, parallel: usize, prelu: bool) -> OpCountReport {
    let (c, hw, p) = (channels as u64, hw as u64, parallel as u64);
    let elems = c * hw;
    OpCountReport {
        binary_params: p * c * c,
        binary_macs: p * c * c * hw,
        real_params: p * 3 * c + if prelu { c } else { 0 },
        real_macs: 0,
        real_adds: 3 * p * elems,
        real_mults: p * elems,
        sign_ops: p * elems,
        prelu_ops: if prelu { elems } else { 0 },
    }
}

/// Depthwise 3x3 module producing `C x out_hw`.
pub fn count_dw_module(channels: usize, out_hw: usize) -> OpCountReport {
    let (c, elems) = (channels as u64, (channels * out_hw) as u64);
    OpCountReport {
        real_params: 12 * c,
        real_macs: 9 * elems,
        real_adds: elems,
        real_mults: elems,
        prelu_ops: elems,
        ..Default::default()
    }
}

/// One building block entered at `in_h x in_w`.
pub fn count_block(
    in_channels: usize,
    replication: usize,
    stride: usize,
    parallel: usize,
    in_h: usize,
    in_w: usize,
) -> OpCountReport {
    let c = in_channels * replication;
    let hw_in = in_h * in_w;
    let hw_out = (in_h / stride) * (in_w / stride);
    let mut r = count_conv_module(c, hw_in, parallel, true);
    r += count_dw_module(c, hw_out);
    r += count_conv_module(c, hw_out, parallel, true);
    r.real_adds += (c * hw_out) as u64;
    if BuildingBlock::is_transition(replication, stride) {
        r.real_adds += (stride * stride * c * hw_out) as u64;
        r += count_conv_module(c, hw_out, parallel, false);
    }
    r
}

/// Global average pooling plus the fully connected classifier.
pub fn count_decoder(features: usize, hw: usize, classes: usize) -> OpCountReport {
    let (f, hw, k) = (features as u64, hw as u64, classes as u64);
    OpCountReport {
        real_params: k * (f + 1),
        real_macs: k * f,
        real_adds: f * hw.saturating_sub(1) + k,
        real_mults: f,
        ..Default::default()
    }
}

/// Per-block reports (stem first) and the decoder report, for a square input.
pub fn count_ops_detailed(cfg: &NetworkConfig, input_hw: usize) -> (Vec<OpCountReport>, OpCountReport) {
    let mut h = input_hw;
    let mut c = cfg.input_channels;
    let mut blocks = Vec::new();
    for (c_in, r, s) in cfg.block_shapes() {
        blocks.push(count_block(c_in, r, s, cfg.parallel_p, h, h));
        h /= s;
        c = c_in * r;
    }
    (blocks, count_decoder(c, h * h, cfg.classes))
}

pub fn count_ops(cfg: &NetworkConfig, input_hw: usize) -> OpCountReport {
    let (blocks, decoder) = count_ops_detailed(cfg, input_hw);
    let mut total = decoder;
    blocks.into_iter().for_each(|b| total += b);
    total
}

/// `real MACs + (adds + mults + sign + PReLU) / 2`.
pub fn aggregate_real_ops(r: &OpCountReport) -> f64 {
    r.real_macs as f64 + (r.real_adds + r.real_mults + r.sign_ops + r.prelu_ops) as f64 / 2.0
}

pub fn normalize(r: &OpCountReport) -> NormalizedReport {
    NormalizedReport {
        param_megabytes: (r.binary_params as f64 / 8.0 + r.real_params as f64) / 1e6,
        normalized_mops: (r.binary_macs as f64 / 64.0 + aggregate_real_ops(r)) / 1e6,
    }
}

/// Fraction of real parameters held by the classifier.
pub fn decoder_share(cfg: &NetworkConfig) -> f64 {
    let total = count_ops(cfg, cfg.input_size).real_params as f64;
    let decoder = (cfg.classes * (cfg.feature_channels() + 1)) as f64;
    decoder / total
}

fn module_params(m: &ConvModule1x1) -> (u64, u64) {
    let mut binary = 0u64;
    let mut real = 0u64;
    for br in &m.branches {
        binary += (br.weights_bin.rows() * br.weights_bin.cols()) as u64;
        // folded batch norm: scale and shift
        real += (br.bias.len() + 2 * br.bn.channels()) as u64;
    }
    real += m.prelu_slope.as_ref().map_or(0, |s| s.len()) as u64;
    (binary, real)
}

fn block_params(b: &BuildingBlock) -> (u64, u64) {
    let (mut binary, mut real) = (0, 0);
    for m in b.modules_1x1() {
        let (bi, re) = module_params(m);
        binary += bi;
        real += re;
    }
    real += (b.dw.weights.len() + 2 * b.dw.bn.channels() + b.dw.prelu_slope.len()) as u64;
    (binary, real)
}

/// Counts parameters by enumerating the tensors of a built model and checks
/// them against the structural formulas of [`count_ops`].
pub fn param_count_audit(model: &Model) -> Result<OpCountReport> {
    let cfg = &model.config;
    let (expected_blocks, expected_decoder) = count_ops_detailed(cfg, cfg.input_size);
    let mut diffs = String::new();
    let mut total = OpCountReport::default();
    if expected_blocks.len() != model.blocks.len() {
        return Err(Error::AuditMismatch(format!(
            "model has {} blocks, config implies {}",
            model.blocks.len(),
            expected_blocks.len()
        )));
    }
    for (i, (b, e)) in model.blocks.iter().zip(&expected_blocks).enumerate() {
        let (binary, real) = block_params(b);
        if (binary, real) != (e.binary_params, e.real_params) {
            let _ = writeln!(
                diffs,
                "block {i}: binary {binary} vs {}, real {real} vs {}",
                e.binary_params, e.real_params
            );
        }
        total.binary_params += binary;
        total.real_params += real;
    }
    let dec = (model.decoder.weights.len() + model.decoder.bias.len()) as u64;
    if dec != expected_decoder.real_params {
        let _ = writeln!(diffs, "decoder: real {dec} vs {}", expected_decoder.real_params);
    }
    total.real_params += dec;
    if !diffs.is_empty() {
        return Err(Error::AuditMismatch(diffs));
    }
    Ok(total)
}

fn scaled(v: f64) -> String {
    if v >= 1e9 {
        format!("{:.2} e9", v / 1e9)
    } else {
        format!("{:.2} e6", v / 1e6)
    }
}

/// Aligned text table, one column per `(label, report)`.
pub fn render_table(columns: &[(String, OpCountReport)], normalized: bool) -> String {
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for (i, (name, _)) in columns[0].1.rows().iter().enumerate() {
        rows.push((
            name.to_string(),
            columns.iter().map(|(_, r)| scaled(r.rows()[i].1 as f64)).collect(),
        ));
    }
    rows.push((
        "Real OPs/2".into(),
        columns.iter().map(|(_, r)| scaled(aggregate_real_ops(r))).collect(),
    ));
    if normalized {
        rows.push((
            "Param MB".into(),
            columns.iter().map(|(_, r)| format!("{:.2}", normalize(r).param_megabytes)).collect(),
        ));
        rows.push((
            "Norm MOPs/2".into(),
            columns.iter().map(|(_, r)| format!("{:.2}", normalize(r).normalized_mops)).collect(),
        ));
    }
    let mut out = String::new();
    let _ = write!(out, "{:<20}", "Item");
    for (label, _) in columns {
        let _ = write!(out, "{label:>12}");
    }
    out.push('\n');
    for (name, vals) in rows {
        let _ = write!(out, "{name:<20}");
        for v in vals {
            let _ = write!(out, "{v:>12}");
        }
        out.push('\n');
    }
    out
}

/// CSV with header `item,<label>...`; counts are exact integers.
pub fn render_csv(columns: &[(String, OpCountReport)], normalized: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["item".to_string()];
    header.extend(columns.iter().map(|(l, _)| l.clone()));
    w.write_record(&header)?;
    let keys = [
        "binary_params",
        "binary_macs",
        "real_params",
        "real_macs",
        "real_adds",
        "real_mults",
        "sign_ops",
        "prelu_ops",
    ];
    for (i, key) in keys.iter().enumerate() {
        let mut rec = vec![key.to_string()];
        rec.extend(columns.iter().map(|(_, r)| r.rows()[i].1.to_string()));
        w.write_record(&rec)?;
    }
    let mut rec = vec!["real_ops_over_2".to_string()];
    rec.extend(columns.iter().map(|(_, r)| aggregate_real_ops(r).to_string()));
    w.write_record(&rec)?;
    if normalized {
        let mut mb = vec!["param_megabytes".to_string()];
        let mut mops = vec!["normalized_mops".to_string()];
        for (_, r) in columns {
            let n = normalize(r);
            mb.push(n.param_megabytes.to_string());
            mops.push(n.normalized_mops.to_string());
        }
        w.write_record(&mb)?;
        w.write_record(&mops)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
