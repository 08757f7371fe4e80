use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Upper bounds applied when validating configs, mostly so that a corrupted
/// model header cannot request absurd allocations.
const MAX_CHANNELS: usize = 1 << 16;
const MAX_CLASSES: usize = 1 << 20;
const MAX_BLOCKS: usize = 1 << 10;
const MAX_PARALLEL: usize = 64;
const MAX_INPUT: usize = 1 << 14;

/// One row group of the network table: `blocks` building blocks, the first
/// configured with `stride` / `replication`, the rest with `S = R = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub blocks: usize,
    pub stride: usize,
    pub replication: usize,
    pub channels_out: usize,
}

impl LevelSpec {
    pub const fn new(blocks: usize, stride: usize, replication: usize, channels_out: usize) -> Self {
        Self {
            blocks,
            stride,
            replication,
            channels_out,
        }
    }

    /// `(in_channels, R, S)` for every block of the level.
    pub fn block_shapes(&self, in_channels: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.blocks).map(move |i| {
            if i == 0 {
                (in_channels, self.replication, self.stride)
            } else {
                (self.channels_out, 1, 1)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Channels entering the stem: RGB plus the intensity channel.
    pub input_channels: usize,
    /// Square input resolution the network is laid out for.
    pub input_size: usize,
    pub stem: LevelSpec,
    pub levels: Vec<LevelSpec>,
    pub classes: usize,
    pub parallel_p: usize,
}

impl NetworkConfig {
    /// The ImageNet network: stem 4 -> 32, five levels 64 ... 1024, 1000 classes.
    pub fn imagenet(parallel_p: usize) -> Self {
        Self {
            input_channels: 4,
            input_size: 224,
            stem: LevelSpec::new(1, 1, 8, 32),
            levels: vec![
                LevelSpec::new(1, 2, 2, 64),
                LevelSpec::new(1, 2, 2, 128),
                LevelSpec::new(2, 2, 2, 256),
                LevelSpec::new(6, 2, 2, 512),
                LevelSpec::new(2, 2, 2, 1024),
            ],
            classes: 1000,
            parallel_p,
        }
    }

    /// Desk-scale variant: 32x32 inputs, stem 4 -> 32, levels at 64 and 128
    /// channels, 10 classes.
    pub fn toy() -> Self {
        Self {
            input_channels: 4,
            input_size: 32,
            stem: LevelSpec::new(1, 1, 8, 32),
            levels: vec![LevelSpec::new(1, 2, 2, 64), LevelSpec::new(1, 2, 2, 128)],
            classes: 10,
            parallel_p: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "p1" => Ok(Self::imagenet(1)),
            "p2" => Ok(Self::imagenet(2)),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected p1, p2 or toy)"
            ))),
        }
    }

    /// Stem followed by the levels.
    pub fn all_levels(&self) -> impl Iterator<Item = &LevelSpec> {
        std::iter::once(&self.stem).chain(&self.levels)
    }

    /// `(in_channels, R, S)` for every block in network order.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut c = self.input_channels;
        let mut out = Vec::new();
        for level in self.all_levels() {
            out.extend(level.block_shapes(c));
            c = level.channels_out;
        }
        out
    }

    pub fn feature_channels(&self) -> usize {
        self.levels.last().unwrap_or(&self.stem).channels_out
    }

    pub fn total_stride(&self) -> usize {
        self.all_levels().map(|l| l.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.input_channels > MAX_CHANNELS {
            return bad(format!("input_channels {} out of range", self.input_channels));
        }
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return bad(format!("classes {} out of range", self.classes));
        }
        if self.parallel_p == 0 || self.parallel_p > MAX_PARALLEL {
            return bad(format!("parallel_p {} out of range", self.parallel_p));
        }
        if self.input_size == 0 || self.input_size > MAX_INPUT {
            return bad(format!("input_size {} out of range", self.input_size));
        }
        if self.stem.stride != 1 {
            return bad("the stem replicates channels only (stride 1)".into());
        }
        let mut c = self.input_channels;
        let mut size = self.input_size;
        let mut total_blocks = 0;
        for (i, level) in self.all_levels().enumerate() {
            let name = if i == 0 { "stem".to_string() } else { format!("level{i}") };
            if level.blocks == 0 || level.stride == 0 || level.replication == 0 {
                return bad(format!("{name}: blocks, S and R must be >= 1"));
            }
            total_blocks += level.blocks;
            if total_blocks > MAX_BLOCKS {
                return bad("too many blocks".into());
            }
            if level.channels_out != c.saturating_mul(level.replication) {
                return bad(format!(
                    "{name}: RC = {} but {c} channels x R = {} gives {}",
                    level.channels_out,
                    level.replication,
                    c.saturating_mul(level.replication)
                ));
            }
            if level.channels_out > MAX_CHANNELS {
                return bad(format!("{name}: {} channels out of range", level.channels_out));
            }
            if !size.is_multiple_of(level.stride) {
                return bad(format!("{name}: input size {size} not divisible by S = {}", level.stride));
            }
            size /= level.stride;
            c = level.channels_out;
        }
        Ok(())
    }

    /// Parses the plain-text key/value format (see [`fmt::Display`]).
    pub fn parse(text: &str) -> Result<Self> {
        let mut input_channels = None;
        let mut input_size = None;
        let mut classes = None;
        let mut parallel_p = None;
        let mut stem = None;
        let mut levels: Vec<(usize, LevelSpec)> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Config(format!("line {}: {m}: '{raw}'", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let scalar = || value.parse::<usize>().map_err(|_| err("expected an integer"));
            let row = || -> Result<LevelSpec> {
                let nums: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err("expected integers"))?;
                match nums[..] {
                    [b, s, r, rc] => Ok(LevelSpec::new(b, s, r, rc)),
                    _ => Err(err("expected four columns: blocks S R RC")),
                }
            };
            match key {
                "input_channels" => input_channels = Some(scalar()?),
                "input_size" => input_size = Some(scalar()?),
                "classes" => classes = Some(scalar()?),
                "parallel_p" => parallel_p = Some(scalar()?),
                "stem" => stem = Some(row()?),
                k if k.starts_with("level") => {
                    let idx: usize = k["level".len()..]
                        .parse()
                        .map_err(|_| err("level keys are level1, level2, ..."))?;
                    if levels.iter().any(|(i, _)| *i == idx) {
                        return Err(err("duplicate level"));
                    }
                    levels.push((idx, row()?));
                }
                _ => return Err(err("unknown key")),
            }
        }
        levels.sort_by_key(|(i, _)| *i);
        for (expect, (idx, _)) in levels.iter().enumerate() {
            if *idx != expect + 1 {
                return Err(Error::Config(format!("level{} missing", expect + 1)));
            }
        }
        let missing = |k: &str| Error::Config(format!("missing key '{k}'"));
        let cfg = Self {
            input_channels: input_channels.ok_or_else(|| missing("input_channels"))?,
            input_size: input_size.ok_or_else(|| missing("input_size"))?,
            stem: stem.ok_or_else(|| missing("stem"))?,
            levels: levels.into_iter().map(|(_, l)| l).collect(),
            classes: classes.ok_or_else(|| missing("classes"))?,
            parallel_p: parallel_p.unwrap_or(1),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for NetworkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input_channels = {}", self.input_channels)?;
        writeln!(f, "input_size = {}", self.input_size)?;
        writeln!(f, "classes = {}", self.classes)?;
        writeln!(f, "parallel_p = {}", self.parallel_p)?;
        writeln!(f, "#        blocks S R RC")?;
        let row = |l: &LevelSpec| format!("{} {} {} {}", l.blocks, l.stride, l.replication, l.channels_out);
        writeln!(f, "stem   = {}", row(&self.stem))?;
        for (i, l) in self.levels.iter().enumerate() {
            writeln!(f, "level{} = {}", i + 1, row(l))?;
        }
        Ok(())
    }
}
