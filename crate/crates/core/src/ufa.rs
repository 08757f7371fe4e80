//! Constructive 3-layer binary universal function approximator.
//!
//! The domain of each input is cut into rectangles of width `d` (relative to
//! the domain length). Layer 1 holds two sign units per rectangle and input
//! dimension, thresholding the input at the rectangle's edges. Layer 2 fires
//! one sign unit per rectangle (or per `K`-dimensional cell) and replicates it
//! into `round(Q * (f(center) - f_min))` sub-branches. Layer 3 sums the ±1
//! sub-branch outputs and rescales:
//!
//! ```text
//! y = (sum_j w_j s_j + sum_j w_j) / (2Q) + f_min
//! ```
//!
//! Layer 1 and 2 weights and layer 3 sub-branch weights are all ±1; only the
//! thresholds, the `1/(2Q)` scale and the `f_min` bias are real.
//!
//! Rectangles are half-open `[left, right)` through the `sign(0) = +1` rule.
//! Without the optional end rectangles the first and last half-width of the
//! domain is uncovered and the network outputs `f_min` there.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Above this many sub-branches layer 2 is kept as counts only.
pub const MATERIALIZE_LIMIT: u64 = 1_000_000;

#[inline]
fn sign(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

fn grid_cells(d: f64) -> Result<usize> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::InvalidArgument(format!("d must lie in (0, 1), got {d}")));
    }
    let n = (1.0 / d).round();
    if (n * d - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("1/d must be an integer, got 1/{d} = {}", 1.0 / d)));
    }
    Ok(n as usize)
}

fn check_q(q: u32) -> Result<()> {
    if q == 0 {
        return Err(Error::InvalidArgument("Q must be at least 1".into()));
    }
    Ok(())
}

fn check_domain(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidArgument(format!("domain [{lo}, {hi}] is empty or non-finite")));
    }
    Ok(())
}

/// Scalar target sampled at the rectangle centers.
#[derive(Debug, Clone, PartialEq)]
pub struct UfaSpec {
    /// Rectangle width as a fraction of the domain; `1/d` must be an integer.
    pub d: f64,
    /// Quantization level.
    pub q: u32,
    pub x_min: f64,
    pub x_max: f64,
    /// Output bias; the network approximates `f - f_min`, which must be nonnegative.
    pub f_min: f64,
    /// `f` at centers `x_min + k * d * (x_max - x_min)`, for `k = 1..1/d`
    /// (or `k = 0..=1/d` with end rectangles).
    pub f_samples: Vec<f64>,
    pub end_rects: bool,
}

impl UfaSpec {
    /// Samples `f` on the grid; `f_min` is `min(0, min f)`.
    pub fn from_fn(
        f: impl Fn(f64) -> f64,
        d: f64,
        q: u32,
        (x_min, x_max): (f64, f64),
        end_rects: bool,
    ) -> Result<Self> {
        let n = grid_cells(d)?;
        check_domain(x_min, x_max)?;
        let w = (x_max - x_min) / n as f64;
        let ks = if end_rects { 0..=n } else { 1..=n - 1 };
        let f_samples: Vec<f64> = ks.map(|k| f(x_min + k as f64 * w)).collect();
        let f_min = f_samples.iter().copied().fold(0.0f64, f64::min);
        let spec = Self {
            d,
            q,
            x_min,
            x_max,
            f_min,
            f_samples,
            end_rects,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Replaces the output bias.
    pub fn with_offset(mut self, f_min: f64) -> Result<Self> {
        self.f_min = f_min;
        self.validate()?;
        Ok(self)
    }

    pub fn cells(&self) -> Result<usize> {
        grid_cells(self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = grid_cells(self.d)?;
        check_q(self.q)?;
        check_domain(self.x_min, self.x_max)?;
        let expected = if self.end_rects { n + 1 } else { n - 1 };
        if self.f_samples.len() != expected {
            return Err(Error::LengthMismatch {
                left: expected,
                right: self.f_samples.len(),
            });
        }
        if !self.f_min.is_finite() || self.f_samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("UFA target samples".into()));
        }
        if let Some(v) = self.f_samples.iter().find(|&&v| v - self.f_min < -1e-12) {
            return Err(Error::InvalidArgument(format!(
                "sample {v} lies below the offset {}",
                self.f_min
            )));
        }
        Ok(())
    }
}

/// Layer 1 unit: `sign(weight * x[input] - threshold)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdUnit {
    pub input: usize,
    pub weight: i8,
    pub threshold: f64,
}

/// Layer 2 unit: `sign(sum_t weight_t * layer1[t] - threshold)`, active on the
/// half-open box `[lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellUnit {
    pub terms: Vec<(usize, i8)>,
    pub threshold: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UfaNetwork {
    q: u32,
    domain: Vec<(f64, f64)>,
    cell_width: Vec<f64>,
    covered: Vec<(f64, f64)>,
    pub layer1: Vec<ThresholdUnit>,
    pub layer2: Vec<CellUnit>,
    /// Signed sub-branch count per output and layer 2 unit.
    pub multiplicity: Vec<Vec<i64>>,
    pub f_min: Vec<f64>,
    discontinuities: Vec<f64>,
    /// Explicit `(layer 2 unit, ±1 weight)` sub-branches per output.
    materialized: Option<Vec<Vec<(u32, i8)>>>,
}

impl UfaNetwork {
    pub fn input_dims(&self) -> usize {
        self.domain.len()
    }

    pub fn outputs(&self) -> usize {
        self.f_min.len()
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }

    /// Per-dimension region where the rectangles tile the domain.
    pub fn covered(&self) -> &[(f64, f64)] {
        &self.covered
    }

    pub fn cell_width(&self) -> &[f64] {
        &self.cell_width
    }

    pub fn discontinuities(&self) -> &[f64] {
        &self.discontinuities
    }

    /// Total layer 2 sub-branches, `sum |N|` over outputs and units.
    pub fn total_sub_branches(&self) -> u64 {
        self.multiplicity
            .iter()
            .flatten()
            .map(|m| m.unsigned_abs())
            .sum()
    }

    pub fn is_materialized(&self) -> bool {
        self.materialized.is_some()
    }

    /// Checks that every matrix weight is ±1 and every count is consistent
    /// with the materialized sub-branches.
    pub fn audit_binary_weights(&self) -> bool {
        let l1 = self.layer1.iter().all(|u| u.weight.abs() == 1);
        let l2 = self
            .layer2
            .iter()
            .all(|c| c.terms.iter().all(|&(t, w)| w.abs() == 1 && t < self.layer1.len()));
        let l3 = match &self.materialized {
            None => true,
            Some(outs) => outs.iter().zip(&self.multiplicity).all(|(subs, mult)| {
                let mut acc = vec![0i64; mult.len()];
                for &(u, w) in subs {
                    if w.abs() != 1 {
                        return false;
                    }
                    acc[u as usize] += w as i64;
                }
                &acc == mult
            }),
        };
        l1 && l2 && l3
    }

    fn rematerialize(&mut self) {
        self.materialized = (self.total_sub_branches() <= MATERIALIZE_LIMIT).then(|| {
            self.multiplicity
                .iter()
                .map(|mult| {
                    mult.iter()
                        .enumerate()
                        .flat_map(|(u, &m)| {
                            std::iter::repeat_n((u as u32, m.signum() as i8), m.unsigned_abs() as usize)
                        })
                        .collect()
                })
                .collect()
        });
    }

    fn layer2_outputs(&self, x: &[f64]) -> Vec<i8> {
        let l1: Vec<i8> = self
            .layer1
            .iter()
            .map(|u| sign(u.weight as f64 * x[u.input] - u.threshold))
            .collect();
        self.layer2
            .iter()
            .map(|c| {
                let s: i32 = c.terms.iter().map(|&(t, w)| (w * l1[t]) as i32).sum();
                sign(s as f64 - c.threshold)
            })
            .collect()
    }

    /// Integer layer 3 sums `sum_j w_j (s_j + 1) / 2` per output.
    fn counts(&self, x: &[f64]) -> Vec<i64> {
        let s = self.layer2_outputs(x);
        match &self.materialized {
            Some(outs) => outs
                .iter()
                .map(|subs| {
                    let twice: i64 = subs
                        .iter()
                        .map(|&(u, w)| w as i64 * s[u as usize] as i64 + w as i64)
                        .sum();
                    twice / 2
                })
                .collect(),
            None => self
                .multiplicity
                .iter()
                .map(|mult| {
                    mult.iter()
                        .zip(&s)
                        .filter(|(_, &si)| si > 0)
                        .map(|(m, _)| m)
                        .sum()
                })
                .collect(),
        }
    }

    /// Forward pass; points outside the domain produce the offsets.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dims() {
            return Err(Error::LengthMismatch {
                left: self.input_dims(),
                right: x.len(),
            });
        }
        if x.iter().zip(&self.domain).any(|(v, (lo, hi))| !(v >= lo && v <= hi)) {
            return Ok(self.f_min.clone());
        }
        Ok(self
            .counts(x)
            .into_iter()
            .zip(&self.f_min)
            .map(|(c, off)| c as f64 / self.q as f64 + off)
            .collect())
    }

    /// Adds a narrow rectangle at `x0` whose count makes the output at `x0`
    /// equal `round(Q * (value - f_min)) / Q + f_min`. A repeated `x0` is a no-op.
    pub fn add_discontinuity_branch(&mut self, x0: f64, value: f64) -> Result<()> {
        if self.input_dims() != 1 || self.outputs() != 1 {
            return Err(Error::InvalidArgument(
                "discontinuity branches need a scalar network".into(),
            ));
        }
        let (lo, hi) = self.domain[0];
        if !(x0 > lo && x0 < hi) {
            return Err(Error::InvalidArgument(format!("x0 = {x0} is not interior to [{lo}, {hi}]")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("discontinuity value".into()));
        }
        if self.discontinuities.contains(&x0) {
            return Ok(());
        }
        let target = (self.q as f64 * (value - self.f_min[0])).round() as i64;
        let base = self.counts(&[x0])[0];
        let quarter = self.cell_width[0] / 4.0;
        let edges = self.layer2.iter().flat_map(|c| [c.lo[0], c.hi[0]]);
        let (mut below, mut above) = (lo, hi);
        for e in edges {
            if e <= x0 {
                below = below.max(e);
            } else {
                above = above.min(e);
            }
        }
        let left = x0 - quarter.min(x0 - below);
        let right = x0 + quarter.min(above - x0);
        let first = self.layer1.len();
        self.layer1.push(ThresholdUnit {
            input: 0,
            weight: 1,
            threshold: left,
        });
        self.layer1.push(ThresholdUnit {
            input: 0,
            weight: 1,
            threshold: right,
        });
        self.layer2.push(CellUnit {
            terms: vec![(first, 1), (first + 1, -1)],
            threshold: 1.5,
            lo: vec![left],
            hi: vec![right],
        });
        self.multiplicity[0].push(target - base);
        self.discontinuities.push(x0);
        self.rematerialize();
        Ok(())
    }
}

/// Assembles layers 1 and 2 for a tensor grid of cells.
fn assemble(
    q: u32,
    domain: Vec<(f64, f64)>,
    n: usize,
    end_rects: bool,
    cell_counts: impl Fn(&[usize]) -> Vec<i64>,
    outputs: usize,
    f_min: Vec<f64>,
) -> UfaNetwork {
    let k_dims = domain.len();
    let ks: Vec<usize> = if end_rects { (0..=n).collect() } else { (1..n).collect() };
    let widths: Vec<f64> = domain.iter().map(|(lo, hi)| (hi - lo) / n as f64).collect();
    let mut layer1 = Vec::new();
    // first layer 1 unit of interval `i` along dimension `dim`
    let mut unit_of = vec![Vec::new(); k_dims];
    for (dim, &(lo, _)) in domain.iter().enumerate() {
        for &k in &ks {
            // both neighbours of an edge must compute it identically
            let edge = |offset: f64| lo + (k as f64 + offset) * widths[dim];
            unit_of[dim].push(layer1.len());
            for edge in [edge(-0.5), edge(0.5)] {
                layer1.push(ThresholdUnit {
                    input: dim,
                    weight: 1,
                    threshold: edge,
                });
            }
        }
    }
    let cells = ks.len().pow(k_dims as u32);
    let mut layer2 = Vec::with_capacity(cells);
    let mut multiplicity = vec![Vec::with_capacity(cells); outputs];
    let mut idx = vec![0usize; k_dims];
    for _ in 0..cells {
        let mut terms = Vec::with_capacity(2 * k_dims);
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for dim in 0..k_dims {
            let u = unit_of[dim][idx[dim]];
            terms.push((u, 1));
            terms.push((u + 1, -1));
            lo.push(layer1[u].threshold);
            hi.push(layer1[u + 1].threshold);
        }
        let grid_index: Vec<usize> = idx.iter().map(|&i| ks[i]).collect();
        for (m, c) in cell_counts(&grid_index).into_iter().enumerate() {
            multiplicity[m].push(c);
        }
        layer2.push(CellUnit {
            terms,
            threshold: 2.0 * k_dims as f64 - 0.5,
            lo,
            hi,
        });
        for dim in (0..k_dims).rev() {
            idx[dim] += 1;
            if idx[dim] < ks.len() {
                break;
            }
            idx[dim] = 0;
        }
    }
    let covered = domain
        .iter()
        .zip(&widths)
        .map(|(&(lo, hi), w)| {
            if end_rects {
                (lo, hi)
            } else {
                (lo + 0.5 * w, lo + (n as f64 - 0.5) * w)
            }
        })
        .collect();
    let mut net = UfaNetwork {
        q,
        domain,
        cell_width: widths,
        covered,
        layer1,
        layer2,
        multiplicity,
        f_min,
        discontinuities: Vec::new(),
        materialized: None,
    };
    net.rematerialize();
    net
}

pub fn build_ufa(spec: &UfaSpec) -> Result<UfaNetwork> {
    spec.validate()?;
    let n = spec.cells()?;
    let q = spec.q as f64;
    let first = if spec.end_rects { 0 } else { 1 };
    let counts: Vec<i64> = spec
        .f_samples
        .iter()
        .map(|v| (q * (v - spec.f_min)).round() as i64)
        .collect();
    Ok(assemble(
        spec.q,
        vec![(spec.x_min, spec.x_max)],
        n,
        spec.end_rects,
        |k| vec![counts[k[0] - first]],
        1,
        vec![spec.f_min],
    ))
}

/// Scalar forward pass.
pub fn eval_ufa(net: &UfaNetwork, x: f64) -> Result<f64> {
    Ok(net.evaluate(&[x])?[0])
}

/// Uniform sample points over the covered interior.
pub fn interior_samples(net: &UfaNetwork, n_samples: usize) -> Vec<f64> {
    let (lo, hi) = net.covered[0];
    (0..n_samples)
        .map(|i| lo + (i as f64 + 0.5) / n_samples as f64 * (hi - lo))
        .collect()
}

/// `max |ufa(x) - f(x)|` over `n_samples` uniform interior points.
pub fn sup_error(net: &UfaNetwork, f: impl Fn(f64) -> f64, n_samples: usize) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if net.input_dims() != 1 || net.outputs() != 1 {
        return Err(Error::InvalidArgument("sup_error needs a scalar network".into()));
    }
    interior_samples(net, n_samples)
        .into_iter()
        .try_fold(0.0f64, |acc, x| Ok(acc.max((eval_ufa(net, x)? - f(x)).abs())))
}

/// Vector target: `K` inputs, `M` outputs, same `d` and `Q` on every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorUfaSpec {
    pub d: f64,
    pub q: u32,
    pub domain: Vec<(f64, f64)>,
    pub outputs: usize,
    pub end_rects: bool,
    /// Upper bound on layer 2 units.
    pub branch_cap: usize,
}

pub const MAX_INPUT_DIMS: usize = 3;

pub fn build_ufa_vector(spec: &VectorUfaSpec, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<UfaNetwork> {
    let n = grid_cells(spec.d)?;
    check_q(spec.q)?;
    let k_dims = spec.domain.len();
    if k_dims == 0 || k_dims > MAX_INPUT_DIMS {
        return Err(Error::InvalidArgument(format!(
            "input dimension must be 1..={MAX_INPUT_DIMS}, got {k_dims}"
        )));
    }
    if spec.outputs == 0 {
        return Err(Error::InvalidArgument("at least one output is required".into()));
    }
    for &(lo, hi) in &spec.domain {
        check_domain(lo, hi)?;
    }
    let per_dim = if spec.end_rects { n + 1 } else { n - 1 };
    let cells = (per_dim as u128).pow(k_dims as u32);
    if cells > spec.branch_cap as u128 {
        return Err(Error::ResourceLimit(format!(
            "{cells} layer 2 units exceed the cap of {}",
            spec.branch_cap
        )));
    }
    // sample once, then derive offsets and counts
    let ks: Vec<usize> = if spec.end_rects { (0..=n).collect() } else { (1..n).collect() };
    let center = |grid: &[usize]| -> Vec<f64> {
        grid.iter()
            .zip(&spec.domain)
            .map(|(&k, &(lo, hi))| lo + k as f64 * (hi - lo) / n as f64)
            .collect()
    };
    let mut samples = Vec::with_capacity(cells as usize);
    let mut idx = vec![0usize; k_dims];
    for _ in 0..cells {
        let grid: Vec<usize> = idx.iter().map(|&i| ks[i]).collect();
        let y = f(&center(&grid));
        if y.len() != spec.outputs {
            return Err(Error::LengthMismatch {
                left: spec.outputs,
                right: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("UFA target samples".into()));
        }
        samples.push(y);
        for dim in (0..k_dims).rev() {
            idx[dim] += 1;
            if idx[dim] < ks.len() {
                break;
            }
            idx[dim] = 0;
        }
    }
    let f_min: Vec<f64> = (0..spec.outputs)
        .map(|m| samples.iter().map(|y| y[m]).fold(0.0f64, f64::min))
        .collect();
    let offsets = f_min.clone();
    let q = spec.q as f64;
    let flat_index = |grid: &[usize]| {
        grid.iter().fold(0usize, |acc, &k| {
            acc * ks.len() + if spec.end_rects { k } else { k - 1 }
        })
    };
    Ok(assemble(
        spec.q,
        spec.domain.clone(),
        n,
        spec.end_rects,
        |grid| {
            samples[flat_index(grid)]
                .iter()
                .zip(&offsets)
                .map(|(v, off)| (q * (v - off)).round() as i64)
                .collect()
        },
        spec.outputs,
        f_min,
    ))
}

/// `max |ufa(x) - f(x)|` over a regular grid of `n_per_dim` points per axis
/// inside the covered region, taken across all outputs.
pub fn sup_error_vector(
    net: &UfaNetwork,
    f: impl Fn(&[f64]) -> Vec<f64>,
    n_per_dim: usize,
) -> Result<f64> {
    if n_per_dim == 0 {
        return Err(Error::InvalidArgument("n_per_dim must be at least 1".into()));
    }
    let k_dims = net.input_dims();
    let total = n_per_dim.pow(k_dims as u32);
    let mut worst = 0.0f64;
    let mut x = vec![0.0; k_dims];
    for flat in 0..total {
        let mut rem = flat;
        for dim in (0..k_dims).rev() {
            let i = rem % n_per_dim;
            rem /= n_per_dim;
            let (lo, hi) = net.covered[dim];
            x[dim] = lo + (i as f64 + 0.5) / n_per_dim as f64 * (hi - lo);
        }
        let got = net.evaluate(&x)?;
        for (g, t) in got.iter().zip(f(&x)) {
            worst = worst.max((g - t).abs());
        }
    }
    Ok(worst)
}

/// Named scalar targets on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `0.5 + 0.4 sin(2 pi x)`
    Sinewave,
    /// `x`
    Ramp,
    /// `0` below `1/2`, `1` from `1/2` on, with a discontinuity branch at `1/2`.
    Step,
    /// Linear interpolation through `(x, y)` points sorted by `x`.
    Table(Vec<(f64, f64)>),
}

impl Target {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Sinewave => 0.5 + 0.4 * (2.0 * std::f64::consts::PI * x).sin(),
            Self::Ramp => x,
            Self::Step => {
                if x < 0.5 {
                    0.0
                } else {
                    1.0
                }
            }
            Self::Table(pts) => {
                let i = pts.partition_point(|p| p.0 <= x);
                match i {
                    0 => pts[0].1,
                    i if i == pts.len() => pts[i - 1].1,
                    i => {
                        let ((x0, y0), (x1, y1)) = (pts[i - 1], pts[i]);
                        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
                    }
                }
            }
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        match self {
            Self::Table(pts) => (pts[0].0, pts[pts.len() - 1].0),
            _ => (0.0, 1.0),
        }
    }

    /// Points where the target jumps, paired with the value taken there.
    pub fn discontinuities(&self) -> Vec<(f64, f64)> {
        match self {
            Self::Step => vec![(0.5, 1.0)],
            _ => Vec::new(),
        }
    }

    /// Reads `x,y` rows (header optional) from a CSV file.
    pub fn from_csv(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut pts = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok());
            match (parse(0), parse(1)) {
                (Some(x), Some(y)) if x.is_finite() && y.is_finite() => pts.push((x, y)),
                _ if line == 0 => continue,
                _ => {
                    return Err(Error::Data(format!(
                        "{}: row {} is not an `x,y` pair of numbers",
                        path.display(),
                        line + 1
                    )))
                }
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.len() < 2 || pts[0].0 == pts[pts.len() - 1].0 {
            return Err(Error::Data(format!("{}: need at least two distinct x values", path.display())));
        }
        Ok(Self::Table(pts))
    }
}

/// Builds the scalar network for a named target, including its discontinuity branches.
pub fn build_for_target(target: &Target, d: f64, q: u32, end_rects: bool) -> Result<UfaNetwork> {
    let spec = UfaSpec::from_fn(|x| target.eval(x), d, q, target.domain(), end_rects)?;
    let mut net = build_ufa(&spec)?;
    for (x0, v) in target.discontinuities() {
        net.add_discontinuity_branch(x0, v)?;
    }
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRow {
    pub x: f64,
    pub target: f64,
    pub ufa: f64,
    pub abs_error: f64,
}

pub fn point_rows(net: &UfaNetwork, f: impl Fn(f64) -> f64, n_samples: usize) -> Result<Vec<PointRow>> {
    interior_samples(net, n_samples)
        .into_iter()
        .map(|x| {
            let ufa = eval_ufa(net, x)?;
            let target = f(x);
            Ok(PointRow {
                x,
                target,
                ufa,
                abs_error: (ufa - target).abs(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub d: f64,
    pub q: u32,
    pub sup_error: f64,
    pub sub_branches: u64,
}

/// Refines `(d, Q) -> (d/2, 2Q)` for `steps` settings, starting at `(d0, q0)`.
pub fn sweep(target: &Target, d0: f64, q0: u32, steps: usize, n_samples: usize) -> Result<Vec<SweepRow>> {
    let (mut d, mut q) = (d0, q0);
    let mut rows = Vec::with_capacity(steps);
    for _ in 0..steps {
        let net = build_for_target(target, d, q, false)?;
        rows.push(SweepRow {
            d,
            q,
            sup_error: sup_error(&net, |x| target.eval(x), n_samples)?,
            sub_branches: net.total_sub_branches(),
        });
        d /= 2.0;
        q = q
            .checked_mul(2)
            .ok_or_else(|| Error::InvalidArgument("Q overflowed during the sweep".into()))?;
    }
    Ok(rows)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Columns `x,f(x),ufa(x),abs_error`.
pub fn points_csv(rows: &[PointRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "f(x)", "ufa(x)", "abs_error"])?;
    for r in rows {
        w.write_record([r.x, r.target, r.ufa, r.abs_error].map(|v| v.to_string()))?;
    }
    finish_csv(w)
}

/// Columns `d,Q,sup_error,sub_branches`.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["d", "Q", "sup_error", "sub_branches"])?;
    for r in rows {
        w.write_record([
            r.d.to_string(),
            r.q.to_string(),
            r.sup_error.to_string(),
            r.sub_branches.to_string(),
        ])?;
    }
    finish_csv(w)
}

/// One-line description of a network's size.
pub fn summary(net: &UfaNetwork) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "inputs {} outputs {} layer1 {} layer2 {} sub-branches {} Q {}",
        net.input_dims(),
        net.outputs(),
        net.layer1.len(),
        net.layer2.len(),
        net.total_sub_branches(),
        net.q
    );
    s
}
