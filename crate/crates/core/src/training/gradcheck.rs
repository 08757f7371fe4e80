//! Finite-difference checks of the backward pass against the surrogate network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::WeightMode;
use crate::error::Result;
use crate::network::{build_model, LevelSpec, NetworkConfig};

use super::engine::{ParamKind, TrainNet};

/// Central difference step.
pub const FD_STEP: f64 = 1e-6;
/// Parameters within this distance of a clip kink are skipped.
pub const KINK_MARGIN: f64 = 1e-3;
/// Gradients below this magnitude on both sides count as agreeing.
const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub excluded: usize,
    pub passed: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Input, targets and batch geometry for one check.
#[derive(Debug, Clone)]
pub struct CheckBatch {
    pub x: Vec<f64>,
    pub targets: Vec<f64>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl CheckBatch {
    pub fn random(cfg: &NetworkConfig, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hw = cfg.input_size * cfg.input_size;
        let x = (0..cfg.input_channels * n * hw).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let k = cfg.classes;
        let targets = (0..n)
            .flat_map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(move |v| v / s)
            })
            .collect();
        Self {
            x,
            targets,
            n,
            h: cfg.input_size,
            w: cfg.input_size,
        }
    }
}

/// Compares backward gradients of the surrogate network with central
/// differences of its loss, parameter by parameter.
pub fn gradient_check(net: &TrainNet<f64>, batch: &CheckBatch, tolerance: f64) -> Result<GradCheckReport> {
    let mut net = net.clone();
    net.surrogate = true;
    let (_, grads, _, _) = net.loss_and_grad(&batch.x, batch.n, batch.h, batch.w, &batch.targets)?;
    let mut report = GradCheckReport {
        checked: 0,
        excluded: 0,
        passed: 0,
        max_rel_error: 0.0,
        tolerance,
    };
    for (i, &analytic) in grads.iter().enumerate() {
        let v = net.params[i];
        let clipped = net.weight_mode == WeightMode::Binary && net.layout().kind_of(i) == ParamKind::ConvWeight;
        if clipped && (v.abs() - 1.0).abs() < KINK_MARGIN {
            report.excluded += 1;
            continue;
        }
        net.params[i] = v + FD_STEP;
        let up = net.loss(&batch.x, batch.n, batch.h, batch.w, &batch.targets)?;
        net.params[i] = v - FD_STEP;
        let down = net.loss(&batch.x, batch.n, batch.h, batch.w, &batch.targets)?;
        net.params[i] = v;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < ABS_FLOOR { 0.0 } else { (analytic - numeric).abs() / scale };
        report.checked += 1;
        if rel <= tolerance {
            report.passed += 1;
        }
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    Ok(report)
}

/// Two-block network with under a thousand parameters: a replicating stem and
/// one strided transition level, two parallel branches per module.
pub fn micro_config() -> NetworkConfig {
    NetworkConfig {
        input_channels: 2,
        input_size: 4,
        stem: LevelSpec::new(1, 1, 2, 4),
        levels: vec![LevelSpec::new(1, 2, 2, 8)],
        classes: 3,
        parallel_p: 2,
    }
}

/// One non-transition block of two channels: the smallest net around a single
/// residual conv module pair.
pub fn single_module_config() -> NetworkConfig {
    NetworkConfig {
        input_channels: 2,
        input_size: 3,
        stem: LevelSpec::new(1, 1, 1, 2),
        levels: Vec::new(),
        classes: 2,
        parallel_p: 1,
    }
}

/// Random non-degenerate parameters for a check: batch norm and bias values
/// are perturbed away from their identity initialization.
pub fn check_net(cfg: &NetworkConfig, mode: WeightMode, seed: u64) -> Result<TrainNet<f64>> {
    let model = build_model(cfg, seed)?;
    let mut net = TrainNet::<f64>::from_model(&model, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let groups = net.layout().groups().to_vec();
    for (range, kind) in groups {
        for p in &mut net.params[range] {
            match kind {
                ParamKind::Bias | ParamKind::BnBeta => *p = rng.gen_range(-0.3..0.3),
                ParamKind::BnGamma => *p = rng.gen_range(0.5..1.5),
                ParamKind::Prelu => *p = rng.gen_range(0.1..0.4),
                _ => {}
            }
        }
    }
    Ok(net)
}

/// The whole-network check on [`micro_config`].
pub fn micro_gradient_check(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let cfg = micro_config();
    let net = check_net(&cfg, WeightMode::Binary, seed)?;
    gradient_check(&net, &CheckBatch::random(&cfg, 4, seed), tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_model_is_small() {
        let net = check_net(&micro_config(), WeightMode::Binary, 0).unwrap();
        assert!(net.n_params() <= 1000, "{}", net.n_params());
    }

    #[test]
    fn whole_network_matches_finite_differences() {
        let r = micro_gradient_check(11, 1e-3).unwrap();
        assert!(r.pass_fraction() >= 0.95, "{r:?}");
    }

    #[test]
    fn single_module_matches_tightly() {
        for mode in [WeightMode::Real, WeightMode::Binary] {
            let cfg = single_module_config();
            let net = check_net(&cfg, mode, 3).unwrap();
            let r = gradient_check(&net, &CheckBatch::random(&cfg, 3, 3), 1e-4).unwrap();
            assert!(r.pass_fraction() >= 0.95, "{mode:?} {r:?}");
        }
    }
}
