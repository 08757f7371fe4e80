//! Straight-through gradient checks: the sign backward functions against
//! their surrogates, then the whole backward pass of a micro network against
//! finite differences of the surrogate forward.

use bcnn::blocks::WeightMode;
use bcnn::training::{
    check_net, gradient_check, micro_gradient_check, single_module_config, surrogate_derivative_gap, CheckBatch, SteKind,
};

fn main() -> bcnn::Result<()> {
    for kind in [SteKind::Activation, SteKind::Weight] {
        println!("{kind:?} sign: max relative gap {:.2e}", surrogate_derivative_gap(kind, 1e-6));
    }
    for seed in 0..3 {
        let r = micro_gradient_check(seed, 1e-3)?;
        println!(
            "micro network seed {seed}: {}/{} within 1e-3 ({:.1}%), {} near a clip kink skipped, worst {:.2e}",
            r.passed,
            r.checked,
            100.0 * r.pass_fraction(),
            r.excluded,
            r.max_rel_error
        );
    }
    let cfg = single_module_config();
    for mode in [WeightMode::Real, WeightMode::Binary] {
        let net = check_net(&cfg, mode, 3)?;
        let r = gradient_check(&net, &CheckBatch::random(&cfg, 3, 3), 1e-4)?;
        println!("single block, {mode:?} weights: {}/{} within 1e-4, worst {:.2e}", r.passed, r.checked, r.max_rel_error);
    }
    Ok(())
}
