//! Builds binary function approximators for `0.5 + 0.4 sin(2 pi x)` with
//! ever finer cells and quantization, and prints the worst-case error of each.

use bcnn::ufa::{build_for_target, eval_ufa, summary, sweep, Target};

fn main() -> bcnn::Result<()> {
    let target = Target::Sinewave;
    for row in sweep(&target, 1.0 / 8.0, 8, 4, 10_000)? {
        println!(
            "d = 1/{:<3} Q = {:<3} sup error {:.4}  sub-branches {}",
            (1.0 / row.d).round(),
            row.q,
            row.sup_error,
            row.sub_branches
        );
    }
    let net = build_for_target(&target, 1.0 / 16.0, 16, false)?;
    println!("{}", summary(&net));
    for x in [0.1, 0.25, 0.6, 0.9] {
        println!("f({x}) = {:.4}, network {:.4}", target.eval(x), eval_ufa(&net, x)?);
    }
    Ok(())
}
