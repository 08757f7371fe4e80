//! Two-step training of the desk-scale network on synthetic gratings.
//!
//! Usage: `train_toy [seed] [step1 W+D] [step2 W+D] [train images]`,
//! e.g. `train_toy 0 1+2 1+2 1000` for a quick run.

use std::time::Instant;

use bcnn::network::{build_model, NetworkConfig};
use bcnn::training::{synthetic_gratings, train_two_step, Step, SyntheticSpec, TrainConfig};

fn epochs(arg: Option<String>, default: (usize, usize)) -> (usize, usize) {
    arg.and_then(|s| {
        let (w, d) = s.split_once('+')?;
        Some((w.parse().ok()?, d.parse().ok()?))
    })
    .unwrap_or(default)
}

fn main() -> bcnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let (w1, d1) = epochs(args.next(), (5, 20));
    let (w2, d2) = epochs(args.next(), (5, 40));
    let train: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5000);

    let split = synthetic_gratings(&SyntheticSpec {
        train,
        test: 1000,
        ..SyntheticSpec::default()
    })?;
    let model = build_model(&NetworkConfig::toy(), seed)?;
    let start = Instant::now();
    let result = train_two_step(
        &model,
        &split,
        TrainConfig::step1().with_epochs(w1, d1),
        TrainConfig::step2().with_epochs(w2, d2),
        seed,
        None,
        |step: Step, m| {
            println!(
                "step {} epoch {:>3}  lr {:.2e}  loss {:.4}  train {:.3}  test {:.3}  [{:.0}s]",
                step.number(),
                m.epoch,
                m.lr,
                m.train_loss,
                m.train_acc,
                m.eval_acc,
                start.elapsed().as_secs_f64()
            )
        },
    )?;
    let last = result.step2.last().map(|m| m.eval_acc).unwrap_or(0.0);
    println!("final test accuracy {last:.3}");
    Ok(())
}
