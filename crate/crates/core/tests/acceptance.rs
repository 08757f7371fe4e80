//! Acceptance criteria, one pass/fail line each.
//!
//! Criteria 9 and 10 train the toy network on 5,000 synthetic images for
//! 5+20 and 5+40 epochs, which takes about an hour per run on one core. They
//! run in full when `BCNN_FULL_TRAINING=1`; otherwise criterion 9 is reported
//! as not run and criterion 10 is checked on a shortened schedule.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bcnn::bitcore::{bin_dot, bin_gemm, BitMatrix, RealTensor};
use bcnn::blocks::WeightMode;
use bcnn::complexity::{count_ops, decoder_share, normalize};
use bcnn::network::format::{from_bytes, to_bytes};
use bcnn::network::{build_model, save_model, load_model, NetworkConfig};
use bcnn::training::{
    micro_gradient_check, surrogate_derivative_gap, synthetic_gratings, train_two_step, SteKind, SyntheticSpec,
    TrainConfig, metrics_csv, state_to_bytes, Trainer, Step,
};
use bcnn::ufa::{build_for_target, eval_ufa, sweep, Target};

// binary parameter and MAC counts
const P1_BINARY_PARAMS: f64 = 9.04e6;
const P1_BINARY_MACS: f64 = 2.41e9;
const P2_BINARY_PARAMS: f64 = 18.09e6;
const P2_BINARY_MACS: f64 = 4.83e9;
const TABLE2_TOL: f64 = 0.02;
// normalized size and compute
const P1_PARAM_MB: f64 = 2.28;
const P2_PARAM_MB: f64 = 3.45;
const PARAM_MB_TOL: f64 = 0.02;
const P1_NORM_MOPS: f64 = 131.28;
const P2_NORM_MOPS: f64 = 208.15;
const NORM_MOPS_TOL: f64 = 0.05;
// decoder share of real parameters
const DECODER_SHARE: f64 = 0.90;
const DECODER_SHARE_TOL: f64 = 0.03;
// binary GEMM
const GEMM_INSTANCES: usize = 1000;
const GEMM_MAX_DIM: usize = 64;
const EXHAUSTIVE_K: usize = 12;
// straight-through estimators
const STE_POINT_TOL: f64 = 1e-4;
const STE_FD_STEP: f64 = 1e-6;
const NETWORK_GRAD_TOL: f64 = 1e-3;
const NETWORK_GRAD_FRACTION: f64 = 0.95;
// mode equivalence and serialization
const MODE_INPUTS: usize = 100;
const SERIAL_INPUTS: usize = 10;
// UFA
const UFA_SAMPLES: usize = 10_000;
const UFA_FINEST_SUP: f64 = 0.1;
// training
const TRAIN_IMAGES: usize = 5000;
const TEST_IMAGES: usize = 1000;
const STEP1_EPOCHS: (usize, usize) = (5, 20);
const STEP2_EPOCHS: (usize, usize) = (5, 40);
const TARGET_TEST_ACC: f32 = 0.40;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(actual: f64, expected: f64, rel: f64) -> bool {
    ((actual - expected) / expected).abs() <= rel
}

fn criterion_1() -> Outcome {
    let p1 = count_ops(&NetworkConfig::imagenet(1), 224);
    let p2 = count_ops(&NetworkConfig::imagenet(2), 224);
    let rows = [
        ("P=1 binary params", p1.binary_params as f64, P1_BINARY_PARAMS),
        ("P=1 binary MACs", p1.binary_macs as f64, P1_BINARY_MACS),
        ("P=2 binary params", p2.binary_params as f64, P2_BINARY_PARAMS),
        ("P=2 binary MACs", p2.binary_macs as f64, P2_BINARY_MACS),
    ];
    let pass = rows.iter().all(|(_, a, e)| within(*a, *e, TABLE2_TOL));
    let detail = rows
        .iter()
        .map(|(n, a, e)| format!("{n} {a:.4e} vs {e:.2e} ({:+.2}%)", 100.0 * (a - e) / e))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn criterion_2() -> Outcome {
    let n1 = normalize(&count_ops(&NetworkConfig::imagenet(1), 224));
    let n2 = normalize(&count_ops(&NetworkConfig::imagenet(2), 224));
    let pass = within(n1.param_megabytes, P1_PARAM_MB, PARAM_MB_TOL)
        && within(n2.param_megabytes, P2_PARAM_MB, PARAM_MB_TOL)
        && within(n1.normalized_mops, P1_NORM_MOPS, NORM_MOPS_TOL)
        && within(n2.normalized_mops, P2_NORM_MOPS, NORM_MOPS_TOL);
    outcome(
        pass,
        format!(
            "param MB {:.4} / {:.4} (reference {P1_PARAM_MB} / {P2_PARAM_MB}); normalized MOPs {:.2} / {:.2} (reference {P1_NORM_MOPS} / {P2_NORM_MOPS})",
            n1.param_megabytes, n2.param_megabytes, n1.normalized_mops, n2.normalized_mops
        ),
    )
}

fn criterion_3() -> Outcome {
    let share = decoder_share(&NetworkConfig::imagenet(1));
    outcome(
        (share - DECODER_SHARE).abs() <= DECODER_SHARE_TOL,
        format!("decoder share {:.2}% (target 90% +- 3 points)", 100.0 * share),
    )
}

fn random_pm1(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0usize;
    for _ in 0..GEMM_INSTANCES {
        let (m, k, n) = (
            rng.gen_range(1..=GEMM_MAX_DIM),
            rng.gen_range(1..=GEMM_MAX_DIM),
            rng.gen_range(1..=GEMM_MAX_DIM),
        );
        let a = random_pm1(&mut rng, m * k);
        let bt = random_pm1(&mut rng, n * k);
        let got = bin_gemm(&BitMatrix::pack_rows(m, k, &a).unwrap(), &BitMatrix::pack_rows(n, k, &bt).unwrap()).unwrap();
        for i in 0..m {
            for j in 0..n {
                let oracle: f32 = (0..k).map(|t| a[i * k + t] * bt[j * k + t]).sum();
                if got.values()[i * n + j] as f32 != oracle {
                    mismatches += 1;
                }
            }
        }
    }
    let mut dot_mismatches = 0usize;
    let mut dots = 0usize;
    for k in 1..=EXHAUSTIVE_K {
        let decode = |bits: u64| -> Vec<i32> { (0..k).map(|t| if bits >> t & 1 == 1 { 1 } else { -1 }).collect() };
        for x in 0..1u64 << k {
            let dx = decode(x);
            for y in 0..1u64 << k {
                let oracle: i32 = dx.iter().zip(decode(y)).map(|(p, q)| p * q).sum();
                dots += 1;
                if bin_dot(&[x], &[y], k).unwrap() != oracle {
                    dot_mismatches += 1;
                }
            }
        }
    }
    outcome(
        mismatches == 0 && dot_mismatches == 0,
        format!("{GEMM_INSTANCES} random GEMMs: {mismatches} mismatching entries; {dots} exhaustive dots for K <= {EXHAUSTIVE_K}: {dot_mismatches} mismatches"),
    )
}

fn criterion_5() -> Outcome {
    let act = surrogate_derivative_gap(SteKind::Activation, STE_FD_STEP);
    let wgt = surrogate_derivative_gap(SteKind::Weight, STE_FD_STEP);
    let reports: Vec<_> = (0..3).map(|seed| micro_gradient_check(seed, NETWORK_GRAD_TOL).unwrap()).collect();
    let worst = reports.iter().map(|r| r.pass_fraction()).fold(1.0, f64::min);
    outcome(
        act <= STE_POINT_TOL && wgt <= STE_POINT_TOL && worst >= NETWORK_GRAD_FRACTION,
        format!(
            "activation gap {act:.1e}, weight gap {wgt:.1e}; micro network ({} params) worst seed {:.1}% within {NETWORK_GRAD_TOL:e}",
            reports[0].checked + reports[0].excluded,
            100.0 * worst
        ),
    )
}

fn sign_weight_model(seed: u64) -> bcnn::network::Model {
    let mut model = build_model(&NetworkConfig::toy(), seed).unwrap();
    for b in &mut model.blocks {
        for m in b.modules_1x1_mut() {
            for br in &mut m.branches {
                br.weights_real.iter_mut().for_each(|w| *w = if *w >= 0.0 { 1.0 } else { -1.0 });
                br.rebinarize();
            }
        }
    }
    model
}

fn random_input(rng: &mut ChaCha8Rng) -> RealTensor {
    RealTensor::from_fn(vec![4, 32, 32], |_| rng.gen_range(-2.0..2.0))
}

fn criterion_6() -> Outcome {
    let mut binary = sign_weight_model(6);
    binary.set_weight_mode(WeightMode::Binary);
    let mut real = binary.clone();
    real.set_weight_mode(WeightMode::Real);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let differing = (0..MODE_INPUTS)
        .filter(|_| {
            let x = random_input(&mut rng);
            binary.forward(&x).unwrap() != real.forward(&x).unwrap()
        })
        .count();
    outcome(differing == 0, format!("{differing} of {MODE_INPUTS} inputs differ between real-weight and binary forward"))
}

fn criterion_7() -> Outcome {
    let rows = sweep(&Target::Sinewave, 1.0 / 8.0, 8, 4, UFA_SAMPLES).unwrap();
    let monotone = rows.windows(2).all(|w| w[1].sup_error <= w[0].sup_error);
    let finest = rows.last().unwrap().sup_error;
    let mut center_ok = true;
    for r in &rows {
        let net = build_for_target(&Target::Sinewave, r.d, r.q, false).unwrap();
        let cells = (1.0 / r.d).round() as usize;
        for k in 1..cells {
            let x = k as f64 / cells as f64;
            center_ok &= (eval_ufa(&net, x).unwrap() - Target::Sinewave.eval(x)).abs() <= 0.5 / r.q as f64 + 1e-12;
        }
    }
    let errs: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.sup_error)).collect();
    outcome(
        monotone && finest <= UFA_FINEST_SUP && center_ok,
        format!("sup errors {} (non-increasing {monotone}); grid centers within 1/(2Q): {center_ok}", errs.join(", ")),
    )
}

fn criterion_8() -> Outcome {
    let model = build_model(&NetworkConfig::toy(), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bcnn");
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let identical = (0..SERIAL_INPUTS).all(|_| {
        let x = random_input(&mut rng);
        model.forward(&x).unwrap() == loaded.forward(&x).unwrap()
    });
    let bytes = to_bytes(&model).unwrap();
    let mut corrupt_cases = 0usize;
    let mut typed = 0usize;
    let mut panics = 0usize;
    let mut cases: Vec<Vec<u8>> = (0..bytes.len()).step_by(997).map(|cut| bytes[..cut].to_vec()).collect();
    for _ in 0..200 {
        let mut b = bytes.clone();
        let i = rng.gen_range(0..64.min(b.len()));
        b[i] ^= 1 << rng.gen_range(0..8);
        cases.push(b);
    }
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 7]);
    cases.push(long);
    for case in cases {
        corrupt_cases += 1;
        match catch_unwind(AssertUnwindSafe(|| from_bytes(&case))) {
            Ok(Err(_)) => typed += 1,
            Ok(Ok(_)) => {}
            Err(_) => panics += 1,
        }
    }
    // header bit flips can land on fields that still describe a valid model
    outcome(
        identical && panics == 0 && typed * 10 >= corrupt_cases * 9,
        format!("{SERIAL_INPUTS} round trips bit-identical: {identical}; {corrupt_cases} corrupted files: {typed} typed errors, {panics} panics"),
    )
}

fn full_training() -> bool {
    std::env::var("BCNN_FULL_TRAINING").is_ok_and(|v| v == "1")
}

fn toy_split() -> bcnn::training::DataSplit {
    synthetic_gratings(&SyntheticSpec {
        train: TRAIN_IMAGES,
        test: TEST_IMAGES,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn criterion_9() -> Option<Outcome> {
    if !full_training() {
        return None;
    }
    let split = toy_split();
    let mut results = Vec::new();
    for seed in SEEDS {
        let model = build_model(&NetworkConfig::toy(), seed).unwrap();
        let start = Instant::now();
        let r = train_two_step(
            &model,
            &split,
            TrainConfig::step1().with_epochs(STEP1_EPOCHS.0, STEP1_EPOCHS.1),
            TrainConfig::step2().with_epochs(STEP2_EPOCHS.0, STEP2_EPOCHS.1),
            seed,
            None,
            |step: Step, m| {
                eprintln!(
                    "  seed {seed} step {} epoch {:>2}: loss {:.4} train {:.3} test {:.3}",
                    step.number(),
                    m.epoch,
                    m.train_loss,
                    m.train_acc,
                    m.eval_acc
                )
            },
        )
        .unwrap();
        let s1 = r.step1.last().unwrap().eval_acc;
        let s2 = r.step2.last().unwrap().eval_acc;
        results.push((seed, s1, s2, start.elapsed()));
        if s2 >= TARGET_TEST_ACC {
            break;
        }
    }
    let best = results.iter().map(|r| r.2).fold(0.0, f32::max);
    let detail = results
        .iter()
        .map(|(s, a, b, t)| format!("seed {s}: step 1 {a:.3}, step 2 {b:.3} in {:.0} min", t.as_secs_f64() / 60.0))
        .collect::<Vec<_>>()
        .join("; ");
    Some(outcome(best >= TARGET_TEST_ACC, format!("best test accuracy {best:.3} (target {TARGET_TEST_ACC}); {detail}")))
}

fn criterion_10() -> Outcome {
    let (split, e1, e2, label) = if full_training() {
        (toy_split(), STEP1_EPOCHS, STEP2_EPOCHS, "full toy run")
    } else {
        let split = synthetic_gratings(&SyntheticSpec {
            train: 320,
            test: 64,
            ..SyntheticSpec::default()
        })
        .unwrap();
        (split, (1, 1), (1, 1), "shortened toy run (320 images, 1+1 epochs per step)")
    };
    let run = || {
        let model = build_model(&NetworkConfig::toy(), 7).unwrap();
        let r = train_two_step(
            &model,
            &split,
            TrainConfig::step1().with_epochs(e1.0, e1.1),
            TrainConfig::step2().with_epochs(e2.0, e2.1),
            7,
            None,
            |_, _| {},
        )
        .unwrap();
        let csv1 = metrics_csv(&TrainConfig::step1().with_epochs(e1.0, e1.1), &r.step1).unwrap();
        let csv2 = metrics_csv(&TrainConfig::step2().with_epochs(e2.0, e2.1), &r.step2).unwrap();
        let trainer = Trainer::new(&r.model, TrainConfig::step2(), 7).unwrap();
        (csv1, csv2, to_bytes(&r.model).unwrap(), state_to_bytes(&trainer.checkpoint()))
    };
    let a = run();
    let b = run();
    outcome(
        a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3,
        format!(
            "{label}: metrics CSVs identical {}, final model files identical {}",
            a.0 == b.0 && a.1 == b.1,
            a.2 == b.2 && a.3 == b.3
        ),
    )
}

fn report(n: usize, budget: Option<Duration>, f: impl FnOnce() -> Option<Outcome>) -> Option<bool> {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    match result {
        Ok(Some(o)) => {
            let in_time = budget.is_none_or(|b| elapsed <= b);
            let pass = o.pass && in_time;
            let timing = match budget {
                Some(b) => format!(" [{:.2}s, budget {}s]", elapsed.as_secs_f64(), b.as_secs()),
                None => format!(" [{:.0}s]", elapsed.as_secs_f64()),
            };
            println!("criterion {n:>2}: {} - {}{timing}", if pass { "PASS" } else { "FAIL" }, o.detail);
            Some(pass)
        }
        Ok(None) => {
            println!("criterion {n:>2}: NOT RUN - full toy training takes about an hour per seed; set BCNN_FULL_TRAINING=1");
            None
        }
        Err(_) => {
            println!("criterion {n:>2}: FAIL - panicked");
            Some(false)
        }
    }
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        report(1, Some(secs(1)), || Some(criterion_1())),
        report(2, Some(secs(1)), || Some(criterion_2())),
        report(3, Some(secs(1)), || Some(criterion_3())),
        report(4, Some(secs(10)), || Some(criterion_4())),
        report(5, Some(secs(60)), || Some(criterion_5())),
        report(6, None, || Some(criterion_6())),
        report(7, Some(secs(30)), || Some(criterion_7())),
        report(8, None, || Some(criterion_8())),
        report(9, None, criterion_9),
        report(10, None, || Some(criterion_10())),
    ];
    let failed = results.iter().filter(|r| **r == Some(false)).count();
    let skipped = results.iter().filter(|r| r.is_none()).count();
    println!("acceptance: {} passed, {failed} failed, {skipped} not run", results.len() - failed - skipped);
    if failed > 0 {
        std::process::exit(1);
    }
}
