use std::path::Path;
use std::process::{Command, Output};

fn bcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcnn"))
        .args(args)
        .env_remove("BCNN_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_unknown_subcommand() {
    assert_eq!(code(&bcnn(&["--help"])), 0);
    assert_eq!(code(&bcnn(&["frobnicate"])), 2);
    assert_eq!(code(&bcnn(&[])), 2);
}

#[test]
fn count_default_presets() {
    let o = bcnn(&["count", "--normalized"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("P=1") && s.contains("P=2"), "{s}");
}

#[test]
fn count_missing_config_is_usage_error() {
    assert_eq!(code(&bcnn(&["count", "--config", "/nonexistent/net.cfg"])), 2);
}

#[test]
fn ufa_rejects_non_dividing_cell_width() {
    assert_eq!(code(&bcnn(&["ufa", "--d", "0.3"])), 2);
}

#[test]
fn ufa_ramp_center_error_within_bound() {
    let o = bcnn(&["ufa", "--fn", "ramp", "--d", "0.125", "--Q", "100"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    let line = s.lines().find(|l| l.starts_with("grid-center error")).expect("center line");
    let err: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(err <= 0.005, "{line}");
}

#[test]
fn ufa_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let o = bcnn(&["ufa", "--fn", "sinewave", "--sweep", "4", "--samples", "2000", "--out", path_arg(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5, "{text}");
}

#[test]
fn step_two_without_checkpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcnn(&["train", "--step", "2", "--out", path_arg(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_rejects_zero_sizes() {
    assert_eq!(code(&bcnn(&["bench", "--m", "0"])), 2);
}

#[test]
fn bench_small_gemm() {
    let o = bcnn(&["bench", "--m", "16", "--k", "64", "--n", "16", "--iters", "1"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn infer_on_garbage_model_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.bcnn");
    std::fs::write(&p, b"not a model").unwrap();
    assert_eq!(code(&bcnn(&["infer", "--model", path_arg(&p), "--random"])), 3);
    assert_eq!(code(&bcnn(&["inspect", path_arg(&p)])), 3);
}

fn tiny_train(out: &Path) -> Output {
    bcnn(&[
        "train",
        "--synthetic-train",
        "40",
        "--epochs-override",
        "0+1",
        "--batch-size",
        "8",
        "--seed",
        "5",
        "--out",
        path_arg(out),
    ])
}

#[test]
fn train_infer_inspect_round_trip() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = tiny_train(a.path());
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(code(&tiny_train(b.path())), 0);
    for step in ["step1", "step2"] {
        let ma = std::fs::read(a.path().join(step).join("metrics.csv")).unwrap();
        let mb = std::fs::read(b.path().join(step).join("metrics.csv")).unwrap();
        assert_eq!(ma, mb, "{step} metrics differ between identical runs");
    }
    let model = a.path().join("model.bcnn");
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(b.path().join("model.bcnn")).unwrap());

    let run = || bcnn(&["infer", "--model", path_arg(&model), "--random", "--seed", "3", "--top-k", "3"]);
    let (r1, r2) = (run(), run());
    assert_eq!(code(&r1), 0);
    assert_eq!(stdout(&r1), stdout(&r2));
    let s = stdout(&r1);
    assert!(s.starts_with("rank,class,logit,probability"));
    assert_eq!(s.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 3);

    let img = a.path().join("rgb.png");
    image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([(x * 8) as u8, (y * 8) as u8, 128])).save(&img).unwrap();
    assert_eq!(code(&bcnn(&["infer", "--model", path_arg(&model), "--image", path_arg(&img)])), 0);

    let small = a.path().join("small.png");
    image::RgbImage::new(8, 8).save(&small).unwrap();
    assert_eq!(code(&bcnn(&["infer", "--model", path_arg(&model), "--image", path_arg(&small)])), 3);

    let i = bcnn(&["inspect", path_arg(&model)]);
    assert_eq!(code(&i), 0);
    assert!(stdout(&i).contains("binary parameters"));
    let c = bcnn(&["inspect", path_arg(&a.path().join("step2"))]);
    assert_eq!(code(&c), 0);
    assert!(stdout(&c).contains("checkpoint: step 2"));
}
