//! Epoch loop, metrics log and the two-step procedure.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{save_model, write_atomic, Model};

use super::adam::{adam_step, AdamState};
use super::checkpoint::{save_checkpoint, Checkpoint};
use super::data::{one_hot, DataSplit, Dataset};
use super::engine::{gather_batch, TrainNet};
use super::schedule::{lr_schedule, LossKind, Step, TrainConfig};

pub const METRICS_FILE: &str = "metrics.csv";

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate at the start of the epoch.
    pub lr: f32,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f32,
    /// Training-mode accuracy over the epoch's batches.
    pub train_acc: f32,
    /// Inference-mode accuracy on the evaluation split.
    pub eval_acc: f32,
}

/// Fraction of samples whose top logit is the label.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let xs = (start..end).map(|i| data.image(i)).collect::<Result<Vec<_>>>()?;
        for (logits, &label) in model.forward_batch(&xs)?.iter().zip(&data.labels[start..end]) {
            correct += usize::from(argmax(logits.values()) == label);
        }
    }
    Ok(correct as f32 / data.len() as f32)
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Shuffle order of one epoch, fixed by the seed, step and epoch.
fn epoch_order(len: usize, seed: u64, step: Step, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let stream = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((step.number() as u64) << 32)
        .wrapping_add(epoch as u64);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
    order
}

/// A single training step (one weight mode, one schedule).
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: TrainNet<f32>,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub seed: u64,
    pub epochs_done: usize,
    pub history: Vec<EpochMetrics>,
    /// Teacher pmf rows indexed by training sample, for the distributional loss.
    pub teacher: Option<Vec<f32>>,
}

impl Trainer {
    /// Fresh optimizer state on the parameters of `model`.
    pub fn new(model: &Model, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = TrainNet::from_model(model, cfg.step.weight_mode())?;
        Ok(Self::with_net(net, cfg, seed))
    }

    fn with_net(mut net: TrainNet<f32>, cfg: TrainConfig, seed: u64) -> Self {
        net.weight_mode = cfg.step.weight_mode();
        net.surrogate = false;
        let adam = AdamState::new(net.n_params(), cfg.adam);
        Self {
            net,
            cfg,
            adam,
            seed,
            epochs_done: 0,
            history: Vec::new(),
            teacher: None,
        }
    }

    /// Continues an interrupted run exactly where it stopped.
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        ck.train.validate()?;
        if ck.adam.m.len() != ck.net.n_params() {
            return Err(Error::CheckpointIncompatible("optimizer state does not match the parameters".into()));
        }
        Ok(Self {
            net: ck.net,
            cfg: ck.train,
            adam: ck.adam,
            seed: ck.seed,
            epochs_done: ck.epochs_done,
            history: ck.history,
            teacher: None,
        })
    }

    /// Starts a new step or cycle from a checkpoint's weights. The optimizer
    /// state and epoch counter start fresh.
    pub fn continue_from(ck: Checkpoint, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::with_net(ck.net, cfg, seed))
    }

    pub fn with_teacher(mut self, pmf: Vec<f32>) -> Self {
        self.teacher = Some(pmf);
        self
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.cfg.total_epochs()
    }

    pub fn model(&self) -> Model {
        self.net.to_model()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            train: self.cfg.clone(),
            epochs_done: self.epochs_done,
            seed: self.seed,
            adam: self.adam.clone(),
            history: self.history.clone(),
        }
    }

    fn targets(&self, data: &Dataset, idx: &[usize]) -> Result<Vec<f32>> {
        let k = self.net.config.classes;
        match (self.cfg.loss, &self.teacher) {
            (LossKind::CrossEntropy, _) => Ok(one_hot(&idx.iter().map(|&i| data.labels[i]).collect::<Vec<_>>(), k)),
            (LossKind::Distributional, Some(pmf)) => {
                Ok(idx.iter().flat_map(|&i| pmf[i * k..(i + 1) * k].iter().copied()).collect())
            }
            (LossKind::Distributional, None) => Err(Error::Config("distributional loss needs teacher pmfs".into())),
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let cfg = &self.net.config;
        if data.channels != cfg.input_channels || data.size != cfg.input_size {
            return Err(Error::Data(format!(
                "dataset images are {}x{}x{}, the network expects {}x{}x{}",
                data.channels, data.size, data.size, cfg.input_channels, cfg.input_size, cfg.input_size
            )));
        }
        if data.classes() > cfg.classes || data.labels.iter().any(|&l| l >= cfg.classes) {
            return Err(Error::Data(format!(
                "dataset has {} classes, the network {}",
                data.classes(),
                cfg.classes
            )));
        }
        if let Some(pmf) = &self.teacher {
            if pmf.len() != data.len() * cfg.classes {
                return Err(Error::Data("teacher pmf rows do not match the training set".into()));
            }
        }
        Ok(())
    }

    /// Runs the next epoch and appends its metrics.
    pub fn train_epoch(&mut self, train: &Dataset, eval: &Dataset) -> Result<EpochMetrics> {
        self.check_data(train)?;
        let epoch = self.epochs_done;
        let order = epoch_order(train.len(), self.seed, self.cfg.step, epoch);
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        let (c, size) = (train.channels, train.size);
        let k = self.net.config.classes;
        let momentum = self.cfg.bn_momentum;
        let lr_start = lr_schedule(epoch as f64, &self.cfg);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let lr = lr_schedule(epoch as f64 + b as f64 / batches.len() as f64, &self.cfg);
            let images: Vec<&[f32]> = idx.iter().map(|&i| train.images[i].as_slice()).collect();
            let x = gather_batch::<f32>(&images, c, size * size);
            let targets = self.targets(train, idx)?;
            let (loss, mut grads, logits, cache) = self.net.loss_and_grad(&x, idx.len(), size, size, &targets)?;
            self.net.apply_weight_decay(&mut grads, self.cfg.weight_decay);
            adam_step(&mut self.net.params, &grads, &mut self.adam, lr)?;
            self.net.update_running(&cache, momentum);
            loss_sum += loss as f64 * idx.len() as f64;
            correct += logits
                .chunks(k)
                .zip(idx.iter())
                .filter(|(z, &i)| argmax(z) == train.labels[i])
                .count();
        }
        let metrics = EpochMetrics {
            epoch,
            lr: lr_start,
            train_loss: (loss_sum / train.len() as f64) as f32,
            train_acc: correct as f32 / train.len() as f32,
            eval_acc: evaluate(&self.model(), eval)?,
        };
        self.epochs_done += 1;
        self.history.push(metrics);
        Ok(metrics)
    }

    /// Trains to the end of the schedule. With `out`, the checkpoint and
    /// metrics log in that directory are rewritten after every epoch.
    pub fn run(&mut self, split: &DataSplit, out: Option<&Path>, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<()> {
        while !self.is_finished() {
            let m = self.train_epoch(&split.train, &split.test)?;
            if let Some(dir) = out {
                save_checkpoint(&self.checkpoint(), dir)?;
                write_metrics_csv(&dir.join(METRICS_FILE), &self.cfg, &self.history)?;
            }
            on_epoch(&m);
        }
        Ok(())
    }
}

/// Metrics CSV bytes: one `#` line with the optimizer settings, then a header row.
pub fn metrics_csv(cfg: &TrainConfig, history: &[EpochMetrics]) -> Result<Vec<u8>> {
    let a = cfg.adam;
    let mut buf = format!(
        "# step={} optimizer=adam beta1={} beta2={} eps={:e} max_lr={:e} warmup={} decay={} weight_decay={:e} batch={}\n",
        cfg.step.number(),
        a.beta1,
        a.beta2,
        a.eps,
        cfg.max_lr,
        cfg.warmup_epochs,
        cfg.decay_epochs,
        cfg.weight_decay,
        cfg.batch_size
    )
    .into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "lr", "train_loss", "train_acc", "eval_acc"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format!("{:e}", h.lr),
            format!("{:.6}", h.train_loss),
            format!("{:.4}", h.train_acc),
            format!("{:.4}", h.eval_acc),
        ])?;
    }
    buf.extend(w.into_inner().map_err(|e| Error::Data(e.to_string()))?);
    Ok(buf)
}

pub fn write_metrics_csv(path: &Path, cfg: &TrainConfig, history: &[EpochMetrics]) -> Result<()> {
    write_atomic(path, &metrics_csv(cfg, history)?)
}

#[derive(Debug, Clone)]
pub struct TwoStepResult {
    pub model: Model,
    pub step1: Vec<EpochMetrics>,
    pub step2: Vec<EpochMetrics>,
}

/// Step 1 with real weights, then step 2 with binary weights starting from
/// the step-1 weights. With `out`, checkpoints go to `out/step1` and
/// `out/step2` and the final model to `out/model.bcnn`.
pub fn train_two_step(
    model: &Model,
    split: &DataSplit,
    cfg1: TrainConfig,
    cfg2: TrainConfig,
    seed: u64,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(Step, &EpochMetrics),
) -> Result<TwoStepResult> {
    if cfg1.step != Step::One || cfg2.step != Step::Two {
        return Err(Error::Config("two-step training needs a step-1 and a step-2 config".into()));
    }
    let mut s1 = Trainer::new(model, cfg1, seed)?;
    s1.run(split, out.map(|d| d.join("step1")).as_deref(), |m| on_epoch(Step::One, m))?;
    let mut s2 = Trainer::continue_from(s1.checkpoint(), cfg2, seed)?;
    s2.run(split, out.map(|d| d.join("step2")).as_deref(), |m| on_epoch(Step::Two, m))?;
    let model = s2.model();
    if let Some(dir) = out {
        save_model(&model, dir.join("model.bcnn"))?;
    }
    Ok(TwoStepResult {
        model,
        step1: s1.history,
        step2: s2.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::WeightMode;
    use crate::network::{build_model, LevelSpec, NetworkConfig};
    use crate::training::data::{separable_two_class, synthetic_gratings, SyntheticSpec};

    fn small_config(classes: usize, size: usize) -> NetworkConfig {
        NetworkConfig {
            input_channels: 4,
            input_size: size,
            stem: LevelSpec::new(1, 1, 2, 8),
            levels: vec![LevelSpec::new(1, 2, 2, 16)],
            classes,
            parallel_p: 1,
        }
    }

    #[test]
    fn separable_set_is_learned_in_step_one() {
        let train = separable_two_class(256, 8, 1).unwrap();
        let split = DataSplit {
            test: separable_two_class(64, 8, 2).unwrap(),
            train,
        };
        let model = build_model(&small_config(2, 8), 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            max_lr: 1e-2,
            ..TrainConfig::step1().with_epochs(2, 18)
        };
        let mut t = Trainer::new(&model, cfg, 1).unwrap();
        t.run(&split, None, |_| {}).unwrap();
        let best = t.history.iter().map(|h| h.train_acc).fold(0.0, f32::max);
        assert!(best > 0.9, "{:?}", t.history);
    }

    #[test]
    fn shadow_weights_are_not_clamped() {
        let split = synthetic_gratings(&SyntheticSpec {
            train: 64,
            test: 16,
            size: 8,
            ..Default::default()
        })
        .unwrap();
        let mut model = build_model(&small_config(10, 8), 3).unwrap();
        // push one shadow weight close to the edge so that updates cross it
        model.blocks[0].conv_a.branches[0].weights_real[0] = 0.9999;
        model.blocks[0].conv_a.branches[0].rebinarize();
        let cfg = TrainConfig {
            batch_size: 16,
            max_lr: 0.05,
            ..TrainConfig::step1().with_epochs(0, 3)
        };
        let mut t = Trainer::new(&model, cfg, 0).unwrap();
        t.run(&split, None, |_| {}).unwrap();
        let beyond = t.net.params.iter().enumerate().any(|(i, w)| {
            t.net.layout().kind_of(i) == crate::training::ParamKind::ConvWeight && w.abs() > 1.0
        });
        assert!(beyond, "no shadow weight left [-1, 1]");
    }

    #[test]
    fn runs_repeat_exactly_and_resume_matches() {
        let split = synthetic_gratings(&SyntheticSpec {
            train: 48,
            test: 16,
            size: 8,
            ..Default::default()
        })
        .unwrap();
        let model = build_model(&small_config(10, 8), 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            ..TrainConfig::step2().with_epochs(1, 2)
        };
        let full = |_: ()| {
            let mut t = Trainer::new(&model, cfg.clone(), 5).unwrap();
            t.run(&split, None, |_| {}).unwrap();
            t
        };
        let a = full(());
        let b = full(());
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(a.history, b.history);
        let mut c = Trainer::new(&model, cfg.clone(), 5).unwrap();
        c.train_epoch(&split.train, &split.test).unwrap();
        let bytes = super::super::checkpoint::state_to_bytes(&c.checkpoint());
        let mut d = Trainer::resume(super::super::checkpoint::state_from_bytes(&bytes).unwrap()).unwrap();
        d.run(&split, None, |_| {}).unwrap();
        assert_eq!(d.net.params, a.net.params);
        assert_eq!(d.history, a.history);
    }

    #[test]
    fn step_two_starts_in_binary_mode_with_equal_outputs_on_sign_weights() {
        let cfg = small_config(10, 8);
        let mut model = build_model(&cfg, 6).unwrap();
        for b in &mut model.blocks {
            for m in b.modules_1x1_mut() {
                for br in &mut m.branches {
                    br.weights_real.iter_mut().for_each(|w| *w = if *w >= 0.0 { 1.0 } else { -1.0 });
                    br.rebinarize();
                }
            }
        }
        let t = Trainer::new(&model, TrainConfig::step1(), 0).unwrap();
        let s2 = Trainer::continue_from(t.checkpoint(), TrainConfig::step2(), 0).unwrap();
        assert_eq!(s2.net.weight_mode, WeightMode::Binary);
        let split = synthetic_gratings(&SyntheticSpec {
            train: 8,
            test: 8,
            size: 8,
            ..Default::default()
        })
        .unwrap();
        let images: Vec<&[f32]> = split.train.images.iter().map(Vec::as_slice).collect();
        let x = gather_batch::<f32>(&images, 4, 64);
        let (binary, _) = s2.net.forward(&x, 8, 8, 8).unwrap();
        let (real, _) = t.net.forward(&x, 8, 8, 8).unwrap();
        assert_eq!(binary, real);
    }

    #[test]
    fn metrics_header() {
        let text = String::from_utf8(metrics_csv(&TrainConfig::step1(), &[]).unwrap()).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# step=1 optimizer=adam beta1=0.9 beta2=0.999"));
        assert_eq!(lines.next().unwrap(), "epoch,lr,train_loss,train_acc,eval_acc");
    }
}
