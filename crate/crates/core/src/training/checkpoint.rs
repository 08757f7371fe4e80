//! Training checkpoints: a directory holding the inference model file and a
//! state blob with everything needed to continue bit-exactly.
//!
//! `state.bin`, little-endian:
//!
//! ```text
//! magic "BCST", version u16
//! step u8, epochs_done u32, seed u64
//! network config text: u32 length + UTF-8
//! train config: batch u32, max_lr f32, warmup u32, decay u32, initial scale f32,
//!               final scale f32, weight decay f32, loss u8, bn momentum f32,
//!               beta1 f32, beta2 f32, eps f32
//! params: u32 count + f32[], running stats: u32 count + f32[]
//! adam: t u64, m f32[params], v f32[params]
//! history: u32 rows of { epoch u32, lr f32, train_loss f32, train_acc f32, eval_acc f32 }
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::{save_model, write_atomic, NetworkConfig};

use super::adam::{AdamParams, AdamState};
use super::engine::{Layout, TrainNet};
use super::run::EpochMetrics;
use super::schedule::{LossKind, Step, TrainConfig};

pub const STATE_MAGIC: [u8; 4] = *b"BCST";
pub const STATE_VERSION: u16 = 1;
pub const MODEL_FILE: &str = "model.bcnn";
pub const STATE_FILE: &str = "state.bin";

/// Everything a run needs to continue after the last completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: TrainNet<f32>,
    pub train: TrainConfig,
    pub epochs_done: usize,
    pub seed: u64,
    pub adam: AdamState,
    pub history: Vec<EpochMetrics>,
}

pub fn model_path(dir: &Path) -> PathBuf {
    dir.join(MODEL_FILE)
}

pub fn state_path(dir: &Path) -> PathBuf {
    dir.join(STATE_FILE)
}

struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        v.iter().for_each(|&x| self.f32(x));
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Inconsistent("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

pub fn state_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut o = Out(Vec::new());
    o.0.extend_from_slice(&STATE_MAGIC);
    o.u16(STATE_VERSION);
    o.u8(ck.train.step.number());
    o.u32(ck.epochs_done);
    o.u64(ck.seed);
    let text = ck.net.config.to_string();
    o.u32(text.len());
    o.0.extend_from_slice(text.as_bytes());
    let t = &ck.train;
    o.u32(t.batch_size);
    o.f32(t.max_lr);
    o.u32(t.warmup_epochs);
    o.u32(t.decay_epochs);
    o.f32(t.initial_lr_scale);
    o.f32(t.final_lr_scale);
    o.f32(t.weight_decay);
    o.u8(match t.loss {
        LossKind::CrossEntropy => 0,
        LossKind::Distributional => 1,
    });
    o.f32(t.bn_momentum);
    o.f32(t.adam.beta1);
    o.f32(t.adam.beta2);
    o.f32(t.adam.eps);
    o.u32(ck.net.params.len());
    o.f32s(&ck.net.params);
    o.u32(ck.net.running.len());
    o.f32s(&ck.net.running);
    o.u64(ck.adam.t);
    o.f32s(&ck.adam.m);
    o.f32s(&ck.adam.v);
    o.u32(ck.history.len());
    for h in &ck.history {
        o.u32(h.epoch);
        o.f32(h.lr);
        o.f32(h.train_loss);
        o.f32(h.train_acc);
        o.f32(h.eval_acc);
    }
    o.0
}

pub fn state_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = In { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != STATE_MAGIC {
        return Err(Error::BadMagic {
            expected: STATE_MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != STATE_VERSION {
        return Err(Error::VersionMismatch {
            expected: STATE_VERSION,
            found: version,
        });
    }
    let step = Step::from_number(r.u8()?).map_err(|e| Error::Inconsistent(e.to_string()))?;
    let epochs_done = r.u32()?;
    let seed = r.u64()?;
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Inconsistent("config text is not UTF-8".into()))?;
    let config = NetworkConfig::parse(text).map_err(|e| Error::Inconsistent(e.to_string()))?;
    let batch_size = r.u32()?;
    let max_lr = r.f32()?;
    let warmup_epochs = r.u32()?;
    let decay_epochs = r.u32()?;
    let initial_lr_scale = r.f32()?;
    let final_lr_scale = r.f32()?;
    let weight_decay = r.f32()?;
    let loss = match r.u8()? {
        0 => LossKind::CrossEntropy,
        1 => LossKind::Distributional,
        other => return Err(Error::Inconsistent(format!("unknown loss kind {other}"))),
    };
    let bn_momentum = r.f32()?;
    let adam_params = AdamParams {
        beta1: r.f32()?,
        beta2: r.f32()?,
        eps: r.f32()?,
    };
    let train = TrainConfig {
        step,
        batch_size,
        max_lr,
        warmup_epochs,
        decay_epochs,
        initial_lr_scale,
        final_lr_scale,
        weight_decay,
        loss,
        bn_momentum,
        adam: adam_params,
    };
    let layout = Layout::new(&config);
    let n = r.u32()?;
    if n != layout.n_params() {
        return Err(Error::Inconsistent(format!(
            "{n} parameters stored, config implies {}",
            layout.n_params()
        )));
    }
    let params = r.f32s(n)?;
    let nr = r.u32()?;
    if nr != layout.n_running() {
        return Err(Error::Inconsistent(format!(
            "{nr} running statistics stored, config implies {}",
            layout.n_running()
        )));
    }
    let running = r.f32s(nr)?;
    let t = r.u64()?;
    let m = r.f32s(n)?;
    let v = r.f32s(n)?;
    let rows = r.u32()?;
    let mut history = Vec::with_capacity(rows.min(1 << 16));
    for _ in 0..rows {
        history.push(EpochMetrics {
            epoch: r.u32()?,
            lr: r.f32()?,
            train_loss: r.f32()?,
            train_acc: r.f32()?,
            eval_acc: r.f32()?,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Inconsistent(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let net = TrainNet::from_parts(config, params, running, step.weight_mode())?;
    Ok(Checkpoint {
        net,
        train,
        epochs_done,
        seed,
        adam: AdamState {
            params: adam_params,
            m,
            v,
            t,
        },
        history,
    })
}

/// Writes `dir/model.bcnn` and `dir/state.bin`, each atomically.
pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_model(&ck.net.to_model(), model_path(dir))?;
    write_atomic(&state_path(dir), &state_to_bytes(ck))
}

/// Reads the state blob of a checkpoint directory (or of a `state.bin` path).
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = if path.is_dir() { state_path(path) } else { path.to_path_buf() };
    let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
    state_from_bytes(&bytes)
}
