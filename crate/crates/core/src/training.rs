//! SGD training loop, deterministic batching and checkpoints.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "GMLC" | version u8 = 1 | param count u32
//!   per param: name len u16 | UTF-8 name | ndim u8 | dims u32 x ndim | f32 payload
//! | step u64 | rng state u64
//! | momentum flag u8 (0 or 1) | if 1: one f32 payload per param, same order
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_seed, Dataset};
use crate::error::{Error, Result};
use crate::network::{compute_loss, LossBundle, Model, ModelConfig, REAL};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// A log row is kept for every step divisible by this.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 1e-6,
            momentum: 0.0,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Plain SGD with coupled L2 weight decay and optional momentum:
/// `v = momentum * v + grad + weight_decay * value; value -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    /// One buffer per parameter when momentum is non-zero.
    pub velocity: Option<Vec<Tensor<f32>>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            velocity: None,
        }
    }

    /// Applies one update. Every parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Gradient(format!("parameter {} has no gradient", p.name)));
        }
        if self.momentum != 0.0 && self.velocity.is_none() {
            self.velocity = Some(store.iter().map(|p| Tensor::zeros(p.value.shape())).collect());
        }
        let (lr, wd, mu) = (self.lr, self.weight_decay, self.momentum);
        match &mut self.velocity {
            Some(vel) => {
                if vel.len() != store.len() {
                    return Err(Error::dim("sgd_step", "momentum buffers do not match parameters"));
                }
                for (p, v) in store.iter_mut().zip(vel.iter_mut()) {
                    let g = p.grad.as_ref().expect("checked above");
                    for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = mu * *vi + gi + wd * *w;
                        *w -= lr * *vi;
                    }
                }
            }
            None => {
                for p in store.iter_mut() {
                    let g = p.grad.take().expect("checked above");
                    for (w, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                        let v = gi + wd * *w;
                        *w -= lr * v;
                    }
                    p.grad = Some(g);
                }
            }
        }
        Ok(())
    }
}

/// Epoch-wise shuffling without replacement. The permutation of epoch `e` is a
/// pure function of `(seed, e)`, so batch `s` can be recomputed from the step
/// counter alone.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    seed: u64,
    len: usize,
    batch: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(seed: u64, len: usize, batch: usize) -> Self {
        Self {
            seed,
            len,
            batch,
            epoch: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed, epoch));
            perm.shuffle(&mut rng);
            self.epoch = Some((epoch, perm));
        }
        &self.epoch.as_ref().expect("just set").1
    }

    /// Dataset indices of the zero-based `step`.
    pub fn batch(&mut self, step: u64) -> Vec<usize> {
        let start = step * self.batch as u64;
        (0..self.batch as u64)
            .map(|k| {
                let pos = start + k;
                let (epoch, within) = (pos / self.len as u64, (pos % self.len as u64) as usize);
                self.permutation(epoch)[within]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// One-based index of the step whose losses are recorded.
    pub step: u64,
    pub losses: LossBundle<f32>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,l_cls1,l_l1,l_cls2,total\n");
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(s, "{},{},{},{},{}", r.step, l.l_cls1, l.l_l1, l.l_cls2, l.total);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub momentum: Option<Vec<Tensor<f32>>>,
    /// Number of completed steps.
    pub step: u64,
    /// Seed of the batch sampler.
    pub rng_state: u64,
}

impl Checkpoint {
    pub fn capture(model: &Model<f32>, sgd: &Sgd, step: u64, rng_state: u64) -> Self {
        Self {
            params: model.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            momentum: sgd.velocity.clone(),
            step,
            rng_state,
        }
    }

    /// Model for `cfg` with this checkpoint's parameter values.
    pub fn restore_model(&self, cfg: &ModelConfig) -> Result<Model<f32>> {
        let mut model = Model::build(cfg)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter {name:?} not in model")))?;
            let slot = model.store.value_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::dim(
                    "restore_model",
                    format!("{name}: checkpoint {:?} vs model {:?}", value.shape(), slot.shape()),
                ));
            }
            *slot = value.clone();
        }
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.push(CKPT_VERSION);
        let count = u32::try_from(self.params.len()).map_err(|_| Error::Config("too many parameters".into()))?;
        buf.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.params {
            let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.rank()).map_err(|_| Error::Config("rank exceeds u8".into()))?;
            buf.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Config("dim exceeds u32".into()))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            put_payload(&mut buf, t);
        }
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.rng_state.to_le_bytes());
        match &self.momentum {
            Some(vel) => {
                if vel.len() != self.params.len() {
                    return Err(Error::Config("momentum buffers do not match parameters".into()));
                }
                buf.push(1);
                for v in vel {
                    put_payload(&mut buf, v);
                }
            }
            None => buf.push(0),
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4).ok() != Some(CKPT_MAGIC.as_slice()) {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "GMLC",
            });
        }
        let version = r.u8()?;
        if version != CKPT_VERSION {
            return Err(Error::Unsupported {
                path: path.to_path_buf(),
                what: "version",
                found: version as u64,
            });
        }
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| r.malformed(format!("parameter name: {e}")))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = r.payload(&shape)?;
            params.push((name, t));
        }
        let step = r.u64()?;
        let rng_state = r.u64()?;
        let momentum = match r.u8()? {
            0 => None,
            1 => Some(
                params
                    .iter()
                    .map(|(_, t)| r.payload(t.shape()))
                    .collect::<Result<Vec<_>>>()?,
            ),
            other => return Err(r.malformed(format!("momentum flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            params,
            momentum,
            step,
            rng_state,
        })
    }
}

pub const CKPT_MAGIC: &[u8; 4] = b"GMLC";
pub const CKPT_VERSION: u8 = 1;

fn put_payload(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn malformed(&self, detail: String) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            detail,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
            detail: format!("need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn payload(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let overflow = || Error::DimOverflow {
            path: self.path.to_path_buf(),
            detail: format!("shape {shape:?}"),
        };
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(overflow)?;
        let nbytes = numel.checked_mul(4).ok_or_else(overflow)?;
        let raw = self.take(nbytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}

/// Owns a model and the optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub sgd: Sgd,
    pub cfg: TrainConfig,
    sampler: BatchSampler,
    step: u64,
}

/// Seed of the batch sampler for a training seed.
pub fn sampler_seed(train_seed: u64) -> u64 {
    sample_seed(train_seed, 0x5A4D_504C)
}

impl Trainer {
    pub fn new(model: Model<f32>, data: &Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_data(&model, data)?;
        Ok(Self {
            sgd: Sgd::new(&cfg),
            sampler: BatchSampler::new(sampler_seed(cfg.seed), data.len(), cfg.batch_size),
            model,
            cfg,
            step: 0,
        })
    }

    /// Continues the run stored in `ckpt`.
    pub fn resume(model_cfg: &ModelConfig, ckpt: &Checkpoint, data: &Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ckpt.restore_model(model_cfg)?;
        check_data(&model, data)?;
        let mut sgd = Sgd::new(&cfg);
        sgd.velocity = ckpt.momentum.clone();
        Ok(Self {
            sgd,
            sampler: BatchSampler::new(ckpt.rng_state, data.len(), cfg.batch_size),
            model,
            cfg,
            step: ckpt.step,
        })
    }

    /// Completed steps so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.sgd, self.step, self.sampler.seed())
    }

    /// One forward/backward/update on the next batch; returns its losses.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LossBundle<f32>> {
        let step = self.step;
        let at = |e: Error| Error::AtStep {
            step: step + 1,
            source: Box::new(e),
        };
        let idx = self.sampler.batch(step);
        let (x, y) = data.batch(&idx).map_err(at)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let out = self.model.forward(&mut tape, xv).map_err(at)?;
        let loss = compute_loss(&mut tape, out.logits_main, out.logits_ad, out.f_star, &y, self.model.config.l1_reduction)
            .map_err(at)?;
        let bundle = loss.bundle(&tape);
        if !bundle.total.is_finite() {
            return Err(at(Error::Gradient(format!("non-finite loss {}", bundle.total))));
        }
        self.model.store.zero_grad();
        tape.backward_into(loss.total, &mut self.model.store).map_err(at)?;
        drop(tape);
        self.sgd.step(&mut self.model.store).map_err(at)?;
        self.step += 1;
        Ok(bundle)
    }

    /// Runs until `target` steps have completed in total.
    pub fn run_until(&mut self, data: &Dataset, target: u64, mut on_row: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.step < target {
            let losses = self.train_step(data)?;
            if self.step % self.cfg.log_every == 0 {
                let row = LogRow {
                    step: self.step,
                    losses,
                };
                on_row(&row);
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

fn check_data(model: &Model<f32>, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    if model.config.ad_enabled {
        let reals = data.labels.iter().filter(|&&l| l == REAL).count();
        if reals == 0 || reals == data.len() {
            return Err(Error::Config("training with the AD branch needs both real and fake samples".into()));
        }
    }
    Ok(())
}

/// Trains `model` for `cfg.steps` steps from scratch.
pub fn train(model: Model<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<LogRow>, Model<f32>)> {
    let mut trainer = Trainer::new(model, data, cfg.clone())?;
    let rows = trainer.run_until(data, cfg.steps, |_| {})?;
    Ok((trainer.checkpoint(), rows, trainer.model))
}
