//! One optimizer iteration builds a full lattice per pair (one forward pass per
//! input position), takes the transducer loss and its gradient, and backpropagates
//! through every pass; gradients are summed over the batch before a single Adam step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::SequencePair;
use crate::exec::Exec;
use crate::fpu::FlushGuard;
use crate::lattice::{self, LatticeError};
use crate::model::{self, Checkpoint, Float, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint is missing optimizer state {0}")]
    MissingState(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Global-norm clip applied to the summed batch gradient.
    pub clip_norm: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 100,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate for 1-based step `step`: linear warmup, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    fn update(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, cfg: &TrainConfig) {
        self.step += 1;
        let lr = cfg.lr_at(self.step);
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = cfg.eps as f32;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            let p = p.as_slice_mut().expect("standard layout");
            let g = g.as_slice().expect("standard layout");
            let m = m.as_slice_mut().expect("standard layout");
            let v = v.as_slice_mut().expect("standard layout");
            for i in 0..p.len() {
                m[i] = (b1 * m[i] + (1.0 - b1) * g[i]).flush();
                v[i] = (b2 * v[i] + (1.0 - b2) * g[i] * g[i]).flush();
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Loss and parameter gradient of one pair.
pub fn pair_loss_and_grad(
    params: &ModelParams<f32>,
    pair: &SequencePair,
) -> Result<(f64, ModelParams<f32>), TrainError> {
    let _flush = FlushGuard::new();
    let (lat, tape) = model::build_lattice_with_tape(params, &pair.x, &pair.y)?;
    let (loss, grad_lattice) = lattice::loss_and_grad(&lat, &pair.y)?;
    let mut grads = params.zeros_like();
    tape.backward(params, &grad_lattice, &mut grads)?;
    Ok((loss, grads))
}

/// Summed gradient and per-pair losses over a batch.
pub fn batch_gradient(
    params: &ModelParams<f32>,
    batch: &[SequencePair],
    exec: Exec,
) -> Result<(Vec<f64>, ModelParams<f32>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let results = exec.map(batch, |_, pair| pair_loss_and_grad(params, pair));
    let mut total = params.zeros_like();
    let mut losses = Vec::with_capacity(batch.len());
    for result in results {
        let (loss, grads) = result?;
        losses.push(loss);
        total.add_assign(&grads);
    }
    Ok((losses, total))
}

/// One Adam update on the summed batch gradient; returns the mean loss before the update.
pub fn train_step(
    params: &mut ModelParams<f32>,
    batch: &[SequencePair],
    opt: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let (losses, mut grads) = batch_gradient(params, batch, cfg.exec)?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    if !mean.is_finite() || !grads.all_finite() {
        return Err(TrainError::NonFinite { step: opt.step + 1 });
    }
    let norm = grads.global_norm();
    if norm > cfg.clip_norm {
        grads.scale((cfg.clip_norm / norm) as f32);
    }
    let _flush = FlushGuard::new();
    opt.update(params, &grads, cfg);
    Ok(mean)
}

/// Where a run stands: weights, optimizer moments, and position in the epoch schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: ModelParams<f32>,
    pub opt: AdamState,
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch: usize,
}

const META_STEP: &str = "train.step";
const META_EPOCH: &str = "train.epoch";
const META_BATCH: &str = "train.batch";

impl TrainerState {
    pub fn new(params: ModelParams<f32>) -> Self {
        let opt = AdamState::new(&params);
        Self {
            params,
            opt,
            epoch: 0,
            batch: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.params.clone());
        ckpt.meta.insert(META_STEP.into(), self.opt.step);
        ckpt.meta.insert(META_EPOCH.into(), self.epoch as u64);
        ckpt.meta.insert(META_BATCH.into(), self.batch as u64);
        for (prefix, moments) in [("adam.m.", &self.opt.m), ("adam.v.", &self.opt.v)] {
            for (name, t) in moments.tensors() {
                let owned = ArrayD::from_shape_vec(IxDyn(t.shape()), t.iter().copied().collect())
                    .expect("shape matches");
                ckpt.extra.push((format!("{prefix}{name}"), owned));
            }
        }
        ckpt
    }

    /// Restores a run; checkpoints without optimizer state start fresh moments.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        let mut state = Self::new(ckpt.params);
        let Some(&step) = ckpt.meta.get(META_STEP) else {
            return Ok(state);
        };
        state.opt.step = step;
        state.epoch = ckpt.meta.get(META_EPOCH).copied().unwrap_or(0) as usize;
        state.batch = ckpt.meta.get(META_BATCH).copied().unwrap_or(0) as usize;
        let extra: std::collections::HashMap<_, _> = ckpt.extra.into_iter().collect();
        for (prefix, moments) in [("adam.m.", &mut state.opt.m), ("adam.v.", &mut state.opt.v)] {
            for (name, mut dst) in moments.tensors_mut() {
                let key = format!("{prefix}{name}");
                let src = extra.get(&key).ok_or_else(|| TrainError::MissingState(key.clone()))?;
                if src.shape() != dst.shape() {
                    return Err(TrainError::MissingState(key));
                }
                dst.assign(src);
            }
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    /// Train until this many epochs have completed in total.
    pub epochs: usize,
    /// Directory for `loss.csv` and `ckpt-{step}.bin`; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Extra checkpoint every this many steps, on top of the end of each epoch.
    pub checkpoint_every: Option<u64>,
}

/// Batch order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step}.bin"))
}

fn write_state(dir: &Path, state: &TrainerState) -> Result<(), TrainError> {
    model::save_checkpoint(&checkpoint_path(dir, state.opt.step), &state.to_checkpoint())?;
    Ok(())
}

/// Seeded epochs of shuffled batches, resuming from wherever `state` stands.
pub fn train_loop(
    mut state: TrainerState,
    corpus: &[SequencePair],
    cfg: &TrainConfig,
    opts: &LoopOptions,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<(TrainerState, Vec<LossRecord>), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("loss.csv");
            let fresh = state.opt.step == 0;
            let file = if fresh {
                File::create(&path)
            } else {
                OpenOptions::new().append(true).create(true).open(&path)
            }
            .map_err(io_err(&path))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "step,epoch,mean_loss").map_err(io_err(&path))?;
            }
            Some((w, path))
        }
        None => None,
    };

    let mut curve = Vec::new();
    let n_batches = corpus.len().div_ceil(cfg.batch_size);
    while state.epoch < opts.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, state.epoch);
        while state.batch < n_batches {
            let lo = state.batch * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(corpus.len());
            let batch: Vec<SequencePair> = order[lo..hi].iter().map(|&i| corpus[i].clone()).collect();
            let mean_loss = train_step(&mut state.params, &batch, &mut state.opt, cfg)?;
            state.batch += 1;
            let record = LossRecord {
                step: state.opt.step,
                epoch: state.epoch,
                mean_loss,
            };
            if let Some((w, path)) = csv.as_mut() {
                writeln!(w, "{},{},{}", record.step, record.epoch, record.mean_loss)
                    .map_err(io_err(path))?;
            }
            on_step(&record);
            curve.push(record);
            if let (Some(dir), Some(every)) = (&opts.out_dir, opts.checkpoint_every) {
                if every > 0 && state.opt.step % every == 0 && state.batch < n_batches {
                    write_state(dir, &state)?;
                }
            }
        }
        state.epoch += 1;
        state.batch = 0;
        if let Some(dir) = &opts.out_dir {
            write_state(dir, &state)?;
        }
    }
    if let Some((mut w, path)) = csv {
        w.flush().map_err(io_err(&path))?;
    }
    if let Some(dir) = &opts.out_dir {
        let path = checkpoint_path(dir, state.opt.step);
        if !path.exists() {
            write_state(dir, &state)?;
        }
    }
    Ok((state, curve))
}

/// Mean loss per epoch of a loss curve.
pub fn epoch_means(curve: &[LossRecord]) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in curve {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.mean_loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.mean_loss, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}
