//! SGD with momentum, the plateau schedule, epoch loops and checkpoints.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blocks::{assemble_network, ArchitectureSpec, Network};
use crate::datapipe::{self, AugmentConfig, DatasetManifest, Split, VideoEntry};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::ops::softmax_cross_entropy;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_divisor: f64,
    pub lr_floor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// When false, batch-norm affine terms and biases are not decayed.
    pub decay_bn_and_bias: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    /// Augmented clips drawn from each training video per epoch.
    pub clips_per_video: usize,
    /// Fraction of each class's training videos held out for validation.
    /// `None` validates on the test split.
    pub val_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 0.1,
            lr_divisor: 10.0,
            lr_floor: 1e-5,
            momentum: 0.9,
            weight_decay: 0.001,
            decay_bn_and_bias: true,
            batch_size: 16,
            max_epochs: 200,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            clips_per_video: 1,
            val_fraction: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_initial", self.lr_initial),
            ("lr_floor", self.lr_floor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr_divisor.is_finite() && self.lr_divisor > 1.0) {
            return Err(Error::config(format!("lr_divisor must exceed 1, got {}", self.lr_divisor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 || self.clips_per_video == 0 {
            return Err(Error::config("batch_size, max_epochs, plateau_patience and clips_per_video must be >= 1"));
        }
        if !(self.plateau_min_delta >= 0.0) {
            return Err(Error::config(format!("plateau_min_delta must be non-negative, got {}", self.plateau_min_delta)));
        }
        if let Some(f) = self.val_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("val_fraction must lie in (0, 1), got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    /// One tensor per registered parameter.
    pub velocity: Vec<Tensor<T>>,
    pub current_lr: f64,
    pub epochs_since_improvement: usize,
    pub best_val_loss: f64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(graph: &Graph<T>, lr: f64) -> Self {
        OptimizerState {
            velocity: (0..graph.params().len()).map(|i| Tensor::zeros(graph.param(i).shape())).collect(),
            current_lr: lr,
            epochs_since_improvement: 0,
            best_val_loss: f64::INFINITY,
        }
    }
}

/// One heavy-ball step on a single tensor:
/// `g' = g + wd·p; v = m·v + g'; p -= lr·v`.
pub fn sgd_update<T: Element>(p: &mut Tensor<T>, g: &Tensor<T>, v: &mut Tensor<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    p.same_shape(g)?;
    p.same_shape(v)?;
    let (lr, m, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        let g = g + wd * *p;
        *v = m * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Applies [`sgd_update`] to every parameter of `graph`. Fails before
/// touching anything if a gradient is not finite.
pub fn sgd_step<T: Element>(graph: &mut Graph<T>, grads: &[Tensor<T>], state: &mut OptimizerState<T>, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != graph.params().len() || state.velocity.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} gradients and {} velocities for {} parameters",
            grads.len(),
            state.velocity.len(),
            graph.params().len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite { what: format!("gradient of {}", graph.params()[i].name) });
    }
    for (i, g) in grads.iter().enumerate() {
        let wd = if cfg.decay_bn_and_bias || !graph.params()[i].is_bn_or_bias() { cfg.weight_decay } else { 0.0 };
        sgd_update(graph.param_mut(i), g, &mut state.velocity[i], state.current_lr, cfg.momentum, wd)?;
    }
    Ok(())
}

/// Records one validation loss; returns true when the learning rate was cut.
pub fn plateau_update<T>(state: &mut OptimizerState<T>, val_loss: f64, cfg: &TrainConfig) -> bool {
    if val_loss < state.best_val_loss - cfg.plateau_min_delta {
        state.best_val_loss = val_loss;
        state.epochs_since_improvement = 0;
        return false;
    }
    state.epochs_since_improvement += 1;
    if state.epochs_since_improvement < cfg.plateau_patience {
        return false;
    }
    state.epochs_since_improvement = 0;
    let next = state.current_lr / cfg.lr_divisor;
    // tolerate rounding in repeated division so lr can land on the floor itself
    if next < cfg.lr_floor * (1.0 - 1e-9) {
        return false;
    }
    state.current_lr = next;
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Wall-clock time of the epoch; the only non-reproducible field.
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.wall_seconds
        )
    }
}

/// Training and validation video lists.
pub fn split_for_training<'a>(manifest: &'a DatasetManifest, cfg: &TrainConfig) -> Result<(Vec<&'a VideoEntry>, Vec<&'a VideoEntry>)> {
    let train = manifest.split_videos(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train split has no videos".into()));
    }
    let Some(frac) = cfg.val_fraction else {
        let val = manifest.split_videos(Split::Test);
        if val.is_empty() {
            return Err(Error::EmptySplit("test split (used for validation) has no videos".into()));
        }
        return Ok((train, val));
    };
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for c in 0..manifest.num_classes() {
        let class: Vec<&VideoEntry> = train.iter().copied().filter(|v| v.label == c).collect();
        let n_val = ((frac * class.len() as f64).round() as usize).min(class.len().saturating_sub(1));
        let cut = class.len() - n_val;
        keep.extend_from_slice(&class[..cut]);
        held.extend_from_slice(&class[cut..]);
    }
    if held.is_empty() {
        return Err(Error::EmptySplit(format!("val_fraction {frac} leaves no validation videos")));
    }
    Ok((keep, held))
}

/// Batches of positions into the shuffled clip list. A trailing batch of
/// one clip joins the previous batch (batch norm needs two samples).
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut ranges: Vec<_> = (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect();
    if ranges.len() > 1 && ranges.last().is_some_and(|r| r.len() == 1) {
        let last = ranges.pop().unwrap();
        ranges.last_mut().unwrap().end = last.end;
    }
    ranges
}

/// Everything an epoch needs besides the network and optimizer state.
pub struct EpochContext<'a> {
    pub manifest: &'a DatasetManifest,
    pub videos: &'a [&'a VideoEntry],
    pub train: &'a TrainConfig,
    pub augment: &'a AugmentConfig,
    pub mean: [f64; 3],
}

/// One pass over the shuffled training clips. Returns mean loss and clip
/// accuracy. Deterministic given `(seed, epoch)`.
pub fn train_epoch(net: &mut Network<f32>, state: &mut OptimizerState<f32>, ctx: &EpochContext, epoch: usize) -> Result<(f64, f64)> {
    let cfg = ctx.train;
    let mut order: Vec<usize> = (0..ctx.videos.len() * cfg.clips_per_video).map(|i| i % ctx.videos.len()).collect();
    order.shuffle(&mut datapipe::clip_rng(cfg.seed, epoch as u64, u64::MAX));

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for range in batch_ranges(order.len(), cfg.batch_size) {
        let videos: Vec<&VideoEntry> = order[range.clone()].iter().map(|&i| ctx.videos[i]).collect();
        let batch = datapipe::training_batch(ctx.manifest, &videos, ctx.augment, &ctx.mean, cfg.seed, epoch as u64, range.start as u64)?;
        let logits = net.forward(&batch.data, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
        if !loss.is_finite() || !logits.all_finite() {
            let ids: Vec<&str> = batch.provenance.iter().map(|p| p.video_id.as_str()).collect();
            return Err(Error::NonFinite { what: format!("training loss at epoch {epoch}, clips {}..{} ({})", range.start, range.end, ids.join(", ")) });
        }
        loss_sum += loss * videos.len() as f64;
        correct += count_correct(&logits, &batch.labels)?;
        let grads = net.backward(&grad)?;
        sgd_step(net, &grads.params, state, cfg)?;
    }
    Ok((loss_sum / order.len() as f64, correct as f64 / order.len() as f64))
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> Result<usize> {
    let [_, k] = logits.dims2()?;
    Ok(logits.data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode loss and clip accuracy over the evaluation windows of
/// `videos`. Leaves the network untouched.
pub fn validate(net: &Network<f32>, manifest: &DatasetManifest, videos: &[&VideoEntry], augment: &AugmentConfig, mean: &[f64; 3]) -> Result<(f64, f64)> {
    if videos.is_empty() {
        return Err(Error::EmptySplit("validation split has no videos".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut clips = 0;
    for v in videos {
        let data = datapipe::evaluation_clips(manifest, v, augment, mean)?;
        let n = data.shape()[0];
        let logits = net.infer(&data)?;
        let labels = vec![v.label; n];
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: format!("validation loss on video {}", v.id) });
        }
        loss_sum += loss * n as f64;
        correct += count_correct(&logits, &labels)?;
        clips += n;
    }
    Ok((loss_sum / clips as f64, correct as f64 / clips as f64))
}

/// A resumable training run.
pub struct Trainer {
    pub net: Network<f32>,
    pub state: OptimizerState<f32>,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub manifest: DatasetManifest,
    pub history: Vec<EpochMetrics>,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(spec: &ArchitectureSpec, manifest: DatasetManifest, train: TrainConfig, augment: AugmentConfig) -> Result<Self> {
        train.validate()?;
        augment.validate()?;
        check_compatible(spec, &manifest, &augment)?;
        let net = assemble_network::<f32>(spec, train.seed)?;
        let state = OptimizerState::new(&net, train.lr_initial);
        Ok(Trainer { net, state, train, augment, manifest, history: Vec::new(), epoch: 0 })
    }

    /// Trains one more epoch, validates, and steps the schedule.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let mean = self.manifest.require_channel_mean()?;
        let (train_videos, val_videos) = split_for_training(&self.manifest, &self.train)?;
        let ctx = EpochContext { manifest: &self.manifest, videos: &train_videos, train: &self.train, augment: &self.augment, mean };
        let lr = self.state.current_lr;
        let (train_loss, train_acc) = train_epoch(&mut self.net, &mut self.state, &ctx, self.epoch)?;
        let (val_loss, val_acc) = validate(&self.net, &self.manifest, &val_videos, &self.augment, &mean)?;
        plateau_update(&mut self.state, val_loss, &self.train);
        self.epoch += 1;
        let m = EpochMetrics { epoch: self.epoch, lr, train_loss, train_acc, val_loss, val_acc, wall_seconds: start.elapsed().as_secs_f64() };
        self.history.push(m.clone());
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let g = self.net.graph();
        Checkpoint {
            spec: self.net.spec().clone(),
            train: self.train.clone(),
            augment: self.augment.clone(),
            epoch: self.epoch,
            params: (0..g.params().len()).map(|i| (g.params()[i].name.clone(), g.param(i).clone())).collect(),
            buffers: (0..g.buffers().len()).map(|i| (g.buffers()[i].name.clone(), g.buffer(i).clone())).collect(),
            state: self.state.clone(),
            history: self.history.clone(),
        }
    }

    /// Rebuilds a run from a checkpoint. The network is reassembled from the
    /// stored spec and every tensor is restored by name.
    pub fn from_checkpoint(ckpt: Checkpoint, manifest: DatasetManifest) -> Result<Self> {
        let mut trainer = Trainer::new(&ckpt.spec, manifest, ckpt.train.clone(), ckpt.augment.clone())?;
        ckpt.restore_into(&mut trainer.net)?;
        if ckpt.state.velocity.len() != trainer.net.params().len() {
            return Err(Error::CheckpointPayload("optimizer state does not match the network".into()));
        }
        for (i, v) in ckpt.state.velocity.iter().enumerate() {
            trainer.net.param(i).same_shape(v).map_err(|e| Error::CheckpointPayload(e.to_string()))?;
        }
        trainer.state = ckpt.state;
        trainer.history = ckpt.history;
        trainer.epoch = ckpt.epoch;
        Ok(trainer)
    }
}

/// Checks that a dataset and augmentation produce clips the network accepts.
pub fn check_compatible(spec: &ArchitectureSpec, manifest: &DatasetManifest, augment: &AugmentConfig) -> Result<()> {
    let want = [3, augment.clip_len, augment.output_size, augment.output_size];
    if spec.clip_shape != want {
        return Err(Error::config(format!(
            "architecture clip_shape {:?} does not match augmentation output {:?}",
            spec.clip_shape, want
        )));
    }
    if spec.num_classes != manifest.num_classes() {
        return Err(Error::config(format!(
            "architecture has {} classes, dataset has {}",
            spec.num_classes,
            manifest.num_classes()
        )));
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"R3DC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state. The data pipeline draws from streams keyed by
/// `(seed, epoch, clip)`, so `train.seed` and `epoch` are its RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub epoch: usize,
    pub params: Vec<(String, Tensor<f32>)>,
    pub buffers: Vec<(String, Tensor<f32>)>,
    pub state: OptimizerState<f32>,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    /// Copies stored parameters and running statistics into `net` by name.
    pub fn restore_into(&self, net: &mut Network<f32>) -> Result<()> {
        if net.spec() != &self.spec {
            return Err(Error::config(format!(
                "checkpoint architecture {:?} does not match {:?}",
                self.spec.name,
                net.spec().name
            )));
        }
        if self.params.len() != net.params().len() || self.buffers.len() != net.buffers().len() {
            return Err(Error::CheckpointPayload("tensor count does not match the network".into()));
        }
        for (i, (name, t)) in self.params.iter().enumerate() {
            if &net.params()[i].name != name {
                return Err(Error::CheckpointPayload(format!("parameter {i} is {name}, network expects {}", net.params()[i].name)));
            }
            let dst = net.param_mut(i);
            dst.same_shape(t).map_err(|e| Error::CheckpointPayload(format!("{name}: {e}")))?;
            *dst = t.clone();
        }
        for (i, (name, t)) in self.buffers.iter().enumerate() {
            if &net.buffers()[i].name != name {
                return Err(Error::CheckpointPayload(format!("buffer {i} is {name}, network expects {}", net.buffers()[i].name)));
            }
            let dst = net.buffer_mut(i);
            dst.same_shape(t).map_err(|e| Error::CheckpointPayload(format!("{name}: {e}")))?;
            *dst = t.clone();
        }
        Ok(())
    }

    /// `R3DC | version u32 | payload length u64 | payload | crc32(payload) u32`,
    /// all little-endian.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.str(&serde_json::to_string(&self.spec)?);
        w.str(&serde_json::to_string(&self.train)?);
        w.str(&serde_json::to_string(&self.augment)?);
        w.u64(self.epoch as u64);
        w.named_tensors(&self.params);
        w.named_tensors(&self.buffers);
        w.f64(self.state.current_lr);
        w.u64(self.state.epochs_since_improvement as u64);
        w.f64(self.state.best_val_loss);
        w.u64(self.state.velocity.len() as u64);
        for v in &self.state.velocity {
            w.tensor(v);
        }
        w.u64(self.history.len() as u64);
        for m in &self.history {
            w.u64(m.epoch as u64);
            for x in [m.lr, m.train_loss, m.train_acc, m.val_loss, m.val_acc, m.wall_seconds] {
                w.f64(x);
            }
        }
        let payload = w.0;
        let mut out = Vec::with_capacity(payload.len() + 20);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::CheckpointTruncated);
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointMagic);
        }
        if bytes.len() < 16 {
            return Err(Error::CheckpointTruncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[16..];
        if (body.len() as u64) < len.saturating_add(4) {
            return Err(Error::CheckpointTruncated);
        }
        let len = len as usize;
        if body.len() != len + 4 {
            return Err(Error::CheckpointPayload(format!("{} trailing bytes", body.len() - len - 4)));
        }
        let payload = &body[..len];
        let stored = u32::from_le_bytes(body[len..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::CheckpointChecksum { stored, computed });
        }

        let mut r = Reader { buf: payload, pos: 0 };
        let spec: ArchitectureSpec = json(r.str()?)?;
        let train: TrainConfig = json(r.str()?)?;
        let augment: AugmentConfig = json(r.str()?)?;
        let epoch = r.u64()? as usize;
        let params = r.named_tensors()?;
        let buffers = r.named_tensors()?;
        let current_lr = r.f64()?;
        let epochs_since_improvement = r.u64()? as usize;
        let best_val_loss = r.f64()?;
        let n = r.count()?;
        let velocity = (0..n).map(|_| r.tensor()).collect::<Result<_>>()?;
        let n = r.count()?;
        let mut history = Vec::with_capacity(n);
        for _ in 0..n {
            let epoch = r.u64()? as usize;
            let mut x = [0.0; 6];
            for v in &mut x {
                *v = r.f64()?;
            }
            let [lr, train_loss, train_acc, val_loss, val_acc, wall_seconds] = x;
            history.push(EpochMetrics { epoch, lr, train_loss, train_acc, val_loss, val_acc, wall_seconds });
        }
        if r.pos != payload.len() {
            return Err(Error::CheckpointPayload("unread bytes at end of payload".into()));
        }
        Ok(Checkpoint {
            spec,
            train,
            augment,
            epoch,
            params,
            buffers,
            state: OptimizerState { velocity, current_lr, epochs_since_improvement, best_val_loss },
            history,
        })
    }
}

fn json<T: serde::de::DeserializeOwned>(s: String) -> Result<T> {
    serde_json::from_str(&s).map_err(|e| Error::CheckpointPayload(e.to_string()))
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.encode()?;
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u64(t.rank() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn named_tensors(&mut self, items: &[(String, Tensor<f32>)]) {
        self.u64(items.len() as u64);
        for (name, t) in items {
            self.str(name);
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::CheckpointPayload("payload ends early".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A length prefix, bounded by the bytes left so corrupt counts cannot
    /// trigger huge allocations.
    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::CheckpointPayload(format!("count {n} exceeds remaining payload")));
        }
        Ok(n as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.count()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::CheckpointPayload(e.to_string()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.count()?;
        let shape: Vec<usize> = (0..rank).map(|_| self.count()).collect::<Result<_>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::CheckpointPayload("tensor too large".into()))?;
        let bytes = self.take(len.checked_mul(4).ok_or_else(|| Error::CheckpointPayload("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| Error::CheckpointPayload(e.to_string()))
    }

    fn named_tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.count()?;
        (0..n).map(|_| Ok((self.str()?, self.tensor()?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(momentum: f64, weight_decay: f64) -> TrainConfig {
        TrainConfig { momentum, weight_decay, ..TrainConfig::default() }
    }

    fn step(p: f64, g: f64, v: f64, lr: f64, c: &TrainConfig) -> (f64, f64) {
        let mut p = Tensor::full(&[1], p);
        let mut v = Tensor::full(&[1], v);
        sgd_update(&mut p, &Tensor::full(&[1], g), &mut v, lr, c.momentum, c.weight_decay).unwrap();
        (p.data()[0], v.data()[0])
    }

    #[test]
    fn vanilla_step() {
        assert_eq!(step(1.0, 1.0, 0.0, 0.1, &cfg(0.0, 0.0)).0, 0.9);
    }

    #[test]
    fn decay_only_step() {
        assert_eq!(step(10.0, 0.0, 0.0, 0.1, &cfg(0.0, 0.001)).0, 10.0 - 0.1 * (0.001 * 10.0));
    }

    #[test]
    fn plateau_trace() {
        let c = TrainConfig { plateau_patience: 3, ..TrainConfig::default() };
        let mut s = OptimizerState::<f32> { velocity: vec![], current_lr: 0.1, epochs_since_improvement: 0, best_val_loss: f64::INFINITY };
        let cut: Vec<bool> = [1.0, 0.9, 0.91, 0.92, 0.93].iter().map(|&l| plateau_update(&mut s, l, &c)).collect();
        assert_eq!(cut, [false, false, false, false, true]);
        assert_eq!(s.current_lr, 0.1 / 10.0);
    }

    #[test]
    fn batches_never_end_with_a_single_clip() {
        assert_eq!(batch_ranges(33, 16), [0..16, 16..33]);
        assert_eq!(batch_ranges(32, 16), [0..16, 16..32]);
        assert_eq!(batch_ranges(1, 16), [0..1]);
        assert_eq!(batch_ranges(5, 2), [0..2, 2..5]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { plateau_patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_initial: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
