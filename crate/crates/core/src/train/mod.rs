//! BPTT training, evaluation, checkpoints and the ablation harness.

mod adam;
mod augment;
mod checkpoint;
mod data;

pub use adam::{clip_global_norm, AdamHyper, OptimizerState};
pub use augment::{augment, draw_transforms, AugmentConfig, Transform};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{read_gray16, write_gray16, Dataset, DatasetInfo, Sample};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::error::{Error, Result};
use crate::events::EventTensor;
use crate::flow::FlowField;
use crate::losses::{aee, supervised_loss, total_selfsup_loss, LossConfig, LossValue};
use crate::network::{batch_inputs, HybridConfig, Network, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Supervised,
    SelfSupervised,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" | "sup" => Ok(Self::Supervised),
            "selfsup" | "self_supervised" | "self-supervised" => Ok(Self::SelfSupervised),
            other => Err(Error::InvalidConfig(format!("unknown loss mode `{other}`"))),
        }
    }
}

/// When to clip the global gradient norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// Only for networks with spiking or recurrent layers.
    Auto,
    Always,
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f32,
    pub lr_decay: f32,
    pub lr_every: usize,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub clip: ClipMode,
    pub clip_norm: f32,
    pub loss: LossConfig,
    /// Also apply the loss to every coarser accumulated flow.
    pub multiscale: bool,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr0: 1e-3,
            lr_decay: 0.7,
            lr_every: 10,
            batch_size: 8,
            loss_mode: LossMode::Supervised,
            seed: 0,
            augment: AugmentConfig::none(),
            clip: ClipMode::Auto,
            clip_norm: 10.0,
            loss: LossConfig::default(),
            multiscale: false,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 = {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay = {}", self.lr_decay));
        }
        if self.lr_every == 0 || self.batch_size == 0 {
            return bad("lr_every and batch_size must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm = {}", self.clip_norm));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction = {}", self.train_fraction));
        }
        self.loss.validate()
    }

    /// `lr0 * decay^floor(epoch / every)`
    pub fn lr_at(&self, epoch: usize) -> f32 {
        (self.lr0 as f64 * (self.lr_decay as f64).powi((epoch / self.lr_every) as i32)) as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub val_aee: f32,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_aee";

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in log {
        let _ = writeln!(out, "{},{},{},{}", m.epoch, m.lr, m.train_loss, m.val_aee);
    }
    out
}

/// Average-pools a `[.., H, W]` tensor by `f` in both directions.
fn pool(t: &Tensor, f: usize) -> Result<Tensor> {
    let nd = t.ndim();
    let (h, w) = (t.dim(nd - 2), t.dim(nd - 1));
    let (oh, ow) = (h / f, w / f);
    let mut out = Vec::with_capacity(t.numel() / (f * f));
    for p in t.data().chunks(h * w) {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0f32;
                for dy in 0..f {
                    for dx in 0..f {
                        s += p[(y * f + dy) * w + x * f + dx];
                    }
                }
                out.push(s / (f * f) as f32);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Tensor::new(&shape, out)
}

fn sample_loss(
    mode: LossMode,
    cfg: &LossConfig,
    pred: &FlowField,
    s: &Sample,
    factor: usize,
) -> Result<LossValue> {
    match mode {
        LossMode::Supervised => {
            let gt = if factor == 1 {
                s.flow.clone()
            } else {
                FlowField::from_tensor(pool(s.flow.tensor(), factor)?.map(|v| v / factor as f32))?
            };
            supervised_loss(pred, &gt)
        }
        LossMode::SelfSupervised => {
            let (a, b) = s.frames.as_ref().ok_or_else(|| {
                Error::InvalidConfig("self-supervised loss needs grayscale frames".into())
            })?;
            if factor == 1 {
                total_selfsup_loss(a, b, pred, cfg)
            } else {
                total_selfsup_loss(&pool(a, factor)?, &pool(b, factor)?, pred, cfg)
            }
        }
    }
}

/// Mean per-sample AEE over event pixels, in eval mode. Samples without
/// events are skipped; `NaN` when none remain.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<f32> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let events: Vec<&EventTensor> = chunk.iter().map(|s| &s.events).collect();
        let out = net.forward_sequence(&events)?;
        for (pred, s) in out.flow.iter().zip(chunk) {
            match aee(pred, &s.flow, &s.event_mask()) {
                Ok(v) => {
                    total += v as f64;
                    n += 1;
                }
                Err(Error::EmptyMask) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(if n == 0 {
        f32::NAN
    } else {
        (total / n as f64) as f32
    })
}

/// Owns a network, its optimizer and the training RNG; resumable from a
/// checkpoint.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub epoch: usize,
    pub log: Vec<EpochMetrics>,
    /// `(height, width)` of the training data, fixed by the first epoch.
    pub resolution: Option<(usize, usize)>,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    network_seed: String,
    spec: NetworkSpec,
    hybrid: HybridConfig,
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    adam: AdamHyper,
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
    metrics: Vec<EpochMetrics>,
    #[serde(default)]
    resolution: Option<(usize, usize)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::CorruptCheckpoint(format!("bad RNG seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(net.params(), AdamHyper::default());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            net,
            opt,
            cfg,
            epoch: 0,
            log: Vec::new(),
            resolution: None,
            rng,
        })
    }

    fn clipping(&self) -> bool {
        match self.cfg.clip {
            ClipMode::Always => true,
            ClipMode::Never => false,
            ClipMode::Auto => {
                let h = self.net.hybrid();
                !h.spiking.is_empty() || !h.recurrent.is_empty()
            }
        }
    }

    /// One optimizer step on a batch; returns the mean loss.
    pub fn train_batch(&mut self, batch: &[Sample], lr: f32) -> Result<f32> {
        let epoch = self.epoch;
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::DivergedLoss {
                epoch,
                value: f32::NAN,
            },
            other => other,
        };
        let events: Vec<&EventTensor> = batch.iter().map(|s| &s.events).collect();
        let inputs = batch_inputs(&events)?;
        let mut tape = Tape::new();
        let run = self
            .net
            .forward_on_tape(&mut tape, &inputs, Mode::Train)
            .map_err(diverged)?;
        let full_h = inputs[0].dim(2);
        let heads: Vec<_> = if self.cfg.multiscale {
            run.scales.clone()
        } else {
            vec![run.flow]
        };
        let b = batch.len();
        let mut total = 0.0f64;
        let mut seeds = Vec::with_capacity(heads.len());
        for var in heads {
            let value = tape.value(var);
            let factor = full_h / value.dim(2);
            let per = value.numel() / b;
            let mut grad = vec![0.0f32; value.numel()];
            for (i, s) in batch.iter().enumerate() {
                let pred = FlowField::from_tensor(value.sample(i))?;
                match sample_loss(self.cfg.loss_mode, &self.cfg.loss, &pred, s, factor) {
                    Ok(lv) => {
                        total += lv.value as f64;
                        for (g, &d) in grad[i * per..(i + 1) * per].iter_mut().zip(lv.grad.data()) {
                            *g = d / b as f32;
                        }
                    }
                    Err(Error::NoLabeledPixels | Error::NoValidPixels) => {}
                    Err(e) => return Err(e),
                }
            }
            seeds.push((var, Tensor::new(value.shape(), grad)?));
        }
        let loss = (total / b as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { epoch, value: loss });
        }
        let mut grads: BTreeMap<_, _> = tape.backward(&seeds).map_err(diverged)?.into_params();
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::DivergedLoss {
                epoch,
                value: f32::NAN,
            });
        }
        if self.clipping() {
            clip_global_norm(&mut grads, self.cfg.clip_norm);
        }
        self.opt.step(self.net.params_mut(), &grads, lr);
        Ok(loss)
    }

    /// Shuffles, augments and trains one epoch, then evaluates on `val`.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let res = train.resolution();
        match self.resolution {
            Some(r) if res != Some(r) => {
                return Err(Error::ShapeMismatch(format!(
                    "trained at {r:?}, data is {res:?}"
                )));
            }
            _ => self.resolution = res,
        }
        let lr = self.cfg.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches: Vec<Vec<usize>> = order
            .chunks(self.cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        // BNTT needs two samples per batch
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(last);
        }
        let mut sum = 0.0f64;
        for idx in &batches {
            let samples = idx
                .iter()
                .map(|&i| augment(&train.samples[i], &self.cfg.augment, &mut self.rng))
                .collect::<Result<Vec<_>>>()?;
            sum += self.train_batch(&samples, lr)? as f64;
        }
        let val_aee = if val.is_empty() {
            f32::NAN
        } else {
            evaluate(&self.net, val, self.cfg.batch_size)?
        };
        let m = EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss: (sum / batches.len() as f64) as f32,
            val_aee,
        };
        log::info!(
            "epoch {} lr {} loss {} val_aee {}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.val_aee
        );
        self.log.push(m);
        self.epoch += 1;
        Ok(m)
    }

    /// Trains until `self.epoch == epochs`.
    pub fn run_until(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        epochs: usize,
    ) -> Result<&[EpochMetrics]> {
        while self.epoch < epochs {
            self.run_epoch(train, val)?;
        }
        Ok(&self.log)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            network_seed: self.net.seed().to_string(),
            spec: self.net.spec().clone(),
            hybrid: self.net.hybrid().clone(),
            config: self.cfg.clone(),
            epoch: self.epoch,
            adam_step: self.opt.step,
            adam: self.opt.hyper,
            rng_seed: hex(&self.rng.get_seed()),
            rng_stream: self.rng.get_stream().to_string(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            metrics: self.log.clone(),
            resolution: self.resolution,
        };
        let meta = toml::to_string(&meta)
            .map_err(|e| Error::InvalidConfig(format!("checkpoint metadata: {e}")))?;
        let params = self.net.params();
        let mut blobs = Vec::new();
        for (id, name, t) in params.iter() {
            blobs.push((format!("param/{name}"), t.clone()));
            blobs.push((format!("adam.m/{name}"), self.opt.m[id.0].clone()));
            blobs.push((format!("adam.v/{name}"), self.opt.v[id.0].clone()));
        }
        for (i, s) in self.net.running_stats().iter().enumerate() {
            let (steps, c) = (s.steps(), s.channels());
            blobs.push((
                format!("bn.mean/{i}"),
                Tensor::new(&[steps, c], s.mean.concat())?,
            ));
            blobs.push((
                format!("bn.var/{i}"),
                Tensor::new(&[steps, c], s.var.concat())?,
            ));
        }
        Ok(Checkpoint { meta, blobs })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        let meta: CheckpointMeta =
            toml::from_str(&ckpt.meta).map_err(|e| corrupt(format!("metadata: {e}")))?;
        let seed: u64 = meta
            .network_seed
            .parse()
            .map_err(|_| corrupt("network seed".into()))?;
        let mut net = Network::build(&meta.spec, &meta.hybrid, seed)?;
        let blobs = ckpt.blob_map();
        let fetch = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = blobs
                .get(name)
                .ok_or_else(|| corrupt(format!("missing blob `{name}`")))?;
            if t.shape() != like.shape() {
                return Err(corrupt(format!(
                    "blob `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok((*t).clone())
        };
        let mut opt = OptimizerState::new(net.params(), meta.adam);
        opt.step = meta.adam_step;
        let ids: Vec<_> = net.params().ids().collect();
        for id in ids {
            let name = net.params().name(id).to_string();
            let like = net.params().get(id).clone();
            *net.params_mut().get_mut(id) = fetch(&format!("param/{name}"), &like)?;
            opt.m[id.0] = fetch(&format!("adam.m/{name}"), &like)?;
            opt.v[id.0] = fetch(&format!("adam.v/{name}"), &like)?;
        }
        for (i, s) in net.running_stats_mut().iter_mut().enumerate() {
            let like = Tensor::zeros(&[s.steps(), s.channels()]);
            let c = s.channels();
            let mean = fetch(&format!("bn.mean/{i}"), &like)?;
            let var = fetch(&format!("bn.var/{i}"), &like)?;
            s.mean = mean.data().chunks(c.max(1)).map(<[f32]>::to_vec).collect();
            s.var = var.data().chunks(c.max(1)).map(<[f32]>::to_vec).collect();
        }
        let mut rng = ChaCha8Rng::from_seed(unhex(&meta.rng_seed)?);
        rng.set_stream(
            meta.rng_stream
                .parse()
                .map_err(|_| corrupt("rng stream".into()))?,
        );
        rng.set_word_pos(
            meta.rng_word_pos
                .parse()
                .map_err(|_| corrupt("rng position".into()))?,
        );
        meta.config.validate()?;
        Ok(Self {
            net,
            opt,
            cfg: meta.config,
            epoch: meta.epoch,
            log: meta.metrics,
            resolution: meta.resolution,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Splits `dataset` 80:20 (per `cfg.train_fraction`) and trains for
/// `cfg.epochs`.
pub fn train(
    net: Network,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochMetrics>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (tr, val) = dataset.split(cfg.train_fraction);
    let mut trainer = Trainer::new(net, cfg.clone())?;
    trainer.run_until(&tr, &val, cfg.epochs)?;
    Ok((trainer.net, trainer.log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub hybrid: HybridConfig,
    pub val_aee: f32,
    pub train_loss: f32,
}

/// Trains every distinct configuration with the same seed and data and
/// reports the final validation AEE.
pub fn ablate(
    base: &NetworkSpec,
    configs: &[HybridConfig],
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if configs.is_empty() {
        return Err(Error::InvalidConfig("empty ablation sweep".into()));
    }
    for c in configs {
        c.validate(base)?;
    }
    let layers = base.num_activation_layers();
    let mut seen = Vec::new();
    let mut rows = Vec::new();
    for c in configs {
        if seen.contains(c) {
            log::warn!("duplicate ablation config {} skipped", c.label(layers));
            continue;
        }
        seen.push(c.clone());
        let net = Network::build(base, c, cfg.seed)?;
        let mut t = Trainer::new(net, cfg.clone())?;
        t.run_until(train_set, val_set, cfg.epochs)?;
        let last = t.log.last().copied().ok_or(Error::EmptyDataset)?;
        rows.push(AblationRow {
            label: c.label(layers),
            hybrid: c.clone(),
            val_aee: last.val_aee,
            train_loss: last.train_loss,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,val_aee,train_loss\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.label, r.val_aee, r.train_loss);
    }
    out
}
