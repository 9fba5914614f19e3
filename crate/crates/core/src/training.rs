//! Patch-based training: each step samples class-balanced patch centers,
//! computes the dense per-voxel loss over whole patches and updates the
//! weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::netexec::{
    graph_hash, save_checkpoint, softmax_cross_entropy, Checkpoint, Gradients, Mode, Network, Tensor, WeightSet,
};
use crate::sampling::{stream_rng, CenterSampler, SamplerConfig, Strategy};
use crate::volume::{Dims, PadPolicy, PatchSpec, Subject};
use crate::{Error, Result};

/// Batch-norm running statistics momentum.
pub const BN_MOMENTUM: f64 = 0.9;
const SGD_MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum,
    #[default]
    AdaptiveMoments,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::SgdMomentum => "sgd_momentum",
            Optimizer::AdaptiveMoments => "adaptive_moments",
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" => Ok(Self::SgdMomentum),
            "adaptive_moments" => Ok(Self::AdaptiveMoments),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Patches drawn per epoch in total, assigned round-robin to subjects.
    pub patches_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub split_ratio: f64,
    pub patch_size: Dims,
    pub foreground_probability: f64,
    /// Patches per validation pass; 0 means `patches_per_epoch`.
    pub validation_patches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            patches_per_epoch: 20,
            epochs: 10,
            learning_rate: 1e-3,
            optimizer: Optimizer::AdaptiveMoments,
            class_weights: None,
            seed: 0,
            split_ratio: 0.6,
            patch_size: [64; 3],
            foreground_probability: 0.5,
            validation_patches: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.patches_per_epoch == 0 {
            return bad("patches per epoch must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad(format!("class weights must be positive, got {w:?}"));
            }
        }
        self.sampler().validate()
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            patch_size: self.patch_size,
            foreground_probability: self.foreground_probability,
            strategy: Strategy::FgBgBalanced,
            seed: self.seed,
        }
    }

    pub fn patch_voxels(&self) -> u64 {
        self.patch_size.iter().map(|&d| d as u64).product()
    }
}

/// Shuffles subject ids with `seed` and splits off the first
/// `round(ratio * n)` as the training set.
pub fn split_dataset<S: Clone>(ids: &[S], ratio: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if ids.len() < 2 {
        return Err(Error::Config(format!("splitting needs at least 2 subjects, got {}", ids.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut stream_rng(seed, 0));
    let k = (ratio * ids.len() as f64).round() as usize;
    let pick = |r: &[usize]| r.iter().map(|&i| ids[i].clone()).collect();
    Ok((pick(&order[..k]), pick(&order[k..])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Patch voxels processed this epoch.
    pub voxels: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurves {
    pub epochs: Vec<EpochRecord>,
}

fn fmt_loss(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:?}"))
}

impl TrainingCurves {
    /// Columns `epoch,train_loss,val_loss,voxels`; reproducible byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,voxels\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:?},{},{}", r.epoch, r.train_loss, fmt_loss(r.val_loss), r.voxels);
        }
        s
    }

    /// Columns `epoch,seconds`.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:.3}", r.epoch, r.seconds);
        }
        s
    }

    /// Wall-clock seconds are not stored; restored records carry zero.
    fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let join = |f: &dyn Fn(&EpochRecord) -> String| self.epochs.iter().map(f).collect::<Vec<_>>().join(",");
        meta.insert("curve_train_loss".into(), join(&|r| format!("{:?}", r.train_loss)));
        meta.insert("curve_val_loss".into(), join(&|r| fmt_loss(r.val_loss)));
        meta.insert("curve_voxels".into(), join(&|r| r.voxels.to_string()));
    }

    fn from_meta(meta: &BTreeMap<String, String>, epochs: u64) -> Result<Self> {
        let list = |key: &str| -> Result<Vec<&str>> {
            let s = meta
                .get(key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
            let v: Vec<&str> = if s.is_empty() { Vec::new() } else { s.split(',').collect() };
            if v.len() as u64 != epochs {
                return Err(Error::Format(format!("{key} has {} entries for {epochs} epochs", v.len())));
            }
            Ok(v)
        };
        let bad = |k: &str| Error::Format(format!("cannot parse {k}"));
        let (tl, vl, vx) = (
            list("curve_train_loss")?,
            list("curve_val_loss")?,
            list("curve_voxels")?,
        );
        let mut out = Vec::new();
        for i in 0..epochs as usize {
            out.push(EpochRecord {
                epoch: i as u64 + 1,
                train_loss: tl[i].parse().map_err(|_| bad("train loss"))?,
                val_loss: match vl[i] {
                    "NA" => None,
                    v => Some(v.parse().map_err(|_| bad("validation loss"))?),
                },
                voxels: vx[i].parse().map_err(|_| bad("voxels"))?,
                seconds: 0.0,
            });
        }
        Ok(Self { epochs: out })
    }
}

/// Moment buffers, one per learnable tensor in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: Optimizer,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, weights: &WeightSet<f32>) -> Self {
        let zeros = |w: &WeightSet<f32>| w.learnable().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            kind,
            first: zeros(weights),
            second: if kind == Optimizer::AdaptiveMoments { zeros(weights) } else { Vec::new() },
        }
    }

    /// Applies one update; `step` is 1-based.
    pub fn apply(&mut self, weights: &mut WeightSet<f32>, grads: &Gradients<f32>, lr: f64, step: u64) {
        let g = grads.learnable();
        let mut w = weights.learnable_mut();
        match self.kind {
            Optimizer::SgdMomentum => {
                for ((wt, gt), vt) in w.iter_mut().zip(&g).zip(&mut self.first) {
                    for ((wi, &gi), vi) in wt.iter_mut().zip(gt.iter()).zip(vt.iter_mut()) {
                        *vi = (SGD_MOMENTUM * *vi as f64 + gi as f64) as f32;
                        *wi = (*wi as f64 - lr * *vi as f64) as f32;
                    }
                }
            }
            Optimizer::AdaptiveMoments => {
                let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
                for (((wt, gt), mt), vt) in w.iter_mut().zip(&g).zip(&mut self.first).zip(&mut self.second) {
                    for (((wi, &gi), mi), vi) in wt.iter_mut().zip(gt.iter()).zip(mt.iter_mut()).zip(vt.iter_mut()) {
                        let gi = gi as f64;
                        *mi = (ADAM_BETA1 * *mi as f64 + (1.0 - ADAM_BETA1) * gi) as f32;
                        *vi = (ADAM_BETA2 * *vi as f64 + (1.0 - ADAM_BETA2) * gi * gi) as f32;
                        let mhat = *mi as f64 / c1;
                        let vhat = *vi as f64 / c2;
                        *wi = (*wi as f64 - lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
                    }
                }
            }
        }
    }

    fn to_extra(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, t) in self.first.iter().enumerate() {
            out.push((format!("opt.first.{i}"), t.clone()));
        }
        for (i, t) in self.second.iter().enumerate() {
            out.push((format!("opt.second.{i}"), t.clone()));
        }
        out
    }

    fn from_extra(kind: Optimizer, weights: &WeightSet<f32>, extra: &[(String, Vec<f32>)]) -> Result<Self> {
        let mut s = Self::new(kind, weights);
        let lookup: BTreeMap<&str, &Vec<f32>> = extra.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let fill = |prefix: &str, bufs: &mut Vec<Vec<f32>>| -> Result<()> {
            for (i, b) in bufs.iter_mut().enumerate() {
                let key = format!("{prefix}.{i}");
                match lookup.get(key.as_str()) {
                    Some(v) if v.len() == b.len() => b.copy_from_slice(v),
                    _ => return Err(Error::Format(format!("checkpoint lacks optimizer tensor {key}"))),
                }
            }
            Ok(())
        };
        fill("opt.first", &mut s.first)?;
        fill("opt.second", &mut s.second)?;
        Ok(s)
    }
}

/// Called with each finished epoch.
pub type EpochHook<'a> = Box<dyn FnMut(&EpochRecord) + 'a>;

/// Optional side effects of [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Writes `epoch_NNN.ckpt` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continues from a checkpoint written by an earlier run.
    pub resume: Option<Checkpoint<f32>>,
    pub on_epoch: Option<EpochHook<'a>>,
}

pub struct TrainOutcome {
    pub weights: WeightSet<f32>,
    pub curves: TrainingCurves,
    pub steps: u64,
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Stacks `(subject, center)` patches into one batch.
fn assemble(subjects: &[Subject], picks: &[(usize, [usize; 3])], patch: Dims) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut images = Vec::with_capacity(picks.len());
    let mut labels = Vec::with_capacity(picks.len() * patch.iter().product::<usize>());
    for &(s, c) in picks {
        let spec = PatchSpec::centered(c, patch);
        images.push(subjects[s].image.extract_patch(&spec, PadPolicy::Zero)?);
        labels.extend_from_slice(subjects[s].labels.extract_patch(&spec, PadPolicy::Zero)?.labels());
    }
    let refs: Vec<_> = images.iter().collect();
    Ok((Tensor::from_volumes(&refs)?, labels))
}

fn draw_patches(
    samplers: &[CenterSampler],
    n: usize,
    config: &SamplerConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<(usize, [usize; 3])>> {
    (0..n)
        .map(|i| {
            let s = i % samplers.len();
            Ok((s, samplers[s].sample(1, config, rng)?[0]))
        })
        .collect()
}

fn check_subjects(net: &Network, subjects: &[Subject], config: &TrainConfig) -> Result<()> {
    let p = net.size_period();
    if config.patch_size.iter().any(|&d| d % p != 0) {
        return Err(Error::Config(format!(
            "patch size {:?} is not divisible by {p}",
            config.patch_size
        )));
    }
    for s in subjects {
        if s.image.num_modalities() != net.in_channels() {
            return Err(Error::Shape(format!(
                "subject {} has {} modalities, network expects {}",
                s.id,
                s.image.num_modalities(),
                net.in_channels()
            )));
        }
    }
    Ok(())
}

/// Trains `weights` on `train_set`, reporting the validation loss on
/// `val_set` (if non-empty) after every epoch.
///
/// Epoch `e` draws its patches from random stream `e` of `config.seed`, so
/// a run resumed from an epoch checkpoint continues exactly as the
/// uninterrupted run would have.
pub fn train(
    net: &Network,
    weights: WeightSet<f32>,
    train_set: &[Subject],
    val_set: &[Subject],
    config: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("no training subjects".into()));
    }
    check_subjects(net, train_set, config)?;
    check_subjects(net, val_set, config)?;
    weights.check(net)?;

    let (mut weights, mut opt, mut curves, mut step, start) = match opts.resume.take() {
        Some(ck) => {
            if graph_hash(&ck.graph) != graph_hash(&net.graph) {
                return Err(Error::Config("checkpoint was written for a different graph".into()));
            }
            let kind: Optimizer = match ck.meta.get("optimizer") {
                Some(k) => k.parse()?,
                None => return Err(Error::Format("checkpoint lacks optimizer kind".into())),
            };
            if kind != config.optimizer {
                return Err(Error::Config(format!(
                    "checkpoint used {}, config asks for {}",
                    kind.as_str(),
                    config.optimizer.as_str()
                )));
            }
            let opt = OptimizerState::from_extra(kind, &ck.weights, &ck.extra)?;
            let curves = TrainingCurves::from_meta(&ck.meta, ck.epoch)?;
            (ck.weights.with_mode(Mode::Train), opt, curves, ck.step, ck.epoch)
        }
        None => {
            let opt = OptimizerState::new(config.optimizer, &weights);
            (weights.with_mode(Mode::Train), opt, TrainingCurves::default(), 0, 0)
        }
    };

    let sampler = config.sampler();
    let samplers: Vec<CenterSampler> = train_set.iter().map(|s| CenterSampler::new(&s.labels)).collect();
    let patch_voxels = config.patch_voxels();
    let cw = config.class_weights.as_deref();

    for epoch in start..config.epochs as u64 {
        let clock = Instant::now();
        let mut rng = stream_rng(config.seed, epoch + 1);
        let picks = draw_patches(&samplers, config.patches_per_epoch, &sampler, &mut rng)?;
        let mut loss_sum = 0.0;
        for batch in picks.chunks(config.batch_size) {
            let (x, labels) = assemble(train_set, batch, config.patch_size)?;
            let r = net.loss_and_grad(&weights, &x, &labels, cw).map_err(|e| match e {
                Error::Invariant(_) => Error::Divergence {
                    epoch: epoch + 1,
                    loss: f64::NAN,
                },
                e => e,
            })?;
            if !r.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    loss: r.loss,
                });
            }
            step += 1;
            opt.apply(&mut weights, &r.grads, config.learning_rate, step);
            weights.update_running_stats(&r.batch_stats, BN_MOMENTUM);
            loss_sum += r.loss * batch.len() as f64;
        }
        let train_loss = loss_sum / picks.len() as f64;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_validation(net, &weights, val_set, config)?)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            voxels: picks.len() as u64 * patch_voxels,
            seconds: clock.elapsed().as_secs_f64(),
        };
        curves.epochs.push(record.clone());
        if let Some(dir) = &opts.checkpoint_dir {
            let ck = make_checkpoint(net, &weights, &opt, &curves, step, epoch + 1);
            save_checkpoint(dir.join(checkpoint_name(epoch + 1)), &ck)?;
        }
        if let Some(f) = opts.on_epoch.as_mut() {
            f(&record);
        }
    }
    Ok(TrainOutcome {
        weights,
        curves,
        steps: step,
    })
}

fn make_checkpoint(
    net: &Network,
    weights: &WeightSet<f32>,
    opt: &OptimizerState,
    curves: &TrainingCurves,
    step: u64,
    epoch: u64,
) -> Checkpoint<f32> {
    let mut meta = BTreeMap::new();
    meta.insert("optimizer".to_string(), opt.kind.as_str().to_string());
    curves.to_meta(&mut meta);
    Checkpoint {
        graph: net.graph.clone(),
        weights: weights.clone(),
        step,
        epoch,
        extra: opt.to_extra(),
        meta,
    }
}

/// Mean unweighted cross-entropy over a fixed set of class-balanced
/// validation patches, with batch normalization on running statistics.
pub fn evaluate_validation(
    net: &Network,
    weights: &WeightSet<f32>,
    subjects: &[Subject],
    config: &TrainConfig,
) -> Result<f64> {
    if subjects.is_empty() {
        return Err(Error::Config("no validation subjects".into()));
    }
    check_subjects(net, subjects, config)?;
    let w = weights.clone().with_mode(Mode::Inference);
    let samplers: Vec<CenterSampler> = subjects.iter().map(|s| CenterSampler::new(&s.labels)).collect();
    let n = match config.validation_patches {
        0 => config.patches_per_epoch,
        n => n,
    };
    let mut rng = stream_rng(config.seed, 0);
    let picks = draw_patches(&samplers, n, &config.sampler(), &mut rng)?;
    let mut sum = 0.0;
    for batch in picks.chunks(config.batch_size.max(1)) {
        let (x, labels) = assemble(subjects, batch, config.patch_size)?;
        let logits = net.forward(&w, &x)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels, None)?;
        sum += loss * batch.len() as f64;
    }
    Ok(sum / picks.len() as f64)
}

/// Writes `curves.csv` and `timing.csv` into `dir`.
pub fn write_curves(dir: impl AsRef<Path>, curves: &TrainingCurves) -> Result<()> {
    let dir = dir.as_ref();
    for (name, text) in [("curves.csv", curves.to_csv()), ("timing.csv", curves.timing_csv())] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
