//! Adam, the learning-rate schedule, the synthetic-then-real curriculum,
//! checkpoints and held-out evaluation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::augment::{augment_sequence, AugmentRanges};
use crate::dataio::manifest::Video;
use crate::dataio::sequences::{extract_real_sequences, DEFAULT_SAMPLING_STRIDE};
use crate::error::{Error, Result};
use crate::frame::{image_tensor, FrameSequence, Mask, RgbImage};
use crate::losses::{
    loss_backward_seq, loss_first, loss_forward_seq, loss_last, total_loss_real, total_loss_synthetic, LossWeights,
    OneHotMap,
};
use crate::metrics::{evaluate_video, model_flops, EvalReport, VideoEval};
use crate::model::{Direction, ModelConfig, SegModel};
use crate::par::{self, Exec};
use crate::synthseq::{synthesize_sequence, SynthesisRanges};
use crate::tensor::{archive, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curriculum {
    RealOnly,
    #[default]
    SyntheticThenReal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Synthetic,
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub decay_start: usize,
    pub curriculum: Curriculum,
    /// Frames per training sequence.
    pub seq_len: usize,
    /// Frame spacing inside real sequences.
    pub sampling_stride: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub clip_gradients: bool,
    pub clip_norm: f64,
    pub augment: bool,
    pub augment_ranges: AugmentRanges,
    pub synthesis: SynthesisRanges,
    /// Videos of this fold are held out for evaluation; `None` trains on all.
    pub holdout_fold: Option<u32>,
    pub eval_stride: usize,
    /// Stop once the held-out mean DSC reaches this value.
    pub early_stop_dsc: Option<f64>,
    /// Caps the number of training samples drawn per epoch.
    pub max_samples_per_epoch: Option<usize>,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 4,
            base_lr: 0.0005,
            decay_factor: 0.5,
            decay_interval: 5,
            decay_start: 20,
            curriculum: Curriculum::SyntheticThenReal,
            seq_len: 4,
            sampling_stride: DEFAULT_SAMPLING_STRIDE,
            seed: 0,
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
            clip_gradients: true,
            clip_norm: 5.0,
            augment: true,
            augment_ranges: AugmentRanges::default(),
            synthesis: SynthesisRanges::default(),
            holdout_fold: Some(0),
            eval_stride: 3,
            early_stop_dsc: None,
            max_samples_per_epoch: None,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_interval == 0 {
            return bad("decay_factor must lie in (0, 1] and decay_interval be positive");
        }
        if self.seq_len < 2 || self.sampling_stride == 0 || self.eval_stride == 0 {
            return bad("seq_len must be at least 2 and strides positive");
        }
        if self.clip_gradients && !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if matches!(self.max_samples_per_epoch, Some(0)) {
            return bad("max_samples_per_epoch must be positive");
        }
        self.loss_weights.validate()?;
        self.synthesis.validate()?;
        self.model.validate()
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        match self.curriculum {
            Curriculum::SyntheticThenReal if epoch < self.epochs / 2 => Phase::Synthetic,
            _ => Phase::Real,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).into()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `base` before `decay_start`, then `base · factor^(⌊(e − start)/interval⌋ + 1)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_start {
        return cfg.base_lr;
    }
    let k = (epoch - cfg.decay_start) / cfg.decay_interval + 1;
    cfg.base_lr * cfg.decay_factor.powi(k as i32)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Option<Tensor<f32>>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            axis: "parameters",
            expected: params.len(),
            got: grads.len(),
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].as_ref().map(|g| g.data());
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g[k] as f64);
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + state.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Parameters, optimizer moments, schedule position and the training config.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: SegModel<f32>,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
}

const META_CONFIG: &str = "meta/config_json";
const META_HASH: &str = "meta/config_sha256";
const META_EPOCH: &str = "meta/epoch";
const META_STEP: &str = "meta/step";

fn bytes_tensor(b: &[u8]) -> Tensor<f32> {
    Tensor::from_fn([b.len()], |i| b[i] as f32)
}

fn tensor_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::format("checkpoint", "byte tensor holds a non-byte value"))
            }
        })
        .collect()
}

/// Splits into 24-bit limbs, each exact in `f32`.
fn u64_tensor(v: u64) -> Tensor<f32> {
    Tensor::from_fn([3], |i| ((v >> (24 * (2 - i))) & 0xFF_FFFF) as f32)
}

fn tensor_u64(t: &Tensor<f32>) -> Result<u64> {
    if t.len() != 3 {
        return Err(Error::format("checkpoint", "counter tensor must have 3 limbs"));
    }
    Ok(t.data().iter().fold(0u64, |acc, &l| (acc << 24) | l as u64))
}

impl Checkpoint {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SegModel::new(config.model, config.seed)?;
        let optimizer = OptimizerState::new(&model.params);
        Ok(Checkpoint {
            config,
            model,
            optimizer,
            epoch: 0,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let meta = [
            (META_CONFIG.to_string(), bytes_tensor(&json)),
            (META_HASH.to_string(), bytes_tensor(&self.config.hash())),
            (META_EPOCH.to_string(), u64_tensor(self.epoch as u64)),
            (META_STEP.to_string(), u64_tensor(self.optimizer.step)),
        ];
        let mut named: Vec<(String, &Tensor<f32>)> = meta.iter().map(|(n, t)| (n.clone(), t)).collect();
        for (i, (name, p)) in self.model.params.iter().enumerate() {
            named.push((format!("param/{name}"), &p.value));
            named.push((format!("adam.m/{name}"), &self.optimizer.m[i]));
            named.push((format!("adam.v/{name}"), &self.optimizer.v[i]));
        }
        archive::encode(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut entries: std::collections::HashMap<String, Tensor<f32>> = archive::decode(bytes)?.into_iter().collect();
        let mut take = |name: &str| {
            entries
                .remove(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{name}`")))
        };
        let json = tensor_bytes(&take(META_CONFIG)?)?;
        let config: TrainConfig = serde_json::from_slice(&json)?;
        if tensor_bytes(&take(META_HASH)?)? != config.hash() {
            return Err(Error::format("checkpoint", "config hash does not match the stored config"));
        }
        let epoch = tensor_u64(&take(META_EPOCH)?)? as usize;
        let step = tensor_u64(&take(META_STEP)?)?;
        let mut ckpt = Checkpoint::new(config)?;
        ckpt.epoch = epoch;
        ckpt.optimizer.step = step;
        let names: Vec<String> = ckpt.model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let value = take(&format!("param/{name}"))?;
            let m = take(&format!("adam.m/{name}"))?;
            let v = take(&format!("adam.v/{name}"))?;
            let slot = ckpt.model.params.value_mut(name).expect("registered name");
            for t in [&value, &m, &v] {
                if t.shape() != slot.shape() {
                    return Err(Error::format(
                        "checkpoint",
                        format!("`{name}` has extents {:?}, model expects {:?}", t.shape(), slot.shape()),
                    ));
                }
            }
            *slot = value;
            ckpt.optimizer.m[i] = m;
            ckpt.optimizer.v[i] = v;
        }
        if let Some(extra) = entries.keys().min() {
            return Err(Error::format("checkpoint", format!("unexpected tensor `{extra}`")));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataio::pnm::write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Mean loss terms of one epoch; terms outside the epoch's objective are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_fw: Option<f64>,
    pub loss_bw: Option<f64>,
    pub loss_last: Option<f64>,
    pub loss_1st: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

/// Training material derived from a dataset.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    /// Sparse-label sequences ending at a labeled frame.
    pub real: Vec<FrameSequence>,
    /// Labeled frames that seed synthetic sequences.
    pub sources: Vec<(RgbImage, Mask)>,
    /// Videos used for held-out evaluation.
    pub holdout: Vec<Video>,
}

impl TrainSet {
    pub fn from_videos(videos: &[Video], cfg: &TrainConfig) -> TrainSet {
        let (holdout, train): (Vec<Video>, Vec<Video>) =
            videos.iter().cloned().partition(|v| Some(v.fold) == cfg.holdout_fold);
        let (real, report) = extract_real_sequences(&train, cfg.seq_len, cfg.sampling_stride);
        if !report.skipped.is_empty() {
            log::debug!("{} labeled frames lack history for a full sequence", report.skipped.len());
        }
        let sources = train
            .iter()
            .flat_map(|v| {
                v.labels
                    .iter()
                    .enumerate()
                    .filter_map(|(i, l)| l.as_ref().filter(|m| !m.is_empty()).map(|m| (v.frames[i].clone(), m.clone())))
            })
            .collect();
        TrainSet { real, sources, holdout }
    }

    /// Checks the set against the config before any compute.
    pub fn validate(&self, cfg: &TrainConfig) -> Result<()> {
        let stride = cfg.model.encoder.output_stride as u32;
        let dims = self
            .real
            .iter()
            .flat_map(|s| s.frames.iter().map(|f| f.dimensions()))
            .chain(self.sources.iter().map(|(f, _)| f.dimensions()))
            .chain(self.holdout.iter().flat_map(|v| v.frames.iter().map(|f| f.dimensions())));
        for (w, h) in dims {
            if w % stride != 0 || h % stride != 0 {
                return Err(Error::Invalid(format!("frames of {w}×{h} are not divisible by output stride {stride}")));
            }
        }
        let needs_synth = cfg.curriculum == Curriculum::SyntheticThenReal && cfg.epochs / 2 > 0;
        if needs_synth && self.sources.is_empty() {
            return Err(Error::Invalid("the synthetic phase needs labeled frames with an instrument".into()));
        }
        if self.real.is_empty() {
            return Err(Error::Invalid(format!(
                "no labeled frame has {} frames of history at stride {}",
                cfg.seq_len, cfg.sampling_stride
            )));
        }
        for s in &self.real {
            if s.len() != cfg.seq_len {
                return Err(Error::Invalid(format!("real sequence of {} frames, config says {}", s.len(), cfg.seq_len)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Terms {
    total: f64,
    fw: Option<f64>,
    bw: Option<f64>,
    last: Option<f64>,
    first: Option<f64>,
}

struct SampleGrad {
    grads: Vec<Option<Tensor<f32>>>,
    terms: Terms,
}

fn value(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

fn tensors(seq: &FrameSequence) -> Vec<Tensor<f32>> {
    seq.frames.iter().map(image_tensor).collect()
}

fn labels(seq: &FrameSequence) -> Vec<Option<OneHotMap<f32>>> {
    seq.labels.iter().map(|l| l.as_ref().map(Mask::one_hot)).collect()
}

/// Eq. 6 terms of one synthetic sequence; `center` is the real labeled frame.
fn synthetic_grad(model: &SegModel<f32>, seq: &FrameSequence, center: usize, w: &LossWeights) -> Result<SampleGrad> {
    let frames = tensors(seq);
    let labels = labels(seq);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let fw_out = model.run_sequence(&mut tape, &vars, &frames, Direction::Forward)?;
    let fw = loss_forward_seq(&mut tape, &fw_out, &labels)?;
    let bw_out = model.run_sequence(&mut tape, &vars, &frames, Direction::Backward)?;
    let bw = loss_backward_seq(&mut tape, &bw_out, &labels)?;
    let mut terms = Terms {
        fw: Some(value(&tape, fw)),
        bw: Some(value(&tape, bw)),
        ..Terms::default()
    };
    let total = if w.l3 > 0.0 {
        let alone = model.run_sequence(&mut tape, &vars, &frames[center..=center], Direction::Forward)?;
        let label = labels[center].as_ref().ok_or(Error::MissingLabel(center))?;
        let first = loss_first(&mut tape, &alone.frames[0], 1, label)?;
        terms.first = Some(value(&tape, first));
        total_loss_synthetic(&mut tape, fw, bw, first, w)?
    } else {
        tape.weighted_sum(&[(fw, w.l1), (bw, w.l2)])?
    };
    terms.total = value(&tape, total);
    let grads = tape.backward(total)?.param_grads(&tape, model.params.len());
    Ok(SampleGrad { grads, terms })
}

/// Eq. 7 terms of one real sequence labeled on its last frame.
fn real_grad(model: &SegModel<f32>, seq: &FrameSequence, w: &LossWeights) -> Result<SampleGrad> {
    let frames = tensors(seq);
    let n = frames.len();
    let label = seq.labels[n - 1].as_ref().ok_or(Error::MissingLabel(n - 1))?.one_hot::<f32>();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = model.run_sequence(&mut tape, &vars, &frames, Direction::Forward)?;
    let last = loss_last(&mut tape, &out, Some(&label))?;
    let mut terms = Terms {
        last: Some(value(&tape, last)),
        ..Terms::default()
    };
    let total = if w.l5 > 0.0 {
        let alone = model.run_sequence(&mut tape, &vars, &frames[n - 1..], Direction::Forward)?;
        let first = loss_first(&mut tape, &alone.frames[0], 1, &label)?;
        terms.first = Some(value(&tape, first));
        total_loss_real(&mut tape, last, first, w)?
    } else {
        tape.weighted_sum(&[(last, w.l4)])?
    };
    terms.total = value(&tape, total);
    let grads = tape.backward(total)?.param_grads(&tape, model.params.len());
    Ok(SampleGrad { grads, terms })
}

/// Per-sample generator independent of batching and thread count.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_EED0_F5A4_D1E5);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn sample_grad(cfg: &TrainConfig, set: &TrainSet, model: &SegModel<f32>, phase: Phase, epoch: usize, index: usize) -> Result<SampleGrad> {
    let mut rng = sample_rng(cfg.seed, epoch, index);
    let w = &cfg.loss_weights;
    match phase {
        Phase::Synthetic => {
            let (frame, mask) = &set.sources[index];
            let synth = synthesize_sequence(frame, mask, cfg.seq_len, &mut rng, &cfg.synthesis)?;
            let seq = if cfg.augment {
                augment_sequence(&synth.sequence, &mut rng, &cfg.augment_ranges)
            } else {
                synth.sequence
            };
            synthetic_grad(model, &seq, synth.center, w)
        }
        Phase::Real => {
            let src = &set.real[index];
            let seq = if cfg.augment {
                augment_sequence(src, &mut rng, &cfg.augment_ranges)
            } else {
                src.clone()
            };
            real_grad(model, &seq, w)
        }
    }
}

/// Mean over `parts`, or `None` when no part produced the term.
fn mean_of(parts: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in parts.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// One epoch of minibatch Adam; returns the epoch's mean loss terms.
pub fn train_epoch(ckpt: &mut Checkpoint, set: &TrainSet, epoch: usize) -> Result<EpochLog> {
    let cfg = ckpt.config.clone();
    let phase = cfg.phase(epoch);
    let lr = lr_schedule(epoch, &cfg);
    let pool = match phase {
        Phase::Synthetic => set.sources.len(),
        Phase::Real => set.real.len(),
    };
    let mut order: Vec<usize> = (0..pool).collect();
    let mut shuffle_rng = sample_rng(cfg.seed, epoch, usize::MAX >> 32);
    order.shuffle(&mut shuffle_rng);
    if let Some(cap) = cfg.max_samples_per_epoch {
        order.truncate(cap);
    }
    let mut all_terms = Vec::with_capacity(order.len());
    for batch in order.chunks(cfg.batch_size) {
        let model = &ckpt.model;
        let results = par::map(cfg.exec, batch, |&i| sample_grad(&cfg, set, model, phase, epoch, i));
        let mut sum: Vec<Option<Tensor<f32>>> = (0..model.params.len()).map(|_| None).collect();
        for r in results {
            let s = r?;
            for (acc, g) in sum.iter_mut().zip(s.grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
            all_terms.push(s.terms);
        }
        let scale = 1.0 / batch.len() as f32;
        for g in sum.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        if cfg.clip_gradients {
            clip_global_norm(&mut sum, cfg.clip_norm);
        }
        adam_step(&mut ckpt.model.params, &sum, &mut ckpt.optimizer, lr)?;
    }
    ckpt.epoch = epoch + 1;
    Ok(EpochLog {
        epoch,
        lr,
        loss_total: mean_of(all_terms.iter().map(|t| Some(t.total))).unwrap_or(0.0),
        loss_fw: mean_of(all_terms.iter().map(|t| t.fw)),
        loss_bw: mean_of(all_terms.iter().map(|t| t.bw)),
        loss_last: mean_of(all_terms.iter().map(|t| t.last)),
        loss_1st: mean_of(all_terms.iter().map(|t| t.first)),
    })
}

/// Evaluates every video (in parallel across videos) at `stride`.
pub fn evaluate(model: &SegModel<f32>, videos: &[Video], stride: usize, exec: Exec) -> Result<(EvalReport, Vec<VideoEval>)> {
    let evals: Vec<VideoEval> = par::map(exec, videos, |v| evaluate_video(model, &v.id, &v.frames, &v.labels, stride))
        .into_iter()
        .collect::<Result<_>>()?;
    let (w, h) = videos.first().and_then(|v| v.frames.first()).map_or((0, 0), |f| f.dimensions());
    let report = EvalReport::from_videos(evals.clone(), model_flops(model, w, h));
    Ok((report, evals))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub evals: Vec<EpochEval>,
}

pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const EVAL_LOG_FILE: &str = "eval_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs the configured curriculum. With `out`, writes a checkpoint per epoch,
/// the final checkpoint, the loss log and the held-out evaluation log.
pub fn train(cfg: &TrainConfig, set: &TrainSet, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    set.validate(cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in [LOSS_LOG_FILE, EVAL_LOG_FILE] {
            let p = dir.join(name);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let mut ckpt = Checkpoint::new(cfg.clone())?;
    let mut log = Vec::new();
    let mut evals = Vec::new();
    for epoch in 0..cfg.epochs {
        let entry = train_epoch(&mut ckpt, set, epoch)?;
        log::info!(
            "epoch {epoch} ({:?}) lr {:.2e} loss {:.4}",
            cfg.phase(epoch),
            entry.lr,
            entry.loss_total
        );
        let mut stop = false;
        if !set.holdout.is_empty() {
            let (report, _) = evaluate(&ckpt.model, &set.holdout, cfg.eval_stride, cfg.exec)?;
            let e = EpochEval {
                epoch,
                mean_dsc: report.overall.mean_dsc,
                mean_iou: report.overall.mean_iou,
            };
            log::info!("epoch {epoch} held-out mDSC {:.4} mIoU {:.4}", e.mean_dsc, e.mean_iou);
            stop = cfg.early_stop_dsc.is_some_and(|t| e.mean_dsc >= t);
            if let Some(dir) = out {
                append_line(&dir.join(EVAL_LOG_FILE), &e)?;
            }
            evals.push(e);
        }
        if let Some(dir) = out {
            append_line(&dir.join(LOSS_LOG_FILE), &entry)?;
            ckpt.save(&dir.join(epoch_checkpoint_name(epoch)))?;
        }
        log.push(entry);
        if stop {
            break;
        }
    }
    if let Some(dir) = out {
        ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        evals,
    })
}
