//! Toy encoder–decoder with MFFA between them, run recurrently over frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mffa::{ConvIds, Mffa, MffaConfig, MffaState};
use crate::real::Real;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Full,
    #[default]
    Trimmed,
}

impl EncoderVariant {
    pub fn blocks(self) -> usize {
        match self {
            EncoderVariant::Full => 4,
            EncoderVariant::Trimmed => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub base_channels: usize,
    /// Frame-to-feature downscale factor.
    pub output_stride: usize,
    pub out_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: EncoderVariant::Trimmed,
            base_channels: 16,
            output_stride: 4,
            out_channels: MffaConfig::default().channels,
        }
    }
}

/// One 3×3 block of the encoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl EncoderConfig {
    /// Blocks double the channel count from `base_channels`; they downsample
    /// by 2 until `output_stride` is reached and keep resolution afterwards.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut reached = 1;
        let mut cin = 3;
        (0..self.variant.blocks())
            .map(|i| {
                let cout = self.base_channels << i;
                let stride = if reached < self.output_stride { 2 } else { 1 };
                reached *= stride;
                let spec = BlockSpec { cin, cout, stride };
                cin = cout;
                spec
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.output_stride.is_power_of_two() {
            return Err(Error::Invalid(format!("output stride {} is not a power of two", self.output_stride)));
        }
        let reachable = 1usize << self.variant.blocks();
        if self.output_stride > reachable {
            return Err(Error::Invalid(format!(
                "{:?} encoder reaches at most stride {reachable}, asked for {}",
                self.variant, self.output_stride
            )));
        }
        if self.base_channels == 0 || self.out_channels == 0 {
            return Err(Error::Invalid("encoder channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Which parts of the aggregation module are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MffaMode {
    /// Temporal and spatial blocks.
    #[default]
    Full,
    /// Spatial block only; frames are segmented independently.
    SabOnly,
    /// No aggregation module: the decoder reads encoder features directly.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mffa: MffaConfig,
    pub mode: MffaMode,
    pub decoder_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            mffa: MffaConfig::default(),
            mode: MffaMode::Full,
            decoder_channels: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mffa.validate()?;
        if self.encoder.out_channels != self.mffa.channels {
            return Err(Error::Invalid(format!(
                "encoder output channels ({}) must equal the MFFA channel count ({})",
                self.encoder.out_channels, self.mffa.channels
            )));
        }
        if self.decoder_channels == 0 {
            return Err(Error::Invalid("decoder channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Softmax output of one frame, tagged with its provenance index `j`:
/// `j ∈ [1, N]` means the aggregated features of frame `j` (1-based) were
/// used; `0` or `N+1` means no temporal information.
#[derive(Clone, Debug)]
pub struct FrameOutput<T: Real = f32> {
    /// 0-based position in the sequence.
    pub frame: usize,
    pub provenance: usize,
    /// `Hf×Wf×2` class probabilities (channel 0 = instrument).
    pub probs: Var,
    /// Aggregated features `h_i` handed to the next step.
    pub features: Var,
    /// Predicted binary mask `Hf×Wf×1`.
    pub mask: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct SequenceOutput<T: Real = f32> {
    pub direction: Direction,
    /// Indexed by frame position, regardless of traversal order.
    pub frames: Vec<FrameOutput<T>>,
}

impl<T: Real> SequenceOutput<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Plain-data recurrent state, used when each step runs on its own tape.
#[derive(Clone, Debug)]
pub struct CarriedState<T: Real = f32> {
    pub features: Tensor<T>,
    pub mask: Tensor<T>,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<(BlockSpec, ConvIds)>,
    projection: ConvIds,
    mffa: Option<Mffa>,
    decoder_conv: ConvIds,
    decoder_head: ConvIds,
}

/// Parameters and architecture of the segmentation network.
#[derive(Clone, Debug)]
pub struct SegModel<T: Real = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Maps 8-bit RGB to roughly `[-1, 1]`.
pub fn frame_tensor<T: Real>(rgb: &[u8], h: usize, w: usize) -> Result<Tensor<T>> {
    Tensor::new([h, w, 3], rgb.iter().map(|&v| T::lit(v as f64 / 127.5 - 1.0)).collect())
}

/// Per-pixel argmax of a 2-channel probability map; ties go to background.
pub fn predict_mask<T: Real>(probs: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, k) = probs.hwc()?;
    if k != 2 {
        return Err(Error::Dimension {
            op: "predict_mask",
            axis: "channels",
            expected: 2,
            got: k,
        });
    }
    let data = probs
        .data()
        .chunks_exact(2)
        .map(|p| if p[0] > p[1] { T::one() } else { T::zero() })
        .collect();
    Tensor::new([h, w, 1], data)
}

/// One-hot target `Hf×Wf×2` for a binary mask (channel 0 = instrument).
pub fn one_hot<T: Real>(mask: &[bool], h: usize, w: usize) -> Result<Tensor<T>> {
    if mask.len() != h * w {
        return Err(Error::Dimension {
            op: "one_hot",
            axis: "pixels",
            expected: h * w,
            got: mask.len(),
        });
    }
    let data = mask
        .iter()
        .flat_map(|&m| if m { [T::one(), T::zero()] } else { [T::zero(), T::one()] })
        .collect();
    Tensor::new([h, w, 2], data)
}

impl<T: Real> SegModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut encoder = Vec::new();
        for (i, spec) in cfg.encoder.blocks().into_iter().enumerate() {
            let ids = ConvIds::register(&mut params, &format!("enc.block{i}"), 3, spec.cin, spec.cout, &mut rng)?;
            encoder.push((spec, ids));
        }
        let last = encoder.last().map_or(3, |b| b.0.cout);
        let c = cfg.encoder.out_channels;
        let projection = ConvIds::register(&mut params, "enc.proj", 1, last, c, &mut rng)?;
        let mffa = match cfg.mode {
            MffaMode::Off => None,
            _ => Some(Mffa::register(&mut params, "mffa", cfg.mffa, &mut rng)?),
        };
        let decoder_conv = ConvIds::register(&mut params, "dec.conv", 3, c, cfg.decoder_channels, &mut rng)?;
        let decoder_head = ConvIds::register(&mut params, "dec.head", 1, cfg.decoder_channels, 2, &mut rng)?;
        Ok(SegModel {
            cfg,
            params,
            layout: Layout {
                encoder,
                projection,
                mffa,
                decoder_conv,
                decoder_head,
            },
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> SegModel<U> {
        SegModel {
            cfg: self.cfg,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn mffa(&self) -> Option<&Mffa> {
        self.layout.mffa.as_ref()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// `Hf×Wf×3` frame to `H×W×C` features.
    pub fn encode(&self, tape: &mut Tape<T>, vars: &[Var], frame: Var) -> Result<Var> {
        let (h, w, _) = tape.value(frame).hwc()?;
        let s = self.cfg.encoder.output_stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Invalid(format!("frame extents {h}×{w} not divisible by output stride {s}")));
        }
        let mut x = frame;
        for (spec, ids) in &self.layout.encoder {
            let y = ids.apply(tape, vars, x, spec.stride)?;
            x = tape.relu(y);
        }
        let p = self.layout.projection.apply(tape, vars, x, 1)?;
        Ok(tape.relu(p))
    }

    /// Features to `out_h×out_w×2` class probabilities.
    pub fn decode(&self, tape: &mut Tape<T>, vars: &[Var], features: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let d = self.layout.decoder_conv.apply(tape, vars, features, 1)?;
        let d = tape.relu(d);
        let up = tape.resize_bilinear(d, out_h, out_w)?;
        let logits = self.layout.decoder_head.apply(tape, vars, up, 1)?;
        tape.softmax_channel(logits)
    }

    /// One recurrent step: returns `(h_i, s̃_i)`.
    pub fn step(&self, tape: &mut Tape<T>, vars: &[Var], frame: Var, state: Option<&MffaState<T>>) -> Result<(Var, Var)> {
        let (fh, fw, _) = tape.value(frame).hwc()?;
        let f = self.encode(tape, vars, frame)?;
        let h = match (&self.layout.mffa, self.cfg.mode) {
            (Some(m), MffaMode::Full) => m.forward(tape, vars, f, state)?.h,
            (Some(m), MffaMode::SabOnly) => m.forward(tape, vars, f, None)?.h,
            _ => f,
        };
        let probs = self.decode(tape, vars, h, fh, fw)?;
        Ok((h, probs))
    }

    /// Runs the recurrence over `frames` in the given direction on one tape,
    /// so gradients flow through every step.
    pub fn run_sequence(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        frames: &[Tensor<T>],
        direction: Direction,
    ) -> Result<SequenceOutput<T>> {
        self.run_inner(tape, vars, frames, direction, None)
    }

    /// Like [`run_sequence`](Self::run_sequence), but the mask handed from
    /// frame `i` to its successor is `masks[i]` instead of the prediction.
    /// The argmax mask is piecewise constant in the parameters, so holding it
    /// fixed leaves the gradient unchanged and makes finite differences
    /// well defined.
    pub fn run_sequence_frozen(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        frames: &[Tensor<T>],
        direction: Direction,
        masks: &[Tensor<T>],
    ) -> Result<SequenceOutput<T>> {
        if masks.len() != frames.len() {
            return Err(Error::Dimension {
                op: "run_sequence_frozen",
                axis: "frames",
                expected: frames.len(),
                got: masks.len(),
            });
        }
        self.run_inner(tape, vars, frames, direction, Some(masks))
    }

    fn run_inner(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        frames: &[Tensor<T>],
        direction: Direction,
        frozen: Option<&[Tensor<T>]>,
    ) -> Result<SequenceOutput<T>> {
        let Some(first) = frames.first() else {
            return Err(Error::Invalid("run_sequence needs at least one frame".into()));
        };
        let n = frames.len();
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != first.shape() {
                return Err(Error::Invalid(format!(
                    "frame {i} has extents {:?}, expected {:?}",
                    f.shape(),
                    first.shape()
                )));
            }
        }
        let order: Vec<usize> = match direction {
            Direction::Forward => (0..n).collect(),
            Direction::Backward => (0..n).rev().collect(),
        };
        let mut slots: Vec<Option<FrameOutput<T>>> = (0..n).map(|_| None).collect();
        let mut state: Option<MffaState<T>> = None;
        for (step, &i) in order.iter().enumerate() {
            let x = tape.input(frames[i].clone());
            let (h, probs) = self.step(tape, vars, x, state.as_ref())?;
            let mask = predict_mask(tape.value(probs))?;
            // 1-based frame numbers: forward reads frame i−1, backward frame i+1.
            let provenance = match (direction, step) {
                (Direction::Forward, 0) => 0,
                (Direction::Backward, 0) => n + 1,
                (Direction::Forward, _) => i,
                (Direction::Backward, _) => i + 2,
            };
            state = Some(MffaState {
                h_prev: h,
                mask_prev: frozen.map_or_else(|| mask.clone(), |m| m[i].clone()),
            });
            slots[i] = Some(FrameOutput {
                frame: i,
                provenance,
                probs,
                features: h,
                mask,
            });
        }
        Ok(SequenceOutput {
            direction,
            frames: slots.into_iter().map(|s| s.expect("every frame visited")).collect(),
        })
    }

    /// Inference step on a fresh tape with plain-data state in and out.
    pub fn infer_step(&self, frame: &Tensor<T>, state: Option<&CarriedState<T>>) -> Result<(Tensor<T>, CarriedState<T>)> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let x = tape.input(frame.clone());
        let st = state.map(|s| MffaState {
            h_prev: tape.input(s.features.clone()),
            mask_prev: s.mask.clone(),
        });
        let (h, probs) = self.step(&mut tape, &vars, x, st.as_ref())?;
        let probs = tape.value(probs).clone();
        let mask = predict_mask(&probs)?;
        Ok((
            probs,
            CarriedState {
                features: tape.value(h).clone(),
                mask,
            },
        ))
    }
}

/// Multiply–accumulate counts of one frame, by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub encoder: u64,
    pub mffa: u64,
    pub decoder: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.encoder + self.mffa + self.decoder
    }
}

/// MACs of a `k×k` convolution producing `oh×ow×cout` from `cin` channels.
pub fn conv_macs(oh: usize, ow: usize, k: usize, cin: usize, cout: usize) -> u64 {
    (oh * ow * k * k * cin * cout) as u64
}

/// Encoder multiply–accumulate count for one `h×w` frame.
pub fn count_flops(cfg: &EncoderConfig, h: usize, w: usize) -> u64 {
    let (mut fh, mut fw) = (h, w);
    let mut macs = 0;
    let mut last = 3;
    for b in cfg.blocks() {
        fh = fh.div_ceil(b.stride);
        fw = fw.div_ceil(b.stride);
        macs += conv_macs(fh, fw, 3, b.cin, b.cout);
        last = b.cout;
    }
    macs + conv_macs(fh, fw, 1, last, cfg.out_channels)
}

/// Per-stage MACs of the whole network on an `h×w` frame. The temporal
/// block is counted when `with_state` is set.
pub fn count_model_flops(cfg: &ModelConfig, h: usize, w: usize, with_state: bool) -> FlopCount {
    let s = cfg.encoder.output_stride;
    let (fh, fw) = (h / s, w / s);
    let c = cfg.mffa.channels;
    let n = fh * fw;
    let sab = conv_macs(fh, fw, 1, c, c / 2) * 2
        + (n * n * (c / 2)) as u64
        + (n * n * c) as u64
        + (n * c * c) as u64
        + conv_macs(fh, fw, 1, c, 2)
        + conv_macs(fh, fw, 3, c + 2, c)
        + conv_macs(fh, fw, 3, c, c);
    let tab = conv_macs(fh, fw, 1, 2 * c, c) + conv_macs(fh, fw, 1, 2 * c, 1) + (n * c) as u64;
    let mffa = match cfg.mode {
        MffaMode::Off => 0,
        MffaMode::SabOnly => sab,
        MffaMode::Full => sab + if with_state { tab } else { 0 },
    };
    let d = cfg.decoder_channels;
    FlopCount {
        encoder: count_flops(&cfg.encoder, h, w),
        mffa,
        decoder: conv_macs(fh, fw, 3, c, d) + (h * w * d * 4) as u64 + conv_macs(h, w, 1, d, 2),
    }
}
