//! Multi-frame feature aggregation: a temporal aggregation block (TAB) that
//! gates in the previous frame's instrument features, followed by a spatial
//! aggregation block (SAB) that mixes all positions through an attention
//! matrix and refines the result with a residual head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{init_identity_noise, init_kernel, resize_nearest, Padding, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    /// Each row of the attention matrix is softmax-normalized.
    #[default]
    RowSoftmax,
    /// The raw similarity products are used as-is.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MffaConfig {
    pub channels: usize,
    pub attention: AttentionNorm,
}

impl Default for MffaConfig {
    fn default() -> Self {
        MffaConfig {
            channels: 32,
            attention: AttentionNorm::RowSoftmax,
        }
    }
}

impl MffaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Invalid(format!(
                "MFFA channel count must be positive and even, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// State carried from step `i−1` to step `i`: the previous aggregated
/// features and the previous predicted binary mask at frame resolution.
#[derive(Clone, Debug)]
pub struct MffaState<T: Real = f32> {
    pub h_prev: Var,
    /// `Hf×Wf×1`, values in {0, 1}.
    pub mask_prev: Tensor<T>,
}

/// `(conv kernel, bias)` parameter ids.
#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ConvIds {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ConvIds {
            kernel: store.insert(format!("{name}.w"), init_kernel(k, k, cin, cout, rng))?,
            bias: store.insert(format!("{name}.b"), Tensor::zeros([cout]))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, stride: usize) -> Result<Var> {
        tape.conv2d(x, vars[self.kernel], Some(vars[self.bias]), stride, Padding::Same)
    }
}

/// Parameter layout of one MFFA module.
#[derive(Clone, Debug)]
pub struct Mffa {
    pub cfg: MffaConfig,
    pub tab_agg: ConvIds,
    pub tab_gate: ConvIds,
    pub sab_query: ConvIds,
    pub sab_key: ConvIds,
    /// `w ∈ R^{C×C}` of the attention aggregation.
    pub sab_weight: ParamId,
    /// `b ∈ R^C` of the attention aggregation.
    pub sab_bias: ParamId,
    pub sab_coarse: ConvIds,
    pub sab_refine1: ConvIds,
    pub sab_refine2: ConvIds,
}

/// Intermediate values of one SAB evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SabOutput {
    /// `h_i`, the block output.
    pub h: Var,
    /// Coarse per-pixel class distribution `H×W×2`.
    pub coarse: Var,
    /// `h'_i` before the residual refinement.
    pub refined: Var,
    /// `(HW)×(HW)` attention matrix after normalization.
    pub attention: Var,
}

impl Mffa {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: MffaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Mffa {
            cfg,
            tab_agg: ConvIds::register(store, &format!("{prefix}.tab.agg"), 1, 2 * c, c, rng)?,
            tab_gate: ConvIds::register(store, &format!("{prefix}.tab.gate"), 1, 2 * c, 1, rng)?,
            sab_query: ConvIds::register(store, &format!("{prefix}.sab.query"), 1, c, c / 2, rng)?,
            sab_key: ConvIds::register(store, &format!("{prefix}.sab.key"), 1, c, c / 2, rng)?,
            sab_weight: store.insert(format!("{prefix}.sab.w"), init_identity_noise(c, 0.01, rng))?,
            sab_bias: store.insert(format!("{prefix}.sab.b"), Tensor::zeros([c]))?,
            sab_coarse: ConvIds::register(store, &format!("{prefix}.sab.coarse"), 1, c, 2, rng)?,
            sab_refine1: ConvIds::register(store, &format!("{prefix}.sab.refine1"), 3, c + 2, c, rng)?,
            sab_refine2: ConvIds::register(store, &format!("{prefix}.sab.refine2"), 3, c, c, rng)?,
        })
    }

    /// Temporal aggregation: `ReLU(f + σ(g(cat)) ⊙ a(cat))` with
    /// `cat = [h_prev ⊙ mask_prev, f]`.
    pub fn tab_forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], f: Var, state: &MffaState<T>) -> Result<Var> {
        let (h, w, c) = tape.value(f).hwc()?;
        let (ph, pw, pc) = tape.value(state.h_prev).hwc()?;
        if pc != c {
            return Err(Error::Dimension {
                op: "tab_forward",
                axis: "channels",
                expected: c,
                got: pc,
            });
        }
        if (ph, pw) != (h, w) {
            return Err(Error::Shape {
                op: "tab_forward",
                lhs: vec![h, w, c],
                rhs: vec![ph, pw, pc],
            });
        }
        let (_, _, mc) = state.mask_prev.hwc()?;
        if mc != 1 || state.mask_prev.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Invalid("previous mask must be a single-channel binary map".into()));
        }
        let mask = tape.input(resize_nearest(&state.mask_prev, h, w)?);
        let prev_inst = tape.mul(state.h_prev, mask)?;
        let cat = tape.concat(prev_inst, f)?;
        let agg = self.tab_agg.apply(tape, vars, cat, 1)?;
        let gate_logit = self.tab_gate.apply(tape, vars, cat, 1)?;
        let gate = tape.sigmoid(gate_logit);
        let gated = tape.mul(agg, gate)?;
        let sum = tape.add(f, gated)?;
        Ok(tape.relu(sum))
    }

    /// Spatial aggregation: `h' = A·reshape(f)·w + b`, then
    /// `h = h' + Φ(h', softmax(conv(h')))`.
    pub fn sab_forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], f: Var) -> Result<SabOutput> {
        let (h, w, c) = tape.value(f).hwc()?;
        if c != self.cfg.channels {
            return Err(Error::Dimension {
                op: "sab_forward",
                axis: "channels",
                expected: self.cfg.channels,
                got: c,
            });
        }
        let n = h * w;
        let q = self.sab_query.apply(tape, vars, f, 1)?;
        let q = tape.relu(q);
        let k = self.sab_key.apply(tape, vars, f, 1)?;
        let k = tape.relu(k);
        let q = tape.reshape(q, [n, c / 2])?;
        let k = tape.reshape(k, [n, c / 2])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let attention = match self.cfg.attention {
            AttentionNorm::RowSoftmax => tape.softmax(scores)?,
            AttentionNorm::Raw => scores,
        };
        let values = tape.reshape(f, [n, c])?;
        let mixed = tape.matmul(attention, values)?;
        let projected = tape.matmul(mixed, vars[self.sab_weight])?;
        let biased = tape.add_bias(projected, vars[self.sab_bias])?;
        let refined = tape.reshape(biased, [h, w, c])?;

        let coarse_logits = self.sab_coarse.apply(tape, vars, refined, 1)?;
        let coarse = tape.softmax_channel(coarse_logits)?;
        let joint = tape.concat(refined, coarse)?;
        let r1 = self.sab_refine1.apply(tape, vars, joint, 1)?;
        let r1 = tape.relu(r1);
        let r2 = self.sab_refine2.apply(tape, vars, r1, 1)?;
        let r2 = tape.relu(r2);
        let out = tape.add(refined, r2)?;
        Ok(SabOutput {
            h: out,
            coarse,
            refined,
            attention,
        })
    }

    /// Without state only the spatial block runs (first frame of a traversal).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        f: Var,
        state: Option<&MffaState<T>>,
    ) -> Result<SabOutput> {
        let input = match state {
            Some(s) => self.tab_forward(tape, vars, f, s)?,
            None => f,
        };
        self.sab_forward(tape, vars, input)
    }
}
