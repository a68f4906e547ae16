//! Sequence objectives built from the per-frame cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Direction, FrameOutput, SequenceOutput};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Weights of the synthetic (`l1..l3`) and real (`l4, l5`) objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0 / 3.0,
            l2: 1.0 / 3.0,
            l3: 1.0 / 3.0,
            l4: 0.5,
            l5: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("l1", self.l1), ("l2", self.l2), ("l3", self.l3), ("l4", self.l4), ("l5", self.l5)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Invalid(format!("loss weight {name} must be a finite nonnegative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// `H×W×2` one-hot label map; channel 0 is the instrument.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMap<T: Real = f32>(Tensor<T>);

impl<T: Real> OneHotMap<T> {
    pub fn from_mask(mask: &[bool], h: usize, w: usize) -> Result<Self> {
        crate::model::one_hot(mask, h, w).map(OneHotMap)
    }

    /// Validates that every pixel has exactly one active channel.
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let (_, _, k) = t.hwc()?;
        if k != 2 {
            return Err(Error::Dimension {
                op: "one_hot",
                axis: "channels",
                expected: 2,
                got: k,
            });
        }
        let ok = t.data().chunks_exact(2).all(|p| {
            (p[0] == T::one() && p[1] == T::zero()) || (p[0] == T::zero() && p[1] == T::one())
        });
        if !ok {
            return Err(Error::Invalid("label map is not one-hot".into()));
        }
        Ok(OneHotMap(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

/// Mean cross-entropy of a softmax map against a one-hot label.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, label: &OneHotMap<T>, probs: Var) -> Result<Var> {
    tape.cross_entropy(probs, label.tensor())
}

fn dense_seq_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &SequenceOutput<T>,
    labels: &[Option<OneHotMap<T>>],
    want: Direction,
) -> Result<Var> {
    if out.direction != want {
        return Err(Error::Invalid(format!(
            "expected a {want:?} run, got a {:?} run",
            out.direction
        )));
    }
    if labels.len() != out.len() {
        return Err(Error::Dimension {
            op: "sequence loss",
            axis: "frames",
            expected: out.len(),
            got: labels.len(),
        });
    }
    let w = 1.0 / out.len() as f64;
    let mut terms = Vec::with_capacity(out.len());
    for (f, label) in out.frames.iter().zip(labels) {
        let label = label.as_ref().ok_or(Error::MissingLabel(f.frame))?;
        terms.push((cross_entropy(tape, label, f.probs)?, w));
    }
    tape.weighted_sum(&terms)
}

/// Average cross-entropy of a forward run over densely labeled frames.
pub fn loss_forward_seq<T: Real>(tape: &mut Tape<T>, out: &SequenceOutput<T>, labels: &[Option<OneHotMap<T>>]) -> Result<Var> {
    dense_seq_loss(tape, out, labels, Direction::Forward)
}

/// Average cross-entropy of a backward run over densely labeled frames.
pub fn loss_backward_seq<T: Real>(tape: &mut Tape<T>, out: &SequenceOutput<T>, labels: &[Option<OneHotMap<T>>]) -> Result<Var> {
    dense_seq_loss(tape, out, labels, Direction::Backward)
}

/// Cross-entropy of the last frame of a forward run.
pub fn loss_last<T: Real>(tape: &mut Tape<T>, out: &SequenceOutput<T>, label_last: Option<&OneHotMap<T>>) -> Result<Var> {
    if out.direction != Direction::Forward {
        return Err(Error::Invalid("the last-frame loss needs a forward run".into()));
    }
    let last = out.frames.last().ok_or_else(|| Error::Invalid("empty sequence".into()))?;
    let label = label_last.ok_or(Error::MissingLabel(last.frame))?;
    cross_entropy(tape, label, last.probs)
}

/// Cross-entropy of a frame segmented without temporal state. `seq_len` is
/// the length of the run that produced `out`.
pub fn loss_first<T: Real>(tape: &mut Tape<T>, out: &FrameOutput<T>, seq_len: usize, label: &OneHotMap<T>) -> Result<Var> {
    if out.provenance != 0 && out.provenance != seq_len + 1 {
        return Err(Error::Provenance {
            frame: out.frame,
            provenance: out.provenance,
        });
    }
    cross_entropy(tape, label, out.probs)
}

/// `l1·fw + l2·bw + l3·first`.
pub fn total_loss_synthetic<T: Real>(tape: &mut Tape<T>, fw: Var, bw: Var, first: Var, w: &LossWeights) -> Result<Var> {
    tape.weighted_sum(&[(fw, w.l1), (bw, w.l2), (first, w.l3)])
}

/// `l4·last + l5·first`.
pub fn total_loss_real<T: Real>(tape: &mut Tape<T>, last: Var, first: Var, w: &LossWeights) -> Result<Var> {
    tape.weighted_sum(&[(last, w.l4), (first, w.l5)])
}
