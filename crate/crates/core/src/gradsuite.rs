//! Finite-difference checks over every differentiable tape op and over the
//! whole model, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    loss_backward_seq, loss_first, loss_forward_seq, loss_last, total_loss_real, total_loss_synthetic, LossWeights,
    OneHotMap,
};
use crate::mffa::MffaConfig;
use crate::model::{one_hot, Direction, EncoderConfig, EncoderVariant, MffaMode, ModelConfig, SegModel, SequenceOutput};
use crate::tensor::gradcheck::{check_params, finite_diff_check, DEFAULT_EPS, TOLERANCE};
use crate::tensor::{Padding, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub shape: String,
    pub max_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// `sum(y ⊙ p)` with fixed random `p`.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let p = rand_t(tape.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
    let p = tape.input(p);
    let prod = tape.mul(y, p)?;
    Ok(tape.sum(prod))
}

struct Suite {
    out: Vec<GradCheck>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, shape: &[usize], x: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let max_error = finite_diff_check(f, x, DEFAULT_EPS)?;
        self.out.push(GradCheck {
            name: name.to_string(),
            shape: format!("{shape:?}"),
            max_error,
        });
        Ok(())
    }
}

/// Every differentiable op, each on three random shapes.
pub fn op_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite { out: Vec::new() };
    let conv_cases = [
        ([5usize, 5, 2], [3usize, 3, 2, 3], 1usize, Padding::Same),
        ([7, 6, 3], [3, 3, 3, 2], 2, Padding::Same),
        ([6, 5, 2], [1, 1, 2, 4], 1, Padding::Valid),
    ];
    for (xs, ks, stride, pad) in conv_cases {
        let x = rand_t(&xs, &mut rng);
        let k = rand_t(&ks, &mut rng);
        let b = rand_t(&[ks[3]], &mut rng);
        let conv = |t: &mut Tape<f64>, x: Var, k: Var, b: Var| -> Result<Var> {
            let y = t.conv2d(x, k, Some(b), stride, pad)?;
            project(t, y, 1)
        };
        s.check("conv2d/input", &xs, &x, |t, v| {
            let (kk, bb) = (t.input(k.clone()), t.input(b.clone()));
            conv(t, v, kk, bb)
        })?;
        s.check("conv2d/kernel", &ks, &k, |t, v| {
            let (xx, bb) = (t.input(x.clone()), t.input(b.clone()));
            conv(t, xx, v, bb)
        })?;
        s.check("conv2d/bias", &[ks[3]], &b, |t, v| {
            let (xx, kk) = (t.input(x.clone()), t.input(k.clone()));
            conv(t, xx, kk, v)
        })?;
    }
    for (m, k, n) in [(2usize, 3usize, 4usize), (5, 2, 3), (4, 4, 1)] {
        let a = rand_t(&[m, k], &mut rng);
        let b = rand_t(&[k, n], &mut rng);
        s.check("matmul/lhs", &[m, k], &a, |t, v| {
            let bb = t.input(b.clone());
            let y = t.matmul(v, bb)?;
            project(t, y, 2)
        })?;
        s.check("matmul/rhs", &[k, n], &b, |t, v| {
            let aa = t.input(a.clone());
            let y = t.matmul(aa, v)?;
            project(t, y, 2)
        })?;
        s.check("transpose", &[m, k], &a, |t, v| {
            let y = t.transpose(v)?;
            project(t, y, 3)
        })?;
        s.check("softmax", &[m, k], &a, |t, v| {
            let y = t.softmax(v)?;
            project(t, y, 4)
        })?;
    }
    for shape in [[3usize, 4, 2], [5, 1, 3], [2, 2, 6]] {
        let x = rand_t(&shape, &mut rng);
        let other = rand_t(&shape, &mut rng);
        let gate = rand_t(&[shape[0], shape[1], 1], &mut rng);
        let bias = rand_t(&[shape[2]], &mut rng);
        s.check("relu", &shape, &x, |t, v| {
            let y = t.relu(v);
            project(t, y, 5)
        })?;
        s.check("sigmoid", &shape, &x, |t, v| {
            let y = t.sigmoid(v);
            project(t, y, 5)
        })?;
        s.check("add", &shape, &x, |t, v| {
            let o = t.input(other.clone());
            let y = t.add(v, o)?;
            let z = t.mul(y, y)?;
            project(t, z, 5)
        })?;
        s.check("mul", &shape, &x, |t, v| {
            let o = t.input(other.clone());
            let y = t.mul(v, o)?;
            project(t, y, 5)
        })?;
        s.check("mul/broadcast", &[shape[0], shape[1], 1], &gate, |t, g| {
            let xx = t.input(x.clone());
            let y = t.mul(xx, g)?;
            project(t, y, 5)
        })?;
        s.check("add_bias", &[shape[2]], &bias, |t, b| {
            let xx = t.input(x.clone());
            let y = t.add_bias(xx, b)?;
            let z = t.mul(y, y)?;
            project(t, z, 5)
        })?;
        s.check("softmax_channel", &shape, &x, |t, v| {
            let y = t.softmax_channel(v)?;
            project(t, y, 6)
        })?;
        s.check("concat", &shape, &x, |t, v| {
            let o = t.input(other.clone());
            let y = t.concat(o, v)?;
            let z = t.mul(y, y)?;
            project(t, z, 7)
        })?;
        s.check("reshape", &shape, &x, |t, v| {
            let y = t.reshape(v, [shape[0] * shape[1], shape[2]])?;
            let z = t.mul(y, y)?;
            project(t, z, 8)
        })?;
        s.check("sum", &shape, &x, |t, v| {
            let y = t.mul(v, v)?;
            Ok(t.sum(y))
        })?;
    }
    for (src, dst) in [((3usize, 3usize), (6usize, 6usize)), ((4, 5), (9, 7)), ((6, 6), (3, 2))] {
        let x = rand_t(&[src.0, src.1, 2], &mut rng);
        s.check("resize_bilinear", &[src.0, src.1, 2], &x, |t, v| {
            let y = t.resize_bilinear(v, dst.0, dst.1)?;
            let z = t.mul(y, y)?;
            project(t, z, 9)
        })?;
    }
    for (h, w) in [(2usize, 3usize), (3, 3), (1, 5)] {
        let logits = rand_t(&[h, w, 2], &mut rng);
        let target = Tensor::from_fn([h, w, 2], |k| if (k / 2 + k) % 2 == 0 { 1.0 } else { 0.0 });
        s.check("cross_entropy", &[h, w, 2], &logits, |t, v| {
            let p = t.softmax_channel(v)?;
            t.cross_entropy(p, &target)
        })?;
        let x = rand_t(&[h, w, 1], &mut rng);
        s.check("weighted_sum", &[h, w, 1], &x, |t, v| {
            let a = t.mul(v, v)?;
            let a = t.sum(a);
            let b = t.sum(v);
            t.weighted_sum(&[(a, 0.3), (b, -1.7)])
        })?;
    }
    Ok(s.out)
}

/// A small model for gradient checks.
pub fn check_model_config(variant: EncoderVariant, mode: MffaMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            variant,
            base_channels: 3,
            output_stride: 4,
            out_channels: 4,
        },
        mffa: MffaConfig {
            channels: 4,
            ..MffaConfig::default()
        },
        mode,
        decoder_channels: 3,
    }
}

fn random_sequence(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> (Vec<Tensor<f64>>, Vec<Option<OneHotMap<f64>>>) {
    let frames = (0..n).map(|_| rand_t(&[h, w, 3], rng)).collect();
    let labels = (0..n)
        .map(|_| {
            let m: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.3)).collect();
            Some(OneHotMap::new(one_hot(&m, h, w).expect("sized mask")).expect("one-hot"))
        })
        .collect();
    (frames, labels)
}

fn masks_of(out: &SequenceOutput<f64>) -> Vec<Tensor<f64>> {
    out.frames.iter().map(|f| f.mask.clone()).collect()
}

/// Encoder → MFFA → decoder → cross-entropy over a 2-frame forward run, plus
/// the synthetic and real objectives, on three frame sizes. Parameters are
/// jittered off their initialization and the masks passed between frames are
/// held at their unperturbed values. With `max_coords`,
/// each parameter is probed at that many random coordinates.
pub fn model_checks(seed: u64, max_coords: Option<usize>, configs: &[ModelConfig]) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let w = LossWeights::default();
    for (ci, cfg) in configs.iter().enumerate() {
        let mut model = SegModel::<f64>::new(*cfg, seed + ci as u64)?;
        // Zero-initialized biases put some ReLU inputs exactly on the kink.
        for (_, p) in model.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let tag = format!("{:?}/{:?}", cfg.encoder.variant, cfg.mode).to_lowercase();
        for (h, w_) in [(8usize, 8usize), (12, 8), (8, 16)] {
            let (frames, labels) = random_sequence(&mut rng, 3, h, w_);
            let (fw_masks, bw_masks) = {
                let mut tape = Tape::inference();
                let vars = model.bind(&mut tape);
                let fw = model.run_sequence(&mut tape, &vars, &frames, Direction::Forward)?;
                let bw = model.run_sequence(&mut tape, &vars, &frames, Direction::Backward)?;
                (masks_of(&fw), masks_of(&bw))
            };
            let shape = format!("[{h}, {w_}, 3]");
            let mut record = |name: &str, err: f64| {
                out.push(GradCheck {
                    name: format!("model/{tag}/{name}"),
                    shape: shape.clone(),
                    max_error: err,
                })
            };
            let ce = check_params(
                &model.params,
                |tape, vars| {
                    let fw = model.run_sequence_frozen(tape, vars, &frames[..2], Direction::Forward, &fw_masks[..2])?;
                    loss_forward_seq(tape, &fw, &labels[..2])
                },
                DEFAULT_EPS,
                max_coords,
                &mut rng,
            )?;
            record("cross_entropy", ce.max_error());
            let synth = check_params(
                &model.params,
                |tape, vars| {
                    let fw = model.run_sequence_frozen(tape, vars, &frames, Direction::Forward, &fw_masks)?;
                    let bw = model.run_sequence_frozen(tape, vars, &frames, Direction::Backward, &bw_masks)?;
                    let alone = model.run_sequence(tape, vars, &frames[1..2], Direction::Forward)?;
                    let lf = loss_forward_seq(tape, &fw, &labels)?;
                    let lb = loss_backward_seq(tape, &bw, &labels)?;
                    let l1 = loss_first(tape, &alone.frames[0], 1, labels[1].as_ref().expect("dense"))?;
                    total_loss_synthetic(tape, lf, lb, l1, &w)
                },
                DEFAULT_EPS,
                max_coords,
                &mut rng,
            )?;
            record("synthetic_objective", synth.max_error());
            let real = check_params(
                &model.params,
                |tape, vars| {
                    let fw = model.run_sequence_frozen(tape, vars, &frames, Direction::Forward, &fw_masks)?;
                    let alone = model.run_sequence(tape, vars, &frames[2..], Direction::Forward)?;
                    let last = loss_last(tape, &fw, labels[2].as_ref())?;
                    let l1 = loss_first(tape, &alone.frames[0], 1, labels[2].as_ref().expect("dense"))?;
                    total_loss_real(tape, last, l1, &w)
                },
                DEFAULT_EPS,
                max_coords,
                &mut rng,
            )?;
            record("real_objective", real.max_error());
        }
    }
    Ok(out)
}

/// Model variants covered by the default run and by the exhaustive one.
pub fn model_variants(full: bool) -> Vec<ModelConfig> {
    let mut v = vec![check_model_config(EncoderVariant::Trimmed, MffaMode::Full)];
    if full {
        v.push(check_model_config(EncoderVariant::Full, MffaMode::Full));
        v.push(check_model_config(EncoderVariant::Trimmed, MffaMode::SabOnly));
        v.push(check_model_config(EncoderVariant::Trimmed, MffaMode::Off));
    }
    v
}

/// Default: every op plus the trimmed model with sampled coordinates.
/// `full`: every model variant at every coordinate.
pub fn run(seed: u64, full: bool) -> Result<Vec<GradCheck>> {
    let mut out = op_checks(seed)?;
    let coords = if full { None } else { Some(8) };
    out.extend(model_checks(seed, coords, &model_variants(full))?);
    Ok(out)
}
