//! Overlap metrics, per-video evaluation with recurrent propagation, and
//! inference timing.

use std::time::Instant;

use image::Rgb;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{image_tensor, Mask, RgbImage};
use crate::model::{count_model_flops, CarriedState, FlopCount, SegModel};
use crate::real::Real;

fn pack(m: &Mask) -> Vec<u64> {
    let mut words = vec![0u64; m.data().len().div_ceil(64)];
    for (i, _) in m.data().iter().enumerate().filter(|(_, &v)| v) {
        words[i / 64] |= 1 << (i % 64);
    }
    words
}

/// `(|X∩Y|, |X|, |Y|)`.
fn overlap(x: &Mask, y: &Mask) -> Result<(u64, u64, u64)> {
    if x.dimensions() != y.dimensions() {
        return Err(Error::Invalid(format!(
            "mask extents differ: {:?} vs {:?}",
            x.dimensions(),
            y.dimensions()
        )));
    }
    let (a, b) = (pack(x), pack(y));
    let pop = |w: &[u64]| w.iter().map(|v| v.count_ones() as u64).sum::<u64>();
    let inter = a.iter().zip(&b).map(|(p, q)| (p & q).count_ones() as u64).sum();
    Ok((inter, pop(&a), pop(&b)))
}

/// `2|X∩Y| / (|X|+|Y|)`, 1 when both masks are empty.
pub fn dsc(x: &Mask, y: &Mask) -> Result<f64> {
    let (i, a, b) = overlap(x, y)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 })
}

/// `|X∩Y| / |X∪Y|`, 1 when both masks are empty.
pub fn iou(x: &Mask, y: &Mask) -> Result<f64> {
    let (i, a, b) = overlap(x, y)?;
    let union = a + b - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub mean_dsc: f64,
    pub std_dsc: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
}

/// Mean and population standard deviation.
fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = v.clone().sum::<f64>() / n as f64;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl Summary {
    pub fn of(scores: &[FrameScore]) -> Summary {
        let (mean_dsc, std_dsc) = mean_std(scores.iter().map(|s| s.dsc));
        let (mean_iou, std_iou) = mean_std(scores.iter().map(|s| s.iou));
        Summary {
            frames: scores.len(),
            mean_dsc,
            std_dsc,
            mean_iou,
            std_iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub video: String,
    pub frame: usize,
    pub dsc: f64,
    pub iou: f64,
    /// Wall-clock time of the recurrent step, milliseconds.
    pub time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub id: String,
    #[serde(flatten)]
    pub summary: Summary,
    /// Labels that fell between propagated frames.
    pub skipped_labels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub videos: Vec<VideoSummary>,
    pub overall: Summary,
    pub skipped_labels: usize,
    pub median_time_ms: f64,
    /// Per-frame multiply–accumulate counts with the temporal block active.
    pub flops: FlopCount,
}

impl EvalReport {
    pub fn from_videos(videos: Vec<VideoEval>, flops: FlopCount) -> EvalReport {
        let frames: Vec<FrameScore> = videos.iter().flat_map(|v| v.scores.iter().cloned()).collect();
        let mut times: Vec<f64> = frames.iter().map(|f| f.time_ms).collect();
        EvalReport {
            overall: Summary::of(&frames),
            skipped_labels: videos.iter().map(|v| v.skipped_labels).sum(),
            videos: videos
                .into_iter()
                .map(|v| VideoSummary {
                    summary: Summary::of(&v.scores),
                    id: v.id,
                    skipped_labels: v.skipped_labels,
                })
                .collect(),
            median_time_ms: median(&mut times).unwrap_or(0.0),
            frames,
            flops,
        }
    }
}

/// Scores and predictions of one video.
#[derive(Clone, Debug)]
pub struct VideoEval {
    pub id: String,
    pub scores: Vec<FrameScore>,
    pub skipped_labels: usize,
    /// `(frame index, predicted mask)` for every propagated frame.
    pub predictions: Vec<(usize, Mask)>,
}

/// Runs the recurrence over frames `0, stride, 2·stride, …` carrying state
/// across the whole video and scores the propagated frames that have truth.
pub fn evaluate_video<T: Real>(
    model: &SegModel<T>,
    id: &str,
    frames: &[RgbImage],
    truth: &[Option<Mask>],
    stride: usize,
) -> Result<VideoEval> {
    if stride == 0 {
        return Err(Error::Invalid("evaluation stride must be positive".into()));
    }
    if truth.len() != frames.len() {
        return Err(Error::Dimension {
            op: "evaluate_video",
            axis: "frames",
            expected: frames.len(),
            got: truth.len(),
        });
    }
    let mut state: Option<CarriedState<T>> = None;
    let mut scores = Vec::new();
    let mut predictions = Vec::new();
    for i in (0..frames.len()).step_by(stride) {
        let x = image_tensor(&frames[i]);
        let start = Instant::now();
        let (_, next) = model.infer_step(&x, state.as_ref())?;
        let time_ms = start.elapsed().as_secs_f64() * 1e3;
        let pred = Mask::from_tensor(&next.mask)?;
        if let Some(y) = &truth[i] {
            scores.push(FrameScore {
                video: id.to_string(),
                frame: i,
                dsc: dsc(&pred, y)?,
                iou: iou(&pred, y)?,
                time_ms,
            });
        }
        predictions.push((i, pred));
        state = Some(next);
    }
    let skipped_labels = truth.iter().enumerate().filter(|(i, t)| t.is_some() && i % stride != 0).count();
    Ok(VideoEval {
        id: id.to_string(),
        scores,
        skipped_labels,
        predictions,
    })
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub const WARMUP_RUNS: usize = 3;

/// Median wall-clock seconds of one recurrent step on `frame`, with the state
/// of each step fed to the next. The first [`WARMUP_RUNS`] steps are not timed.
pub fn time_inference<T: Real>(model: &SegModel<T>, frame: &RgbImage, repeats: usize) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::Invalid("timing needs at least one repeat".into()));
    }
    let x = image_tensor::<T>(frame);
    let mut state = None;
    let mut times = Vec::with_capacity(repeats);
    for i in 0..WARMUP_RUNS + repeats {
        let start = Instant::now();
        let (_, next) = model.infer_step(&x, state.as_ref())?;
        let dt = start.elapsed().as_secs_f64();
        if i >= WARMUP_RUNS {
            times.push(dt);
        }
        state = Some(next);
    }
    Ok(median(&mut times).expect("repeats > 0"))
}

/// Frame MACs of `model` at `w×h` with the temporal block active.
pub fn model_flops<T: Real>(model: &SegModel<T>, w: u32, h: u32) -> FlopCount {
    count_model_flops(&model.cfg, h as usize, w as usize, true)
}

/// Predicted region tinted green; truth boundary drawn in red.
pub fn overlay(frame: &RgbImage, pred: &Mask, truth: Option<&Mask>) -> RgbImage {
    let mut out = frame.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if pred.get(x, y) {
            let [r, g, b] = p.0;
            *p = Rgb([r / 2, (g / 2).saturating_add(127), b / 2]);
        }
    }
    if let Some(t) = truth {
        let (w, h) = t.dimensions();
        for y in 0..h {
            for x in 0..w {
                let edge = t.get(x, y)
                    && (x == 0
                        || y == 0
                        || x + 1 == w
                        || y + 1 == h
                        || !t.get(x - 1, y)
                        || !t.get(x + 1, y)
                        || !t.get(x, y - 1)
                        || !t.get(x, y + 1));
                if edge {
                    out.put_pixel(x, y, Rgb([255, 0, 0]));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn naive(x: &Mask, y: &Mask) -> (f64, f64) {
        let (mut i, mut a, mut b, mut u) = (0, 0, 0, 0);
        for (&p, &q) in x.data().iter().zip(y.data()) {
            i += (p && q) as usize;
            a += p as usize;
            b += q as usize;
            u += (p || q) as usize;
        }
        let d = if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 };
        let j = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        (d, j)
    }

    fn random_mask(rng: &mut impl Rng, w: u32, h: u32) -> Mask {
        let p: f64 = rng.gen();
        Mask::new(w, h, (0..w * h).map(|_| rng.gen_bool(p)).collect()).unwrap()
    }

    #[test]
    fn bitset_matches_naive_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (x, y) = (random_mask(&mut rng, 16, 16), random_mask(&mut rng, 16, 16));
            let (d, j) = naive(&x, &y);
            assert_eq!(dsc(&x, &y).unwrap(), d);
            assert_eq!(iou(&x, &y).unwrap(), j);
        }
    }

    #[test]
    fn closed_cases() {
        let a = Mask::from_fn(20, 10, |x, _| x < 10);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = Mask::from_fn(20, 10, |x, _| x >= 10);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        // 100 and 100 pixels overlapping in 50.
        let c = Mask::from_fn(20, 10, |x, _| (5..15).contains(&x));
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);
        assert!((iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = Mask::empty(20, 10);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(dsc(&e, &Mask::empty(10, 20)).is_err());
    }

    proptest! {
        #[test]
        fn metric_identities(seed in any::<u64>(), w in 1u32..40, h in 1u32..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (random_mask(&mut rng, w, h), random_mask(&mut rng, w, h));
            let (d, j) = (dsc(&x, &y).unwrap(), iou(&x, &y).unwrap());
            prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
            prop_assert!(0.0 <= j && j <= d && d <= 1.0);
            prop_assert_eq!(d, dsc(&y, &x).unwrap());
            prop_assert_eq!(j, iou(&y, &x).unwrap());
        }
    }

    #[test]
    fn summary_statistics() {
        let s = |d: f64| FrameScore {
            video: "v".into(),
            frame: 0,
            dsc: d,
            iou: d / (2.0 - d),
            time_ms: 1.0,
        };
        let sum = Summary::of(&[s(0.2), s(0.4), s(0.9)]);
        assert!((sum.mean_dsc - 0.5).abs() < 1e-15);
        let var = (0.09 + 0.01 + 0.16) / 3.0f64;
        assert!((sum.std_dsc - var.sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[]).frames, 0);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    fn toy_video(n: usize) -> Vec<RgbImage> {
        (0..n).map(|i| RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 9 + i as u32) as u8, (y * 13) as u8, 40]))).collect()
    }

    fn small_model() -> SegModel<f32> {
        let mut cfg = ModelConfig::default();
        cfg.mffa.channels = 8;
        cfg.encoder.out_channels = 8;
        cfg.encoder.base_channels = 4;
        cfg.decoder_channels = 4;
        SegModel::new(cfg, 0).unwrap()
    }

    #[test]
    fn evaluation_respects_stride() {
        let model = small_model();
        let frames = toy_video(10);
        let mut truth: Vec<Option<Mask>> = vec![None; 10];
        for i in [0, 3, 6, 9] {
            truth[i] = Some(Mask::empty(16, 16));
        }
        let ev = evaluate_video(&model, "a", &frames, &truth, 3).unwrap();
        assert_eq!(ev.scores.iter().map(|s| s.frame).collect::<Vec<_>>(), vec![0, 3, 6, 9]);
        assert_eq!(ev.skipped_labels, 0);
        assert_eq!(ev.predictions.len(), 4);

        truth[4] = Some(Mask::empty(16, 16));
        let ev = evaluate_video(&model, "a", &frames, &truth, 3).unwrap();
        assert_eq!(ev.scores.len(), 4);
        assert_eq!(ev.skipped_labels, 1);
    }

    #[test]
    fn oracle_truth_scores_one() {
        let model = small_model();
        let frames = toy_video(7);
        let ev = evaluate_video(&model, "a", &frames, &vec![None; 7], 3).unwrap();
        // Score the model against its own predictions.
        let mut truth = vec![None; 7];
        for (i, m) in &ev.predictions {
            truth[*i] = Some(m.clone());
        }
        let ev = evaluate_video(&model, "a", &frames, &truth, 3).unwrap();
        let report = EvalReport::from_videos(vec![ev], FlopCount::default());
        assert_eq!(report.overall.mean_dsc, 1.0);
        assert_eq!(report.overall.frames, 3);
        let mean: f64 = report.frames.iter().map(|f| f.dsc).sum::<f64>() / report.frames.len() as f64;
        assert!((report.overall.mean_dsc - mean).abs() < 1e-9);
    }

    #[test]
    fn timing_returns_positive_median() {
        let model = small_model();
        let t = time_inference(&model, &toy_video(1)[0], 1).unwrap();
        assert!(t > 0.0);
        assert!(time_inference(&model, &toy_video(1)[0], 0).is_err());
    }

    #[test]
    fn overlay_marks_prediction_and_contour() {
        let frame = RgbImage::from_pixel(8, 8, Rgb([100, 100, 100]));
        let pred = Mask::from_fn(8, 8, |x, _| x < 2);
        let truth = Mask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
        let o = overlay(&frame, &pred, Some(&truth));
        assert_eq!(o.get_pixel(0, 0).0, [50, 177, 50]);
        assert_eq!(o.get_pixel(2, 2).0, [255, 0, 0]);
        assert_eq!(o.get_pixel(3, 3).0, [100, 100, 100]);
    }
}
