//! Real training sequences ending at each labeled frame.

use serde::{Deserialize, Serialize};

use super::manifest::Video;
use crate::frame::FrameSequence;

/// Spacing of consecutive frames within a real sequence.
pub const DEFAULT_SAMPLING_STRIDE: usize = 3;

/// Frame indices `t−s(n−1), …, t−s, t`, or `None` if they reach before 0.
pub fn sequence_indices(t: usize, n: usize, stride: usize) -> Option<Vec<usize>> {
    let span = stride.checked_mul(n.checked_sub(1)?)?;
    let start = t.checked_sub(span)?;
    Some((0..n).map(|k| start + k * stride).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub emitted: usize,
    /// `(video id, labeled frame)` pairs without enough history.
    pub skipped: Vec<(String, usize)>,
}

/// One sequence per labeled frame of every video; only the last frame of each
/// sequence carries its label.
pub fn extract_real_sequences(videos: &[Video], n: usize, stride: usize) -> (Vec<FrameSequence>, ExtractionReport) {
    let mut out = Vec::new();
    let mut report = ExtractionReport::default();
    for v in videos {
        for t in v.labeled_indices() {
            let Some(idx) = sequence_indices(t, n, stride) else {
                report.skipped.push((v.id.clone(), t));
                continue;
            };
            let mut labels = vec![None; n];
            labels[n - 1] = v.labels[t].clone();
            out.push(FrameSequence {
                frames: idx.iter().map(|&i| v.frames[i].clone()).collect(),
                labels,
                indices: idx,
            });
        }
    }
    report.emitted = out.len();
    (out, report)
}

#[cfg(test)]
mod tests {
    use image::Rgb;

    use super::*;
    use crate::frame::{Mask, RgbImage};

    #[test]
    fn index_arithmetic() {
        assert_eq!(sequence_indices(9, 4, 3), Some(vec![0, 3, 6, 9]));
        assert_eq!(sequence_indices(5, 4, 3), None);
        assert_eq!(sequence_indices(5, 1, 3), Some(vec![5]));
        assert_eq!(sequence_indices(5, 0, 3), None);
    }

    #[test]
    fn one_label_on_the_last_frame() {
        let frames: Vec<RgbImage> = (0..20).map(|i| RgbImage::from_pixel(2, 2, Rgb([i as u8, 0, 0]))).collect();
        let mut labels = vec![None; 20];
        for t in [3, 9, 12, 18] {
            labels[t] = Some(Mask::from_fn(2, 2, |x, _| x == 0));
        }
        let v = Video {
            id: "a".into(),
            fold: 0,
            frames,
            labels,
        };
        let (seqs, rep) = extract_real_sequences(&[v], 4, 3);
        assert_eq!(rep.emitted, 3);
        assert_eq!(rep.skipped, vec![("a".to_string(), 3)]);
        for s in &seqs {
            assert_eq!(s.labeled_count(), 1);
            assert!(s.labels[3].is_some());
            for (f, &i) in s.frames.iter().zip(&s.indices) {
                assert_eq!(f.get_pixel(0, 0).0[0] as usize, i);
            }
        }
        assert_eq!(seqs[0].indices, vec![0, 3, 6, 9]);
    }
}
