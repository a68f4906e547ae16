//! Sequence augmentation: one geometric map shared by all frames of a
//! sequence, and independent color jitter per frame.

use image::Rgb;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::frame::{FrameSequence, Mask, RgbImage};

/// Crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometric {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Degrees about the frame center.
    pub rotation: f64,
    pub scale: f64,
    /// `None` keeps the whole frame.
    pub crop: Option<Crop>,
}

impl Geometric {
    pub const IDENTITY: Geometric = Geometric {
        flip_h: false,
        flip_v: false,
        rotation: 0.0,
        scale: 1.0,
        crop: None,
    };
}

/// Relative deltas; all zero leaves a frame untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    /// Degrees.
    pub hue: f64,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub geometric: Geometric,
    /// One entry per frame.
    pub photometric: Vec<Photometric>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub flip_prob: f64,
    pub rotation: f64,
    pub scale: (f64, f64),
    /// Smallest crop side as a fraction of the frame side.
    pub min_crop: f64,
    pub hue: f64,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            flip_prob: 0.5,
            rotation: 15.0,
            scale: (0.9, 1.1),
            min_crop: 0.85,
            hue: 5.0,
            brightness: 0.1,
            saturation: 0.1,
            contrast: 0.1,
        }
    }
}

fn sym(rng: &mut impl Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.gen_range(-r..=r)
    } else {
        0.0
    }
}

impl AugmentParams {
    pub fn identity(frames: usize) -> Self {
        AugmentParams {
            geometric: Geometric::IDENTITY,
            photometric: vec![Photometric::default(); frames],
        }
    }

    pub fn sample(rng: &mut impl Rng, frames: usize, width: u32, height: u32, r: &AugmentRanges) -> Self {
        let flip_h = rng.gen_bool(r.flip_prob);
        let flip_v = rng.gen_bool(r.flip_prob);
        let rotation = sym(rng, r.rotation);
        let scale = if r.scale.0 < r.scale.1 { rng.gen_range(r.scale.0..=r.scale.1) } else { r.scale.0 };
        let side = if r.min_crop < 1.0 { rng.gen_range(r.min_crop..=1.0) } else { 1.0 };
        let (cw, ch) = (side * width as f64, side * height as f64);
        let crop = Crop {
            x: rng.gen_range(0.0..=width as f64 - cw),
            y: rng.gen_range(0.0..=height as f64 - ch),
            w: cw,
            h: ch,
        };
        let photometric = (0..frames)
            .map(|_| Photometric {
                hue: sym(rng, r.hue),
                brightness: sym(rng, r.brightness),
                saturation: sym(rng, r.saturation),
                contrast: sym(rng, r.contrast),
            })
            .collect();
        AugmentParams {
            geometric: Geometric {
                flip_h,
                flip_v,
                rotation,
                scale,
                crop: Some(crop),
            },
            photometric,
        }
    }
}

/// Maps an output pixel to source coordinates.
struct InverseMap {
    w: f64,
    h: f64,
    g: Geometric,
    crop: Crop,
    cos: f64,
    sin: f64,
}

impl InverseMap {
    fn new(g: Geometric, width: u32, height: u32) -> Self {
        let (w, h) = (width as f64, height as f64);
        // Clamp the window to the frame.
        let crop = g.crop.map_or(Crop { x: 0.0, y: 0.0, w, h }, |c| {
            let cw = c.w.clamp(1.0, w);
            let ch = c.h.clamp(1.0, h);
            Crop {
                x: c.x.clamp(0.0, w - cw),
                y: c.y.clamp(0.0, h - ch),
                w: cw,
                h: ch,
            }
        });
        let (sin, cos) = g.rotation.to_radians().sin_cos();
        InverseMap { w, h, g, crop, cos, sin }
    }

    fn source(&self, u: u32, v: u32) -> (f64, f64) {
        // Output pixel → point in the cropped window.
        let mut x = self.crop.x + (u as f64 + 0.5) * self.crop.w / self.w - 0.5;
        let mut y = self.crop.y + (v as f64 + 0.5) * self.crop.h / self.h - 0.5;
        // Undo scale and rotation about the center.
        let (cx, cy) = ((self.w - 1.0) / 2.0, (self.h - 1.0) / 2.0);
        let (dx, dy) = ((x - cx) / self.g.scale, (y - cy) / self.g.scale);
        x = self.cos * dx + self.sin * dy + cx;
        y = -self.sin * dx + self.cos * dy + cy;
        if self.g.flip_h {
            x = self.w - 1.0 - x;
        }
        if self.g.flip_v {
            y = self.h - 1.0 - y;
        }
        (x, y)
    }
}

fn warp_image(img: &RgbImage, map: &InverseMap) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |u, v| {
        let (x, y) = map.source(u, v);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as u32, y.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut px = [0u8; 3];
        for c in 0..3 {
            let p = |a: u32, b: u32| img.get_pixel(a, b).0[c] as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            px[c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

fn warp_mask(m: &Mask, map: &InverseMap) -> Mask {
    let (w, h) = m.dimensions();
    Mask::from_fn(w, h, |u, v| {
        let (x, y) = map.source(u, v);
        let (xi, yi) = (x.round(), y.round());
        xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 && m.get(xi as u32, yi as u32)
    })
}

/// Rotation about the gray axis by `deg` degrees.
fn hue_matrix(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let r = (1.0f64 / 3.0).sqrt() * s;
    [[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]]
}

/// Applies color jitter to one frame.
pub fn jitter(img: &RgbImage, p: &Photometric) -> RgbImage {
    if *p == Photometric::default() {
        return img.clone();
    }
    let hue = hue_matrix(p.hue);
    let n = img.pixels().len() as f64;
    let luma = |px: [f64; 3]| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
    let mean = img.pixels().map(|q| luma(q.0.map(f64::from))).sum::<f64>() / n;
    let mut out = img.clone();
    for q in out.pixels_mut() {
        let mut v = q.0.map(f64::from);
        if p.hue != 0.0 {
            v = [0, 1, 2].map(|i| (0..3).map(|j| hue[i][j] * v[j]).sum());
        }
        if p.saturation != 0.0 {
            let g = luma(v);
            v = v.map(|c| g + (1.0 + p.saturation) * (c - g));
        }
        if p.contrast != 0.0 {
            v = v.map(|c| mean + (1.0 + p.contrast) * (c - mean));
        }
        if p.brightness != 0.0 {
            v = v.map(|c| c * (1.0 + p.brightness));
        }
        q.0 = v.map(|c| c.round().clamp(0.0, 255.0) as u8);
    }
    out
}

/// Applies `params` to every frame and label of `seq`.
pub fn apply_augment(seq: &FrameSequence, params: &AugmentParams) -> FrameSequence {
    let Some(first) = seq.frames.first() else {
        return seq.clone();
    };
    let (w, h) = first.dimensions();
    let identity = params.geometric == Geometric::IDENTITY;
    let map = InverseMap::new(params.geometric, w, h);
    let frames = seq
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let g = if identity { f.clone() } else { warp_image(f, &map) };
            match params.photometric.get(i) {
                Some(p) => jitter(&g, p),
                None => g,
            }
        })
        .collect();
    let labels = seq
        .labels
        .iter()
        .map(|l| l.as_ref().map(|m| if identity { m.clone() } else { warp_mask(m, &map) }))
        .collect();
    FrameSequence {
        frames,
        labels,
        indices: seq.indices.clone(),
    }
}

/// Samples parameters for `seq` and applies them.
pub fn augment_sequence(seq: &FrameSequence, rng: &mut impl Rng, ranges: &AugmentRanges) -> FrameSequence {
    let Some(first) = seq.frames.first() else {
        return seq.clone();
    };
    let (w, h) = first.dimensions();
    let params = AugmentParams::sample(rng, seq.len(), w, h, ranges);
    apply_augment(seq, &params)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::metrics::dsc;

    fn seq(n: usize) -> FrameSequence {
        let frames = (0..n)
            .map(|i| RgbImage::from_fn(24, 20, |x, y| Rgb([(x * 10) as u8, (y * 12) as u8, (i * 30) as u8])))
            .collect();
        let labels = (0..n).map(|_| Some(Mask::from_fn(24, 20, |x, y| x > 5 && x < 14 && y > 3 && y < 9))).collect();
        FrameSequence {
            frames,
            labels,
            indices: (0..n).collect(),
        }
    }

    #[test]
    fn identity_leaves_sequence_unchanged() {
        let s = seq(3);
        assert_eq!(apply_augment(&s, &AugmentParams::identity(3)), s);
        let full = AugmentParams {
            geometric: Geometric {
                crop: Some(Crop { x: 0.0, y: 0.0, w: 24.0, h: 20.0 }),
                ..Geometric::IDENTITY
            },
            photometric: vec![Photometric::default(); 3],
        };
        assert_eq!(apply_augment(&s, &full), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = seq(2);
        let p = AugmentParams {
            geometric: Geometric {
                flip_h: true,
                ..Geometric::IDENTITY
            },
            photometric: vec![Photometric::default(); 2],
        };
        let once = apply_augment(&s, &p);
        assert_ne!(once, s);
        assert_eq!(apply_augment(&once, &p), s);
    }

    #[test]
    fn geometry_shared_across_frames() {
        let s = seq(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let mut p = AugmentParams::sample(&mut rng, 4, 24, 20, &AugmentRanges::default());
            p.photometric = vec![Photometric::default(); 4];
            let out = apply_augment(&s, &p);
            let m0 = out.labels[0].as_ref().unwrap();
            for l in &out.labels {
                assert_eq!(dsc(m0, l.as_ref().unwrap()).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn photometric_is_per_frame_and_images_only() {
        let s = seq(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = AugmentParams::sample(&mut rng, 3, 24, 20, &AugmentRanges::default());
        p.geometric = Geometric::IDENTITY;
        assert_ne!(p.photometric[0], p.photometric[1]);
        let out = apply_augment(&s, &p);
        assert_eq!(out.labels, s.labels);
        assert_ne!(out.frames[0], s.frames[0]);
    }

    #[test]
    fn oversized_crop_is_clamped() {
        let s = seq(1);
        let p = AugmentParams {
            geometric: Geometric {
                crop: Some(Crop { x: -10.0, y: 50.0, w: 100.0, h: 100.0 }),
                ..Geometric::IDENTITY
            },
            photometric: vec![Photometric::default()],
        };
        assert_eq!(apply_augment(&s, &p), s);
    }

    #[test]
    fn zero_hue_matrix_is_identity() {
        let m = hue_matrix(0.0);
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        let gray = RgbImage::from_pixel(2, 2, Rgb([90, 90, 90]));
        let p = Photometric { hue: 5.0, ..Default::default() };
        assert_eq!(jitter(&gray, &p), gray);
    }
}
