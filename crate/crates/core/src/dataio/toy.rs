//! Procedural toy-surgery videos: a shaded capsule-shaped instrument moving
//! over drifting reddish tissue, with injected hard frames.

use std::path::Path;

use image::Rgb;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, VideoEntry, MANIFEST_FILE, MANIFEST_VERSION};
use super::pnm::{save_pgm_mask, save_ppm};
use crate::error::{Error, Result};
use crate::frame::{Mask, RgbImage};
use crate::par::{self, Exec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub videos: usize,
    pub frames_per_video: usize,
    pub width: u32,
    pub height: u32,
    pub label_stride: usize,
    pub folds: u32,
    /// Allowed instrument pixel fraction per frame.
    pub instrument_fraction: (f64, f64),
    /// Fraction of frames with the instrument blended into the tissue.
    pub collapse_rate: f64,
    /// Largest instrument/background intensity gap on a collapse frame,
    /// relative to the same frame rendered normally.
    pub collapse_gap: f64,
    /// Per-frame probability of a specular streak.
    pub specular_rate: f64,
    pub specular_intensity: f64,
    /// Per-frame probability of a red-tint blotch.
    pub blotch_rate: f64,
    pub blotch_intensity: f64,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            videos: 8,
            frames_per_video: 300,
            width: 64,
            height: 64,
            label_stride: 3,
            folds: 4,
            instrument_fraction: (0.02, 0.20),
            collapse_rate: 0.1,
            collapse_gap: 0.25,
            specular_rate: 0.1,
            specular_intensity: 0.9,
            blotch_rate: 0.1,
            blotch_intensity: 0.5,
            noise: 4.0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.videos == 0 || self.frames_per_video == 0 || self.label_stride == 0 || self.folds == 0 {
            return bad("video count, frame count, label stride and folds must be positive".into());
        }
        if self.width < 16 || self.height < 16 {
            return bad(format!("frames must be at least 16×16, got {}×{}", self.width, self.height));
        }
        let (lo, hi) = self.instrument_fraction;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad(format!("instrument fraction bounds ({lo}, {hi}) must satisfy 0 < lo < hi < 1"));
        }
        for (name, v) in [
            ("collapse_rate", self.collapse_rate),
            ("collapse_gap", self.collapse_gap),
            ("specular_rate", self.specular_rate),
            ("specular_intensity", self.specular_intensity),
            ("blotch_rate", self.blotch_rate),
            ("blotch_intensity", self.blotch_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.collapse_rate > 0.5 {
            return bad("collapse_rate above 0.5 cannot keep collapse blocks apart".into());
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be nonnegative".into());
        }
        Ok(())
    }
}

/// One generated video kept in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyVideo {
    pub frames: Vec<RgbImage>,
    pub masks: Vec<Mask>,
    pub collapse: Vec<bool>,
}

/// Smooth value noise in `[-1, 1]` on a `w×h` grid.
fn value_noise(rng: &mut impl Rng, w: usize, h: usize, cell: usize) -> Vec<f64> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (smooth(gx - x0 as f64), smooth(gy - y0 as f64));
            let g = |a: usize, b: usize| grid[b * gw + a];
            let top = g(x0, y0) * (1.0 - fx) + g(x0 + 1, y0) * fx;
            let bot = g(x0, y0 + 1) * (1.0 - fx) + g(x0 + 1, y0 + 1) * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

struct Scene {
    w: u32,
    h: u32,
    margin: usize,
    tex_w: usize,
    texture: Vec<[f64; 3]>,
    drift: [(f64, f64, f64); 2],
    entry: (f64, f64),
    tip_center: (f64, f64),
    tip_amp: (f64, f64),
    tip_freq: (f64, f64),
    tip_phase: (f64, f64),
    radius: f64,
    color: [f64; 3],
}

impl Scene {
    fn new(rng: &mut impl Rng, w: u32, h: u32) -> Scene {
        let margin = 12;
        let tex_w = w as usize + 2 * margin;
        let tex_h = h as usize + 2 * margin;
        let coarse = value_noise(rng, tex_w, tex_h, 12);
        let fine = value_noise(rng, tex_w, tex_h, 4);
        let base = [rng.gen_range(150.0..175.0), rng.gen_range(55.0..75.0), rng.gen_range(55.0..70.0)];
        let texture = coarse
            .iter()
            .zip(&fine)
            .map(|(&c, &f)| {
                let v = 22.0 * c + 8.0 * f;
                [base[0] + v, base[1] + 0.6 * v, base[2] + 0.5 * v]
            })
            .collect();
        let side = rng.gen_range(0..4);
        let along = rng.gen_range(0.2..0.8);
        let (wf, hf) = (w as f64, h as f64);
        let entry = match side {
            0 => (along * wf, -6.0),
            1 => (wf + 5.0, along * hf),
            2 => (along * wf, hf + 5.0),
            _ => (-6.0, along * hf),
        };
        let mut drift = [(0.0, 0.0, 0.0); 2];
        for d in &mut drift {
            *d = (rng.gen_range(4.0..9.0), rng.gen_range(0.01..0.03), rng.gen_range(0.0..6.3));
        }
        Scene {
            w,
            h,
            margin,
            tex_w,
            texture,
            drift,
            entry,
            tip_center: (wf / 2.0 + rng.gen_range(-4.0..4.0), hf / 2.0 + rng.gen_range(-4.0..4.0)),
            tip_amp: (rng.gen_range(0.12..0.22) * wf, rng.gen_range(0.12..0.22) * hf),
            tip_freq: (rng.gen_range(0.02..0.05), rng.gen_range(0.02..0.05)),
            tip_phase: (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)),
            radius: rng.gen_range(0.055..0.08) * wf.min(hf),
            color: [rng.gen_range(170.0..195.0), rng.gen_range(175.0..200.0), rng.gen_range(185.0..215.0)],
        }
    }

    fn background(&self, t: usize) -> Vec<[f64; 3]> {
        let tf = t as f64;
        let ox = self.drift[0].0 * (self.drift[0].1 * tf + self.drift[0].2).sin();
        let oy = self.drift[1].0 * (self.drift[1].1 * tf + self.drift[1].2).sin();
        let m = self.margin as f64;
        let mut out = Vec::with_capacity((self.w * self.h) as usize);
        for y in 0..self.h {
            for x in 0..self.w {
                let sx = (x as f64 + m + ox).round().clamp(0.0, (self.tex_w - 1) as f64) as usize;
                let sy = (y as f64 + m + oy).round().max(0.0) as usize;
                let idx = (sy * self.tex_w + sx).min(self.texture.len() - 1);
                out.push(self.texture[idx]);
            }
        }
        out
    }

    fn tip(&self, t: usize) -> (f64, f64) {
        let tf = t as f64;
        (
            self.tip_center.0 + self.tip_amp.0 * (self.tip_freq.0 * tf + self.tip_phase.0).sin(),
            self.tip_center.1 + self.tip_amp.1 * (self.tip_freq.1 * tf + self.tip_phase.1).sin(),
        )
    }

    /// Signed offset across the shaft (in radii) for every pixel inside the capsule.
    fn capsule(&self, tip: (f64, f64)) -> Vec<Option<f64>> {
        let (ax, ay) = self.entry;
        let (dx, dy) = (tip.0 - ax, tip.1 - ay);
        let len2 = (dx * dx + dy * dy).max(1e-9);
        let mut out = Vec::with_capacity((self.w * self.h) as usize);
        for y in 0..self.h {
            for x in 0..self.w {
                let (px, py) = (x as f64 - ax, y as f64 - ay);
                let s = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
                let (cx, cy) = (px - s * dx, py - s * dy);
                let d = (cx * cx + cy * cy).sqrt();
                out.push((d <= self.radius).then(|| {
                    let cross = (dx * cy - dy * cx).signum();
                    cross * d / self.radius
                }));
            }
        }
        out
    }

    /// Capsule whose pixel fraction lies within `bounds`, found by moving the
    /// tip along the shaft.
    fn fitted_capsule(&self, t: usize, bounds: (f64, f64)) -> Vec<Option<f64>> {
        let n = (self.w * self.h) as f64;
        let (ax, ay) = self.entry;
        let (mut tx, mut ty) = self.tip(t);
        let center = (self.w as f64 / 2.0, self.h as f64 / 2.0);
        let mut cap = self.capsule((tx, ty));
        for _ in 0..64 {
            let frac = cap.iter().filter(|c| c.is_some()).count() as f64 / n;
            if frac > bounds.1 {
                tx = ax + 0.9 * (tx - ax);
                ty = ay + 0.9 * (ty - ay);
            } else if frac < bounds.0 {
                tx += 0.2 * (center.0 - tx) + 0.05 * (tx - ax);
                ty += 0.2 * (center.1 - ty) + 0.05 * (ty - ay);
            } else {
                break;
            }
            cap = self.capsule((tx, ty));
        }
        cap
    }
}

fn intensity(p: &[f64; 3]) -> f64 {
    (p[0] + p[1] + p[2]) / 3.0
}

/// `|mean(instrument) − mean(background)|` of a rendered frame.
pub fn intensity_gap(img: &RgbImage, mask: &Mask) -> f64 {
    let (mut si, mut ni, mut sb, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for (x, y, p) in img.enumerate_pixels() {
        let v = intensity(&p.0.map(f64::from));
        if mask.get(x, y) {
            si += v;
            ni += 1.0;
        } else {
            sb += v;
            nb += 1.0;
        }
    }
    if ni == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (si / ni - sb / nb).abs()
}

fn to_image(w: u32, h: u32, px: &[[f64; 3]]) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| Rgb(px[(y * w + x) as usize].map(|c| c.round().clamp(0.0, 255.0) as u8)))
}

/// Picks label-grid blocks for contrast collapse, none adjacent and none at
/// the first grid cell, covering at least `rate` of the frames.
fn collapse_blocks(rng: &mut impl Rng, frames: usize, stride: usize, rate: f64) -> Vec<bool> {
    let mut flags = vec![false; frames];
    if rate <= 0.0 {
        return flags;
    }
    let cells = frames.div_ceil(stride);
    let need = (rate * frames as f64).ceil() as usize;
    let mut order: Vec<usize> = (1..cells).collect();
    order.shuffle(rng);
    let mut taken = vec![false; cells];
    let mut covered = 0;
    for c in order {
        if covered >= need {
            break;
        }
        if taken[c - 1] || taken.get(c + 1).copied().unwrap_or(false) {
            continue;
        }
        taken[c] = true;
        // The block is centered on the labeled frame of cell `c`.
        let t = c * stride;
        let lo = t.saturating_sub(stride / 2);
        let hi = (t + stride - stride / 2).min(frames);
        for f in &mut flags[lo..hi] {
            *f = true;
        }
        covered += hi - lo;
    }
    flags
}

/// Renders video `index` of a dataset generated with `seed`.
pub fn render_video(cfg: &ToyConfig, seed: u64, index: usize) -> Result<ToyVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let scene = Scene::new(&mut rng, cfg.width, cfg.height);
    let collapse = collapse_blocks(&mut rng, cfg.frames_per_video, cfg.label_stride, cfg.collapse_rate);
    let (w, h) = (cfg.width, cfg.height);
    let n = (w * h) as usize;
    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    let mut masks = Vec::with_capacity(cfg.frames_per_video);
    for (t, &collapsed) in collapse.iter().enumerate() {
        let bg = scene.background(t);
        let cap = scene.fitted_capsule(t, cfg.instrument_fraction);
        let mask = Mask::new(w, h, cap.iter().map(|c| c.is_some()).collect())?;
        let tool: Vec<[f64; 3]> = cap
            .iter()
            .zip(&bg)
            .map(|(c, b)| match c {
                Some(s) => {
                    let shade = 0.7 + 0.3 * (1.0 - s * s).max(0.0).sqrt() + 0.15 * (-((s - 0.35) * 4.0).powi(2)).exp();
                    scene.color.map(|v| v * shade)
                }
                None => *b,
            })
            .collect();
        let mut px = tool.clone();
        if collapsed {
            let normal_gap = intensity_gap(&to_image(w, h, &tool), &mask);
            let mut g = cfg.collapse_gap * 0.8;
            loop {
                for i in 0..n {
                    if mask.data()[i] {
                        px[i] = [0, 1, 2].map(|c| bg[i][c] + g * (tool[i][c] - bg[i][c]));
                    }
                }
                let gap = intensity_gap(&to_image(w, h, &px), &mask);
                if gap <= cfg.collapse_gap * normal_gap || g < 1e-3 {
                    break;
                }
                g *= 0.5;
            }
        }
        if rng.gen_bool(cfg.specular_rate) {
            let (x0, y0) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let len = rng.gen_range(6.0..16.0);
            let level = 255.0 * cfg.specular_intensity;
            for k in 0..(len * 2.0) as usize {
                let s = k as f64 / 2.0;
                let (x, y) = ((x0 + s * ang.cos()).round(), (y0 + s * ang.sin()).round());
                if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
                    let i = (y as u32 * w + x as u32) as usize;
                    px[i] = px[i].map(|v| v.max(level));
                }
            }
        }
        if rng.gen_bool(cfg.blotch_rate) {
            let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let (rx, ry) = (rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0));
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                    if u * u + v * v <= 1.0 {
                        let i = (y * w + x) as usize;
                        let a = cfg.blotch_intensity;
                        let red = [170.0, 20.0, 25.0];
                        px[i] = [0, 1, 2].map(|c| (1.0 - a) * px[i][c] + a * red[c]);
                    }
                }
            }
        }
        if cfg.noise > 0.0 {
            for p in &mut px {
                let e = rng.gen_range(-cfg.noise..=cfg.noise);
                *p = p.map(|v| v + e);
            }
        }
        frames.push(to_image(w, h, &px));
        masks.push(mask);
    }
    Ok(ToyVideo { frames, masks, collapse })
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:02}")
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub videos: usize,
    pub frames: usize,
    pub collapse_frames: usize,
}

/// Writes frames, dense masks and the manifest under `out`.
pub fn gen_toy_dataset(cfg: &ToyConfig, seed: u64, out: &Path, exec: Exec) -> Result<ToyReport> {
    cfg.validate()?;
    let written: Vec<Result<(VideoEntry, usize)>> = par::map_indexed(exec, cfg.videos, |v| {
        let video = render_video(cfg, seed, v)?;
        let id = video_id(v);
        let mut frames = Vec::with_capacity(video.frames.len());
        for (t, (img, mask)) in video.frames.iter().zip(&video.masks).enumerate() {
            let rel = format!("{id}/frame_{t:04}.ppm");
            save_ppm(&out.join(&rel), img)?;
            save_pgm_mask(&out.join(format!("{id}/frame_{t:04}.pgm")), mask)?;
            frames.push(rel);
        }
        let entry = VideoEntry {
            labeled_indices: (0..frames.len()).step_by(cfg.label_stride).collect(),
            frames,
            fold: v as u32 % cfg.folds,
            id,
        };
        Ok((entry, video.collapse.iter().filter(|&&c| c).count()))
    });
    let mut videos = Vec::with_capacity(cfg.videos);
    let mut collapse_frames = 0;
    for r in written {
        let (e, c) = r?;
        videos.push(e);
        collapse_frames += c;
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        frame_size: [cfg.width, cfg.height],
        videos,
    };
    manifest.validate()?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(ToyReport {
        videos: cfg.videos,
        frames: cfg.videos * cfg.frames_per_video,
        collapse_frames,
    })
}
