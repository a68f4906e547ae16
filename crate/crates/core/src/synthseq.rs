//! Densely labeled synthetic sequences from a single labeled frame.
//!
//! The instrument is cut out, the hole is filled by diffusion, and the patch
//! is pasted back with per-frame moving parameters. The source frame sits at
//! the center position `C = ⌊(N+1)/2⌋` unchanged.

use image::Rgb;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FrameSequence, Mask, RgbImage};

/// Placement of the instrument relative to the source frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MovingParams {
    pub dx: f64,
    pub dy: f64,
    /// Degrees.
    pub dtheta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisRanges {
    /// Magnitude range of each translation component, in pixels.
    pub translation: (f64, f64),
    /// Rotation range in degrees.
    pub rotation: (f64, f64),
}

impl Default for SynthesisRanges {
    fn default() -> Self {
        SynthesisRanges {
            translation: (15.0, 40.0),
            rotation: (-30.0, 30.0),
        }
    }
}

impl SynthesisRanges {
    pub fn validate(&self) -> Result<()> {
        let (t0, t1) = self.translation;
        let (r0, r1) = self.rotation;
        if !(t0 >= 0.0 && t0 <= t1 && t1.is_finite()) {
            return Err(Error::Invalid(format!("translation range ({t0}, {t1}) must be nonnegative and ordered")));
        }
        if !(r0 <= r1 && r0.is_finite() && r1.is_finite()) {
            return Err(Error::Invalid(format!("rotation range ({r0}, {r1}) must be finite and ordered")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Independent random parameters for the first and last frames.
pub fn sample_endpoint_params(rng: &mut impl Rng, ranges: &SynthesisRanges) -> Result<(MovingParams, MovingParams)> {
    ranges.validate()?;
    let mut one = || {
        let mut axis = || {
            let m = uniform(rng, ranges.translation);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let (dx, dy) = (axis(), axis());
        MovingParams {
            dx,
            dy,
            dtheta: uniform(rng, ranges.rotation),
        }
    };
    let first = one();
    let last = one();
    Ok((first, last))
}

/// Piecewise-linear parameters for frames `1..=n`: `first` at frame 1, zero
/// at the center frame, `last` at frame `n`.
pub fn interpolate_params(first: MovingParams, last: MovingParams, n: usize) -> Result<Vec<MovingParams>> {
    if n < 2 {
        return Err(Error::Invalid(format!("interpolation needs at least 2 frames, got {n}")));
    }
    let c = center_frame(n);
    let lerp = |i: usize| -> MovingParams {
        let (from, t) = if i < c {
            (first, (c - i) as f64 / (c - 1) as f64)
        } else if i > c {
            (last, (i - c) as f64 / (n - c) as f64)
        } else {
            return MovingParams::default();
        };
        MovingParams {
            dx: from.dx * t,
            dy: from.dy * t,
            dtheta: from.dtheta * t,
        }
    };
    Ok((1..=n).map(lerp).collect())
}

/// 1-based position of the source frame in a length-`n` sequence.
pub fn center_frame(n: usize) -> usize {
    n.div_ceil(2).max(1)
}

/// The instrument cropped to its bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentPatch {
    /// Top-left corner of the box in the source frame.
    pub origin: (u32, u32),
    pub image: RgbImage,
    /// Opaque pixels of `image`; everything else is transparent.
    pub mask: Mask,
    /// Instrument centroid in source-frame coordinates.
    pub centroid: (f64, f64),
}

pub fn extract_instrument(frame: &RgbImage, mask: &Mask) -> Result<InstrumentPatch> {
    check_extents(frame, mask)?;
    let (x0, y0, x1, y1) = mask.bbox().ok_or(Error::NoInstrument)?;
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let image = RgbImage::from_fn(w, h, |x, y| {
        if mask.get(x0 + x, y0 + y) {
            *frame.get_pixel(x0 + x, y0 + y)
        } else {
            Rgb([0, 0, 0])
        }
    });
    let local = Mask::from_fn(w, h, |x, y| mask.get(x0 + x, y0 + y));
    Ok(InstrumentPatch {
        origin: (x0, y0),
        image,
        mask: local,
        centroid: mask.centroid().expect("nonempty mask"),
    })
}

fn check_extents(frame: &RgbImage, mask: &Mask) -> Result<()> {
    if frame.dimensions() != mask.dimensions() {
        return Err(Error::Invalid(format!(
            "image is {:?} but mask is {:?}",
            frame.dimensions(),
            mask.dimensions()
        )));
    }
    Ok(())
}

/// Stopping threshold of the diffusion fill, in intensity levels.
pub const INPAINT_TOLERANCE: f64 = 0.5;
pub const INPAINT_MAX_ITERS: usize = 500;

/// Fills masked pixels by Jacobi iterations of the 4-neighbor mean with the
/// unmasked pixels held fixed.
pub fn inpaint(frame: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    check_extents(frame, mask)?;
    let (w, h) = frame.dimensions();
    let holes: Vec<(u32, u32)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| mask.get(x, y)).collect();
    if holes.is_empty() {
        return Ok(frame.clone());
    }
    let mut out = frame.clone();
    if holes.len() == (w * h) as usize {
        log::warn!("inpaint: every pixel is masked, filling with the global mean");
        let mean = channel_mean(frame.pixels());
        for p in out.pixels_mut() {
            *p = Rgb(mean.map(|v| v.round() as u8));
        }
        return Ok(out);
    }

    let mut field: Vec<[f64; 3]> = frame.pixels().map(|p| p.0.map(f64::from)).collect();
    // Start the hole at the mean of the known ring around it.
    let ring = channel_mean(
        holes
            .iter()
            .flat_map(|&(x, y)| neighbors(x, y, w, h))
            .filter(|&(x, y)| !mask.get(x, y))
            .map(|(x, y)| frame.get_pixel(x, y)),
    );
    for &(x, y) in &holes {
        field[(y * w + x) as usize] = ring;
    }
    let mut next = vec![[0.0; 3]; holes.len()];
    for _ in 0..INPAINT_MAX_ITERS {
        let mut change: f64 = 0.0;
        for (slot, &(x, y)) in next.iter_mut().zip(&holes) {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for (nx, ny) in neighbors(x, y, w, h) {
                let v = field[(ny * w + nx) as usize];
                for c in 0..3 {
                    acc[c] += v[c];
                }
                n += 1.0;
            }
            *slot = acc.map(|a| a / n);
            let old = field[(y * w + x) as usize];
            for c in 0..3 {
                change = change.max((slot[c] - old[c]).abs());
            }
        }
        for (v, &(x, y)) in next.iter().zip(&holes) {
            field[(y * w + x) as usize] = *v;
        }
        if change < INPAINT_TOLERANCE {
            break;
        }
    }
    for &(x, y) in &holes {
        let v = field[(y * w + x) as usize];
        out.put_pixel(x, y, Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8)));
    }
    Ok(out)
}

fn neighbors(x: u32, y: u32, w: u32, h: u32) -> impl Iterator<Item = (u32, u32)> {
    let (x, y) = (x as i64, y as i64);
    [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
        .into_iter()
        .filter(move |&(a, b)| a >= 0 && b >= 0 && a < w as i64 && b < h as i64)
        .map(|(a, b)| (a as u32, b as u32))
}

fn channel_mean<'a>(pixels: impl Iterator<Item = &'a Rgb<u8>>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for p in pixels {
        for c in 0..3 {
            acc[c] += p.0[c] as f64;
        }
        n += 1.0;
    }
    acc.map(|a| if n > 0.0 { a / n } else { 0.0 })
}

/// Rotates the patch by `dtheta` about its centroid, shifts it by
/// `(dx, dy)` and composites it over `background`. Returns the frame and
/// the mask of the pasted instrument.
pub fn transform_paste(background: &RgbImage, patch: &InstrumentPatch, params: MovingParams) -> (RgbImage, Mask) {
    let (w, h) = background.dimensions();
    let (cx, cy) = patch.centroid;
    let (s, c) = params.dtheta.to_radians().sin_cos();
    let mut frame = background.clone();
    let mut mask = Mask::empty(w, h);
    let (ox, oy) = (patch.origin.0 as f64, patch.origin.1 as f64);
    for y in 0..h {
        for x in 0..w {
            // Inverse map of q = R(p − c) + c + t.
            let qx = x as f64 - params.dx - cx;
            let qy = y as f64 - params.dy - cy;
            let px = c * qx + s * qy + cx - ox;
            let py = -s * qx + c * qy + cy - oy;
            if let Some(rgb) = sample_patch(patch, px, py) {
                frame.put_pixel(x, y, rgb);
                mask.set(x, y, true);
            }
        }
    }
    (frame, mask)
}

/// Bilinear sample at patch-local `(px, py)`. Returns the color if the
/// interpolated opacity reaches 0.5.
fn sample_patch(patch: &InstrumentPatch, px: f64, py: f64) -> Option<Rgb<u8>> {
    let (pw, ph) = patch.mask.dimensions();
    if px <= -1.0 || py <= -1.0 || px >= pw as f64 || py >= ph as f64 {
        return None;
    }
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut alpha = 0.0;
    let mut color = [0.0; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wgt = wx * wy;
            let (sx, sy) = (x0 + dx, y0 + dy);
            if wgt == 0.0 || sx < 0 || sy < 0 || sx >= pw as i64 || sy >= ph as i64 {
                continue;
            }
            if patch.mask.get(sx as u32, sy as u32) {
                alpha += wgt;
                let p = patch.image.get_pixel(sx as u32, sy as u32);
                for ch in 0..3 {
                    color[ch] += wgt * p.0[ch] as f64;
                }
            }
        }
    }
    (alpha >= 0.5).then(|| Rgb(color.map(|v| (v / alpha).round().clamp(0.0, 255.0) as u8)))
}

/// A synthetic sequence together with the placement used for each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub sequence: FrameSequence,
    pub params: Vec<MovingParams>,
    /// 0-based position of the untouched source frame.
    pub center: usize,
}

pub fn synthesize_sequence(
    frame: &RgbImage,
    label: &Mask,
    n: usize,
    rng: &mut impl Rng,
    ranges: &SynthesisRanges,
) -> Result<SyntheticSequence> {
    let patch = extract_instrument(frame, label)?;
    let (first, last) = sample_endpoint_params(rng, ranges)?;
    let params = interpolate_params(first, last, n)?;
    let background = inpaint(frame, label)?;
    let center = center_frame(n) - 1;
    let mut frames = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, &p) in params.iter().enumerate() {
        if i == center {
            frames.push(frame.clone());
            labels.push(Some(label.clone()));
        } else {
            let (f, m) = transform_paste(&background, &patch, p);
            frames.push(f);
            labels.push(Some(m));
        }
    }
    Ok(SyntheticSequence {
        sequence: FrameSequence {
            frames,
            labels,
            indices: (0..n).collect(),
        },
        params,
        center,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::metrics::dsc;

    fn mp(dx: f64, dy: f64, dtheta: f64) -> MovingParams {
        MovingParams { dx, dy, dtheta }
    }

    /// Textured frame with a bar-shaped instrument.
    fn fixture(w: u32, h: u32) -> (RgbImage, Mask) {
        let mask = Mask::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64 - w as f64 / 2.0, y as f64 - h as f64 / 2.0);
            fx.abs() < w as f64 / 6.0 && fy.abs() < h as f64 / 12.0
        });
        let img = RgbImage::from_fn(w, h, |x, y| {
            if mask.get(x, y) {
                Rgb([200, 210, 220 - (x % 7) as u8])
            } else {
                Rgb([120 + (x * 3 % 40) as u8, 40 + (y * 5 % 30) as u8, 50])
            }
        });
        (img, mask)
    }

    #[test]
    fn endpoint_ranges_and_sign_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = SynthesisRanges::default();
        let mut positive = 0;
        for _ in 0..10_000 {
            let (a, b) = sample_endpoint_params(&mut rng, &r).unwrap();
            for p in [a, b] {
                for v in [p.dx, p.dy] {
                    assert!((15.0..=40.0).contains(&v.abs()));
                }
                assert!((-30.0..=30.0).contains(&p.dtheta));
            }
            positive += (a.dx > 0.0) as usize;
        }
        let frac = positive as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
    }

    #[test]
    fn endpoints_deterministic() {
        let r = SynthesisRanges::default();
        let a = sample_endpoint_params(&mut ChaCha8Rng::seed_from_u64(5), &r).unwrap();
        let b = sample_endpoint_params(&mut ChaCha8Rng::seed_from_u64(5), &r).unwrap();
        assert_eq!(a, b);
        let bad = SynthesisRanges { translation: (40.0, 15.0), ..r };
        assert!(sample_endpoint_params(&mut ChaCha8Rng::seed_from_u64(5), &bad).is_err());
    }

    #[test]
    fn worked_interpolation_example() {
        let p = interpolate_params(mp(-30.0, 0.0, 0.0), mp(30.0, 0.0, 0.0), 4).unwrap();
        let dx: Vec<f64> = p.iter().map(|m| m.dx).collect();
        assert_eq!(dx, vec![-30.0, 0.0, 15.0, 30.0]);
    }

    #[test]
    fn interpolation_edge_cases() {
        let p = interpolate_params(mp(-20.0, 17.0, 5.0), mp(25.0, -16.0, -9.0), 2).unwrap();
        assert_eq!(p, vec![MovingParams::default(), mp(25.0, -16.0, -9.0)]);
        let z = interpolate_params(MovingParams::default(), MovingParams::default(), 6).unwrap();
        assert!(z.iter().all(|&m| m == MovingParams::default()));
        assert!(interpolate_params(MovingParams::default(), MovingParams::default(), 1).is_err());
        let p = interpolate_params(mp(-20.0, 10.0, 4.0), mp(30.0, -30.0, 9.0), 5).unwrap();
        assert_eq!(p[2], MovingParams::default());
        assert_eq!(p[0], mp(-20.0, 10.0, 4.0));
        assert_eq!(p[4], mp(30.0, -30.0, 9.0));
        assert_eq!(p[3], mp(15.0, -15.0, 4.5));
    }

    #[test]
    fn extraction_boxes() {
        let (img, _) = fixture(12, 10);
        let full = Mask::from_fn(12, 10, |_, _| true);
        let p = extract_instrument(&img, &full).unwrap();
        assert_eq!(p.image, img);
        let one = Mask::from_fn(12, 10, |x, y| x == 4 && y == 7);
        let p = extract_instrument(&img, &one).unwrap();
        assert_eq!((p.image.dimensions(), p.origin), ((1, 1), (4, 7)));
        let ell = Mask::from_fn(12, 10, |x, y| (x == 2 && (3..=8).contains(&y)) || (y == 8 && (2..=6).contains(&x)));
        let p = extract_instrument(&img, &ell).unwrap();
        assert_eq!((p.image.dimensions(), p.origin), ((5, 6), (2, 3)));
        assert!(!p.mask.get(4, 0));
        assert!(matches!(extract_instrument(&img, &Mask::empty(12, 10)), Err(Error::NoInstrument)));
    }

    #[test]
    fn inpaint_contracts() {
        let (img, mask) = fixture(20, 16);
        assert_eq!(inpaint(&img, &Mask::empty(20, 16)).unwrap(), img);

        let flat = RgbImage::from_pixel(20, 16, Rgb([77, 12, 200]));
        assert_eq!(inpaint(&flat, &mask).unwrap(), flat);

        let filled = inpaint(&img, &mask).unwrap();
        for (x, y, p) in img.enumerate_pixels() {
            if !mask.get(x, y) {
                assert_eq!(filled.get_pixel(x, y), p);
            }
        }
    }

    #[test]
    fn single_hole_takes_neighbor_mean() {
        let mut img = RgbImage::from_pixel(3, 3, Rgb([0, 0, 0]));
        img.put_pixel(1, 0, Rgb([10, 10, 10]));
        img.put_pixel(0, 1, Rgb([20, 20, 20]));
        img.put_pixel(2, 1, Rgb([30, 30, 30]));
        img.put_pixel(1, 2, Rgb([40, 40, 40]));
        let hole = Mask::from_fn(3, 3, |x, y| x == 1 && y == 1);
        let out = inpaint(&img, &hole).unwrap();
        assert_eq!(out.get_pixel(1, 1).0, [25, 25, 25]);
    }

    #[test]
    fn fully_masked_frame_gets_global_mean() {
        let img = RgbImage::from_fn(2, 1, |x, _| Rgb([if x == 0 { 10 } else { 30 }, 0, 0]));
        let out = inpaint(&img, &Mask::from_fn(2, 1, |_, _| true)).unwrap();
        assert!(out.pixels().all(|p| p.0 == [20, 0, 0]));
    }

    #[test]
    fn identity_paste_reproduces_source() {
        let (img, mask) = fixture(48, 40);
        let patch = extract_instrument(&img, &mask).unwrap();
        let bg = inpaint(&img, &mask).unwrap();
        let (f, m) = transform_paste(&bg, &patch, MovingParams::default());
        assert_eq!(m, mask);
        assert_eq!(f, img);
    }

    #[test]
    fn full_turn_matches_no_turn() {
        let (img, mask) = fixture(48, 40);
        let patch = extract_instrument(&img, &mask).unwrap();
        let bg = inpaint(&img, &mask).unwrap();
        let (_, a) = transform_paste(&bg, &patch, MovingParams::default());
        let (_, b) = transform_paste(&bg, &patch, mp(0.0, 0.0, 360.0));
        assert!(dsc(&a, &b).unwrap() >= 0.98);
    }

    #[test]
    fn integer_translation_is_exact() {
        let (img, mask) = fixture(48, 40);
        let patch = extract_instrument(&img, &mask).unwrap();
        let bg = inpaint(&img, &mask).unwrap();
        let (f, m) = transform_paste(&bg, &patch, mp(5.0, -3.0, 0.0));
        assert_eq!(m.count(), mask.count());
        for (x, y, p) in img.enumerate_pixels() {
            if mask.get(x, y) {
                assert!(m.get(x + 5, y - 3));
                assert_eq!(f.get_pixel(x + 5, y - 3), p);
            }
        }
    }

    #[test]
    fn translation_off_frame_leaves_background() {
        let (img, mask) = fixture(48, 40);
        let patch = extract_instrument(&img, &mask).unwrap();
        let bg = inpaint(&img, &mask).unwrap();
        let (f, m) = transform_paste(&bg, &patch, mp(100.0, 0.0, 10.0));
        assert!(m.is_empty());
        assert_eq!(f, bg);
    }

    #[test]
    fn sequence_structure() {
        let (img, mask) = fixture(64, 64);
        let r = SynthesisRanges::default();
        let s = synthesize_sequence(&img, &mask, 4, &mut ChaCha8Rng::seed_from_u64(1), &r).unwrap();
        assert_eq!(s.center, 1);
        assert_eq!(s.sequence.len(), 4);
        assert_eq!(s.sequence.labeled_count(), 4);
        assert_eq!(s.sequence.frames[1], img);
        assert_eq!(s.sequence.labels[1].as_ref(), Some(&mask));
        let t = synthesize_sequence(&img, &mask, 4, &mut ChaCha8Rng::seed_from_u64(1), &r).unwrap();
        assert_eq!(s, t);
        assert!(matches!(
            synthesize_sequence(&img, &Mask::empty(64, 64), 4, &mut ChaCha8Rng::seed_from_u64(1), &r),
            Err(Error::NoInstrument)
        ));
    }

    /// Coefficient of determination of the least-squares line through `(x, y)`.
    fn r_squared(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        if syy == 0.0 {
            return 1.0;
        }
        sxy * sxy / (sxx * syy)
    }

    #[test]
    fn centroid_tracks_assigned_translation() {
        let (img, mask) = fixture(160, 160);
        let (cx, cy) = mask.centroid().unwrap();
        let r = SynthesisRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let s = synthesize_sequence(&img, &mask, 7, &mut rng, &r).unwrap();
            let (mut dx, mut dy, mut ox, mut oy) = (vec![], vec![], vec![], vec![]);
            for (p, m) in s.params.iter().zip(&s.sequence.labels) {
                let (mx, my) = m.as_ref().unwrap().centroid().unwrap();
                dx.push(p.dx);
                dy.push(p.dy);
                ox.push(mx - cx);
                oy.push(my - cy);
            }
            assert!(r_squared(&dx, &ox) >= 0.99);
            assert!(r_squared(&dy, &oy) >= 0.99);
        }
    }
}
