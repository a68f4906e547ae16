//! Frame and mask containers shared by the data, synthesis and metric code.

use crate::error::{Error, Result};
use crate::losses::OneHotMap;
use crate::model::frame_tensor;
use crate::real::Real;
use crate::tensor::Tensor;

pub use image::RgbImage;

/// Binary instrument mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != (width * height) as usize {
            return Err(Error::Dimension {
                op: "mask",
                axis: "pixels",
                expected: (width * height) as usize,
                got: data.len(),
            });
        }
        Ok(Mask { width, height, data })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Mask { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// `H×W×1` tensor of 0/1 values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        Tensor::new([self.height as usize, self.width as usize, 1], data).expect("mask extents")
    }

    /// Nonzero entries of an `H×W×1` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        if c != 1 {
            return Err(Error::Dimension {
                op: "mask",
                axis: "channels",
                expected: 1,
                got: c,
            });
        }
        Mask::new(w as u32, h as u32, t.data().iter().map(|&v| v > T::zero()).collect())
    }

    pub fn one_hot<T: Real>(&self) -> OneHotMap<T> {
        OneHotMap::from_mask(&self.data, self.height as usize, self.width as usize).expect("mask extents")
    }

    /// Mean of `(x, y)` over instrument pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Inclusive `(x0, y0, x1, y1)` of the instrument pixels.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }
}

/// Ordered frames with optional per-frame ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<RgbImage>,
    pub labels: Vec<Option<Mask>>,
    /// Source frame index of each entry within its video.
    pub indices: Vec<usize>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Normalized `H×W×3` network input for an 8-bit frame.
pub fn image_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    frame_tensor(img.as_raw(), img.height() as usize, img.width() as usize).expect("image extents")
}
