//! Binary PPM (P6) frames and PGM (P5) masks.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::frame::{Mask, RgbImage};

fn decoder<'a>(bytes: &'a [u8], kind: &'static str, want: PnmSubtype) -> Result<PnmDecoder<Cursor<&'a [u8]>>> {
    let dec = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| Error::format(kind, e.to_string()))?;
    let header = dec.header();
    if header.subtype() != want {
        return Err(Error::format(kind, format!("expected {want:?}, found {:?}", header.subtype())));
    }
    if header.maximal_sample() != 255 {
        return Err(Error::format(kind, format!("maxval must be 255, found {}", header.maximal_sample())));
    }
    Ok(dec)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let dec = decoder(bytes, "PPM", PnmSubtype::Pixmap(SampleEncoding::Binary))?;
    let img = DynamicImage::from_decoder(dec).map_err(|e| Error::format("PPM", e.to_string()))?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(Error::format("PPM", format!("unexpected pixel layout {:?}", other.color()))),
    }
}

/// Masks store 0 for background and 255 for instrument; any other value is rejected.
pub fn decode_pgm_mask(bytes: &[u8]) -> Result<Mask> {
    let dec = decoder(bytes, "PGM", PnmSubtype::Graymap(SampleEncoding::Binary))?;
    let img = DynamicImage::from_decoder(dec).map_err(|e| Error::format("PGM", e.to_string()))?;
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::format("PGM", "unexpected pixel layout"));
    };
    let mut data = Vec::with_capacity(gray.as_raw().len());
    for (i, &v) in gray.as_raw().iter().enumerate() {
        match v {
            0 => data.push(false),
            255 => data.push(true),
            _ => return Err(Error::format("PGM", format!("mask value {v} at pixel {i} is neither 0 nor 255"))),
        }
    }
    Mask::new(gray.width(), gray.height(), data)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.as_raw().len() + 20);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .expect("in-memory PPM encoding");
    out
}

pub fn encode_pgm_mask(mask: &Mask) -> Vec<u8> {
    let raw: Vec<u8> = mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    let mut out = Vec::with_capacity(raw.len() + 20);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&raw, mask.width(), mask.height(), ExtendedColorType::L8)
        .expect("in-memory PGM encoding");
    out
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?).map_err(|e| with_path(e, path))
}

pub fn load_pgm_mask(path: &Path) -> Result<Mask> {
    decode_pgm_mask(&read(path)?).map_err(|e| with_path(e, path))
}

pub fn save_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write(path, &encode_ppm(img))
}

pub fn save_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    write(path, &encode_pgm_mask(mask))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { kind, reason } => Error::Format {
            kind,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    }
}

/// The mask file that accompanies a frame file: same stem, `.pgm` extension.
pub fn mask_path(frame: &Path) -> PathBuf {
    frame.with_extension("pgm")
}

/// An image with its optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub image: RgbImage,
    pub mask: Option<Mask>,
    /// Position of the frame in its video.
    pub index: usize,
}

impl LabeledFrame {
    pub fn new(image: RgbImage, mask: Option<Mask>, index: usize) -> Result<Self> {
        if let Some(m) = &mask {
            if m.dimensions() != image.dimensions() {
                return Err(Error::Invalid(format!(
                    "mask extents {:?} differ from image extents {:?}",
                    m.dimensions(),
                    image.dimensions()
                )));
            }
        }
        Ok(LabeledFrame { image, mask, index })
    }
}

/// Loads `path` and, if present, the mask next to it.
pub fn load_frame(path: &Path, index: usize) -> Result<LabeledFrame> {
    let image = load_ppm(path)?;
    let mp = mask_path(path);
    let mask = if mp.exists() { Some(load_pgm_mask(&mp)?) } else { None };
    LabeledFrame::new(image, mask, index)
}

/// Writes the image to `path` and the mask, if any, next to it.
pub fn save_frame(path: &Path, frame: &LabeledFrame) -> Result<()> {
    save_ppm(path, &frame.image)?;
    if let Some(m) = &frame.mask {
        save_pgm_mask(&mask_path(path), m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use image::Rgb;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn hand_written_p6() {
        let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.dimensions(), (2, 2));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(1, 0).0, [0, 255, 0]);
        assert_eq!(img.get_pixel(0, 1).0, [0, 0, 255]);
        assert_eq!(img.get_pixel(1, 1).0, [10, 20, 30]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode_ppm(b"P3\n1 1\n255\n1 2 3\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n15\n\x01\x02\x03").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x01\x02\x03").is_err());
        assert!(decode_pgm_mask(b"P5\n2 1\n255\n\x00\x80").is_err());
        assert!(decode_pgm_mask(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
        let m = decode_pgm_mask(b"P5\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(m.data(), &[false, true]);
    }

    #[test]
    fn frame_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([x as u8 * 40, y as u8 * 70, 9]));
        let mask = Mask::from_fn(5, 3, |x, y| x > y);
        let f = LabeledFrame::new(img, Some(mask), 7).unwrap();
        let p = dir.path().join("v/frame_0007.ppm");
        save_frame(&p, &f).unwrap();
        assert!(mask_path(&p).exists());
        assert_eq!(load_frame(&p, 7).unwrap(), f);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()), bytes);

        let unlabeled = LabeledFrame::new(f.image.clone(), None, 0).unwrap();
        let q = dir.path().join("frame_0000.ppm");
        save_frame(&q, &unlabeled).unwrap();
        assert_eq!(load_frame(&q, 0).unwrap().mask, None);
        assert!(LabeledFrame::new(f.image.clone(), Some(Mask::empty(3, 5)), 0).is_err());
        assert!(matches!(load_frame(&dir.path().join("missing.ppm"), 0), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn ppm_and_pgm_bytes_round_trip(w in 1u32..12, h in 1u32..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
            let mask = Mask::new(w, h, (0..w * h).map(|_| rng.gen()).collect()).unwrap();
            prop_assert_eq!(decode_pgm_mask(&encode_pgm_mask(&mask)).unwrap(), mask);
        }
    }
}
