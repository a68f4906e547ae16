//! Dataset manifest and loading of whole videos.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{load_pgm_mask, load_ppm, mask_path};
use crate::error::{Error, Result};
use crate::frame::{Mask, RgbImage};
use crate::par::{self, Exec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    /// Frame files relative to the dataset root, in temporal order.
    pub frames: Vec<String>,
    /// Frames whose mask may be used for training.
    pub labeled_indices: Vec<usize>,
    pub fold: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// `[width, height]` of every frame.
    pub frame_size: [u32; 2],
    pub videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::format("manifest", format!("unsupported version {}", self.version)));
        }
        if self.frame_size.contains(&0) {
            return Err(Error::format("manifest", "frame size must be positive"));
        }
        for v in &self.videos {
            if !v.labeled_indices.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::format("manifest", format!("video {}: labeled indices not strictly increasing", v.id)));
            }
            if let Some(&last) = v.labeled_indices.last() {
                if last >= v.frames.len() {
                    return Err(Error::format(
                        "manifest",
                        format!("video {}: labeled index {last} beyond {} frames", v.id, v.frames.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        super::pnm::write(path, text.as_bytes())
    }
}

/// A fully loaded video.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub fold: u32,
    pub frames: Vec<RgbImage>,
    /// Training labels: masks at the manifest's labeled indices only.
    pub labels: Vec<Option<Mask>>,
}

impl Video {
    pub fn labeled_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| l.is_some()).map(|(i, _)| i)
    }
}

/// A manifest together with its root directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn frame_path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Loads frames and the labeled masks. With `dense`, every mask found on
    /// disk is returned instead.
    pub fn load_video(&self, entry: &VideoEntry, dense: bool) -> Result<Video> {
        let [w, h] = self.manifest.frame_size;
        let mut frames = Vec::with_capacity(entry.frames.len());
        let mut labels = vec![None; entry.frames.len()];
        for rel in &entry.frames {
            let img = load_ppm(&self.frame_path(rel))?;
            if img.dimensions() != (w, h) {
                return Err(Error::Invalid(format!(
                    "{rel}: frame is {:?}, manifest says {w}×{h}",
                    img.dimensions()
                )));
            }
            frames.push(img);
        }
        let wanted: Vec<usize> = if dense {
            (0..entry.frames.len()).collect()
        } else {
            entry.labeled_indices.clone()
        };
        for i in wanted {
            let mp = mask_path(&self.frame_path(&entry.frames[i]));
            if !mp.exists() {
                if dense {
                    continue;
                }
                return Err(Error::Invalid(format!("video {}: labeled frame {i} has no mask file", entry.id)));
            }
            let m = load_pgm_mask(&mp)?;
            if m.dimensions() != (w, h) {
                return Err(Error::Invalid(format!("{}: mask extents differ from the frame", mp.display())));
            }
            labels[i] = Some(m);
        }
        Ok(Video {
            id: entry.id.clone(),
            fold: entry.fold,
            frames,
            labels,
        })
    }

    pub fn load_all(&self, dense: bool, exec: Exec) -> Result<Vec<Video>> {
        par::map(exec, &self.manifest.videos, |v| self.load_video(v, dense))
            .into_iter()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(frames: usize, labeled: Vec<usize>) -> VideoEntry {
        VideoEntry {
            id: "v".into(),
            frames: (0..frames).map(|i| format!("v/frame_{i:04}.ppm")).collect(),
            labeled_indices: labeled,
            fold: 0,
        }
    }

    #[test]
    fn validation_rules() {
        let mut m = DatasetManifest {
            version: 1,
            frame_size: [8, 8],
            videos: vec![entry(10, vec![0, 3, 9])],
        };
        m.validate().unwrap();
        m.videos[0].labeled_indices = vec![3, 3];
        assert!(m.validate().is_err());
        m.videos[0].labeled_indices = vec![10];
        assert!(m.validate().is_err());
        m.videos[0].labeled_indices = vec![];
        m.version = 2;
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_field_names() {
        let m = DatasetManifest {
            version: 1,
            frame_size: [64, 48],
            videos: vec![entry(1, vec![0])],
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, vec!["frame_size", "version", "videos"]);
        let vk: Vec<&str> = v["videos"][0].as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(vk, vec!["fold", "frames", "id", "labeled_indices"]);
    }

    #[test]
    fn missing_labeled_mask_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(4, 4);
        super::super::pnm::save_ppm(&dir.path().join("v/frame_0000.ppm"), &img).unwrap();
        let ds = Dataset {
            root: dir.path().to_path_buf(),
            manifest: DatasetManifest {
                version: 1,
                frame_size: [4, 4],
                videos: vec![entry(1, vec![0])],
            },
        };
        assert!(ds.load_video(&ds.manifest.videos[0], false).is_err());
        let v = ds.load_video(&ds.manifest.videos[0], true).unwrap();
        assert_eq!(v.labels, vec![None]);
    }
}
