//! Disk layout for sequences and runs.
//!
//! A sequence directory holds `frame_%06d.png` (grayscale), oracle masks
//! `mask_%06d.png` ({0,255}), semi-supervised masks `annot_%06d.png`,
//! per-frame ground truth in `gt.json`, and a `sequence.json` manifest with a
//! config echo and SHA-256 checksums of everything written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader};
use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::types::{check_mask, FrameBoxes, GtBox, SegMask};

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{i:06}.png")
}

pub fn annot_name(i: usize) -> String {
    format!("annot_{i:06}.png")
}

// ---------------------------------------------------------------------------
// Primitive readers/writers
// ---------------------------------------------------------------------------

pub fn save_gray_png(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let raw = img
        .as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .to_vec();
    let buf = GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Data(format!("bad image buffer {w}x{h}")))?;
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_gray_png(path: &Path) -> Result<Array2<u8>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Array2::from_shape_vec((h, w), img.into_raw())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Masks are stored as {0,255} on disk and {0,1} in memory.
pub fn save_mask_png(path: &Path, mask: &SegMask) -> Result<()> {
    check_mask(mask)?;
    save_gray_png(path, &mask.mapv(|v| v * 255))
}

pub fn load_mask_png(path: &Path) -> Result<SegMask> {
    let raw = load_gray_png(path)?;
    if raw.iter().any(|&v| v != 0 && v != 255) {
        return Err(Error::Data(format!(
            "{}: mask contains values other than 0/255",
            path.display()
        )));
    }
    Ok(raw.mapv(|v| u8::from(v == 255)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

/// An in-memory video sequence with ground truth.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    pub frames: Vec<Array2<u8>>,
    pub gt_boxes: Vec<Vec<GtBox>>,
    pub oracle_masks: Vec<SegMask>,
    pub config: SceneConfig,
}

impl VideoSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        self.frames[0].dim()
    }
}

/// `sequence.json`: config echo plus checksums of every written file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub config: SceneConfig,
    /// file name -> sha256 hex
    pub checksums: BTreeMap<String, String>,
}

pub fn write_sequence(seq: &VideoSequence, dir: &Path) -> Result<SequenceManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checksums = BTreeMap::new();
    let mut put = |name: String| -> Result<()> {
        let p = dir.join(&name);
        checksums.insert(name, sha256_file(&p)?);
        Ok(())
    };
    for (i, frame) in seq.frames.iter().enumerate() {
        save_gray_png(&dir.join(frame_name(i)), frame)?;
        put(frame_name(i))?;
    }
    for (i, mask) in seq.oracle_masks.iter().enumerate() {
        save_mask_png(&dir.join(mask_name(i)), mask)?;
        put(mask_name(i))?;
    }
    let records: Vec<FrameBoxes> = seq
        .gt_boxes
        .iter()
        .enumerate()
        .map(|(i, boxes)| FrameBoxes { frame: i, boxes: boxes.clone() })
        .collect();
    write_json(&dir.join("gt.json"), &records)?;
    put("gt.json".to_string())?;

    let (height, width) = seq.frame_shape();
    let manifest = SequenceManifest {
        n_frames: seq.n_frames(),
        height,
        width,
        config: seq.config.clone(),
        checksums,
    };
    write_json(&dir.join("sequence.json"), &manifest)?;
    Ok(manifest)
}

/// A sequence as read back from disk; masks are optional because real data
/// has no oracle and annotation is a separate step.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub dir: PathBuf,
    pub frames: Vec<Array2<u8>>,
    pub gt_boxes: Vec<Vec<GtBox>>,
    pub oracle_masks: Option<Vec<SegMask>>,
    pub annot_masks: Option<Vec<SegMask>>,
    pub manifest: Option<SequenceManifest>,
}

impl LoadedSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        self.frames[0].dim()
    }

    /// Training masks: prefer the semi-supervised annotations, fall back to
    /// oracle masks (handy for debugging an upper bound).
    pub fn training_masks(&self) -> Option<&Vec<SegMask>> {
        self.annot_masks.as_ref().or(self.oracle_masks.as_ref())
    }
}

pub fn read_sequence(dir: &Path) -> Result<LoadedSequence> {
    let records: Vec<FrameBoxes> = read_json(&dir.join("gt.json"))?;
    let n = records.len();
    if n == 0 {
        return Err(Error::Data(format!("{}: empty gt.json", dir.display())));
    }
    let mut gt_boxes = vec![Vec::new(); n];
    for r in records {
        if r.frame >= n {
            return Err(Error::Data(format!(
                "{}: gt.json frame index {} out of range",
                dir.display(),
                r.frame
            )));
        }
        gt_boxes[r.frame] = r.boxes;
    }
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        frames.push(load_gray_png(&dir.join(frame_name(i)))?);
    }
    let shape = frames[0].dim();
    if frames.iter().any(|f| f.dim() != shape) {
        return Err(Error::Data(format!("{}: frames differ in shape", dir.display())));
    }

    let load_all = |name: fn(usize) -> String| -> Result<Option<Vec<SegMask>>> {
        if !dir.join(name(0)).exists() {
            return Ok(None);
        }
        let mut masks = Vec::with_capacity(n);
        for i in 0..n {
            let m = load_mask_png(&dir.join(name(i)))?;
            if m.dim() != shape {
                return Err(Error::Data(format!(
                    "{}: mask {} shape {:?} != frame shape {:?}",
                    dir.display(),
                    name(i),
                    m.dim(),
                    shape
                )));
            }
            masks.push(m);
        }
        Ok(Some(masks))
    };
    let oracle_masks = load_all(mask_name)?;
    let annot_masks = load_all(annot_name)?;
    let manifest = if dir.join("sequence.json").exists() {
        Some(read_json(&dir.join("sequence.json"))?)
    } else {
        None
    };
    Ok(LoadedSequence {
        dir: dir.to_path_buf(),
        frames,
        gt_boxes,
        oracle_masks,
        annot_masks,
        manifest,
    })
}
