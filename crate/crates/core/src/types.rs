//! Shared plain-data types: boxes, detections, masks, flow fields.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth box in input-pixel coordinates. `x2`/`y2` are exclusive, so a
/// 20x20 object covers exactly 400 pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl GtBox {
    pub fn new(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::NonFinite("box coordinates".into()));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box [{x1},{y1},{x2},{y2}]"
            )));
        }
        Ok(GtBox { class_id, x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn inside(&self, img_w: usize, img_h: usize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= img_w as f64 && self.y2 <= img_h as f64
    }
}

/// A decoded detection, same coordinate conventions as [`GtBox`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Detection {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Intersection-over-union between two axis-aligned boxes given as
/// (x1, y1, x2, y2).
pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Binary segmentation mask, one byte per pixel, values restricted to {0, 1}.
pub type SegMask = Array2<u8>;

/// Validates the {0,1} invariant; masks loaded from disk go through this.
pub fn check_mask(mask: &SegMask) -> Result<()> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::Data("segmentation mask has values outside {0,1}".into()));
    }
    Ok(())
}

/// Dense optical flow: per-pixel displacement such that
/// `next(x + dx, y + dy) ≈ prev(x, y)`.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { dx: Array2::zeros((h, w)), dy: Array2::zeros((h, w)) }
    }

    pub fn magnitude(&self) -> Array2<f64> {
        let mut m = Array2::zeros(self.dx.raw_dim());
        ndarray::Zip::from(&mut m)
            .and(&self.dx)
            .and(&self.dy)
            .for_each(|o, &x, &y| *o = (x * x + y * y).sqrt());
        m
    }
}

/// Per-frame ground truth as stored in a sequence's `boxes.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameBoxes {
    pub frame: usize,
    pub boxes: Vec<GtBox>,
}

/// Per-frame detections as written by `spotnet detect`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame: usize,
    pub detections: Vec<Detection>,
}
