//! Deterministic synthetic video scenes: textured rigid objects drifting and
//! bouncing over a static background, optionally viewed through a panning
//! camera. Every frame comes with tight ground-truth boxes and an exact
//! foreground mask, which later stages treat as the oracle.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Background, CameraMotion, ObjectKind, SceneConfig};
use crate::dataio::VideoSequence;
use crate::error::{Error, Result};
use crate::types::{GtBox, SegMask};

/// Object intensity range; kept well above the brightest background so the
/// background subtractor has honest contrast to work with.
const OBJ_INTENSITY: (f64, f64) = (0.60, 0.95);
/// Additive rigid speckle amplitude, gives the flow estimator texture.
const SPECKLE_AMP: f64 = 0.06;
const FLAT_BG: f64 = 0.25;

struct SceneObject {
    kind: ObjectKind,
    class_id: usize,
    w: usize,
    h: usize,
    // center in canvas coordinates
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    intensity: f64,
    speckle: Array2<f64>,
}

impl SceneObject {
    /// Canvas-coordinate pixels covered by this object, as (y, x) pairs.
    fn footprint(&self) -> Vec<(isize, isize)> {
        let x0 = (self.cx - self.w as f64 / 2.0).round() as isize;
        let y0 = (self.cy - self.h as f64 / 2.0).round() as isize;
        let mut px = Vec::with_capacity(self.w * self.h);
        match self.kind {
            ObjectKind::Rectangle => {
                for y in 0..self.h as isize {
                    for x in 0..self.w as isize {
                        px.push((y0 + y, x0 + x));
                    }
                }
            }
            ObjectKind::Ellipse => {
                let (rx, ry) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                for y in 0..self.h as isize {
                    for x in 0..self.w as isize {
                        let dx = (x0 + x) as f64 + 0.5 - self.cx;
                        let dy = (y0 + y) as f64 + 0.5 - self.cy;
                        if (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0 {
                            px.push((y0 + y, x0 + x));
                        }
                    }
                }
            }
        }
        px
    }

    fn speckle_origin(&self) -> (isize, isize) {
        (
            (self.cy - self.h as f64 / 2.0).round() as isize,
            (self.cx - self.w as f64 / 2.0).round() as isize,
        )
    }
}

/// Camera window origin (top-left, canvas coords) at frame `t`.
fn window_origin(camera: CameraMotion, t: usize, n_frames: usize) -> (isize, isize) {
    match camera {
        CameraMotion::None => (0, 0),
        CameraMotion::Pan { dx, dy } => {
            let base_x = if dx >= 0.0 { 0.0 } else { (dx * (n_frames - 1) as f64).abs().ceil() };
            let base_y = if dy >= 0.0 { 0.0 } else { (dy * (n_frames - 1) as f64).abs().ceil() };
            (
                (base_y + dy * t as f64).round() as isize,
                (base_x + dx * t as f64).round() as isize,
            )
        }
    }
}

fn canvas_size(cfg: &SceneConfig) -> (usize, usize) {
    match cfg.camera {
        CameraMotion::None => (cfg.height, cfg.width),
        CameraMotion::Pan { dx, dy } => {
            let extra_x = (dx * (cfg.n_frames - 1) as f64).abs().ceil() as usize;
            let extra_y = (dy * (cfg.n_frames - 1) as f64).abs().ceil() as usize;
            (cfg.height + extra_y, cfg.width + extra_x)
        }
    }
}

/// Static background canvas in [0,1].
fn render_background(cfg: &SceneConfig, ch: usize, cw: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    match cfg.background {
        Background::Flat => Array2::from_elem((ch, cw), FLAT_BG),
        Background::TexturedNoise => {
            let mut canvas = Array2::from_shape_fn((ch, cw), |_| rng.gen_range(0.0..1.0));
            for _ in 0..2 {
                canvas = box_blur(&canvas, 2);
            }
            // normalize to a dim, mid-contrast texture
            let n = canvas.len() as f64;
            let mean = canvas.sum() / n;
            let var = canvas.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-9);
            canvas.mapv(|v| (0.30 + (v - mean) / std * 0.10).clamp(0.05, 0.45))
        }
    }
}

fn box_blur(src: &Array2<f64>, r: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let r = r as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dx in -r..=r {
                let xx = x as isize + dx;
                if xx >= 0 && xx < w as isize {
                    acc += src[[y, xx as usize]];
                    cnt += 1.0;
                }
            }
            tmp[[y, x]] = acc / cnt;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy >= 0 && yy < h as isize {
                    acc += tmp[[yy as usize, x]];
                    cnt += 1.0;
                }
            }
            out[[y, x]] = acc / cnt;
        }
    }
    out
}

fn spawn_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let (oy0, ox0) = window_origin(cfg.camera, 0, cfg.n_frames);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let kind = cfg.object_kinds[rng.gen_range(0..cfg.object_kinds.len())];
        let class_id = match kind {
            ObjectKind::Rectangle => 0,
            ObjectKind::Ellipse => 1,
        };
        let w = rng.gen_range(cfg.size_min..=cfg.size_max);
        let h = rng.gen_range(cfg.size_min..=cfg.size_max);
        let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let intensity = rng.gen_range(OBJ_INTENSITY.0..OBJ_INTENSITY.1);
        let speckle = Array2::from_shape_fn((h, w), |_| rng.gen_range(-SPECKLE_AMP..SPECKLE_AMP));

        // rejection-sample a spawn point that avoids existing objects
        let (mut cx, mut cy) = (0.0, 0.0);
        for attempt in 0..50 {
            cx = ox0 as f64 + rng.gen_range(w as f64 / 2.0 + 2.0..cfg.width as f64 - w as f64 / 2.0 - 2.0);
            cy = oy0 as f64 + rng.gen_range(h as f64 / 2.0 + 2.0..cfg.height as f64 - h as f64 / 2.0 - 2.0);
            let clear = objects.iter().all(|o| {
                (o.cx - cx).abs() > (o.w + w) as f64 / 2.0 + 4.0
                    || (o.cy - cy).abs() > (o.h + h) as f64 / 2.0 + 4.0
            });
            if clear || attempt == 49 {
                break;
            }
        }
        objects.push(SceneObject {
            kind,
            class_id,
            w,
            h,
            cx,
            cy,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            intensity,
            speckle,
        });
    }
    objects
}

/// Advance one object a frame, bouncing off the *visible window* edges so it
/// never leaves the frame.
fn step_object(o: &mut SceneObject, oy: isize, ox: isize, img_h: usize, img_w: usize) {
    o.cx += o.vx;
    o.cy += o.vy;
    let (half_w, half_h) = (o.w as f64 / 2.0, o.h as f64 / 2.0);
    let (lo_x, hi_x) = (ox as f64 + half_w + 1.0, ox as f64 + img_w as f64 - half_w - 1.0);
    let (lo_y, hi_y) = (oy as f64 + half_h + 1.0, oy as f64 + img_h as f64 - half_h - 1.0);
    if o.cx < lo_x {
        o.cx = lo_x;
        o.vx = o.vx.abs();
    } else if o.cx > hi_x {
        o.cx = hi_x;
        o.vx = -o.vx.abs();
    }
    if o.cy < lo_y {
        o.cy = lo_y;
        o.vy = o.vy.abs();
    } else if o.cy > hi_y {
        o.cy = hi_y;
        o.vy = -o.vy.abs();
    }
}

/// Generate a full sequence. Deterministic: identical config (incl. seed)
/// gives bit-identical output.
pub fn gen_sequence(cfg: &SceneConfig) -> Result<VideoSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ch, cw) = canvas_size(cfg);
    let background = render_background(cfg, ch, cw, &mut rng);
    let mut objects = spawn_objects(cfg, &mut rng);
    let noise = Normal::new(0.0, (cfg.noise_sigma / 255.0).max(1e-12))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut gt_boxes = Vec::with_capacity(cfg.n_frames);
    let mut oracle_masks = Vec::with_capacity(cfg.n_frames);

    for t in 0..cfg.n_frames {
        let (oy, ox) = window_origin(cfg.camera, t, cfg.n_frames);
        if t > 0 {
            for o in objects.iter_mut() {
                step_object(o, oy, ox, cfg.height, cfg.width);
            }
        }

        // paint canvas: background, then objects in spawn order
        let mut canvas = background.clone();
        let mut mask = SegMask::zeros((cfg.height, cfg.width));
        let mut boxes = Vec::with_capacity(objects.len());
        for o in &objects {
            let (sy, sx) = o.speckle_origin();
            let mut bbox: Option<(isize, isize, isize, isize)> = None;
            for (py, px) in o.footprint() {
                if py < 0 || px < 0 || py >= ch as isize || px >= cw as isize {
                    continue;
                }
                let tex_y = ((py - sy).clamp(0, o.h as isize - 1)) as usize;
                let tex_x = ((px - sx).clamp(0, o.w as isize - 1)) as usize;
                canvas[[py as usize, px as usize]] =
                    (o.intensity + o.speckle[[tex_y, tex_x]]).clamp(0.0, 1.0);
                let (fy, fx) = (py - oy, px - ox);
                if fy >= 0 && fx >= 0 && (fy as usize) < cfg.height && (fx as usize) < cfg.width {
                    mask[[fy as usize, fx as usize]] = 1;
                    bbox = Some(match bbox {
                        None => (fy, fx, fy, fx),
                        Some((y1, x1, y2, x2)) => (y1.min(fy), x1.min(fx), y2.max(fy), x2.max(fx)),
                    });
                }
            }
            if let Some((y1, x1, y2, x2)) = bbox {
                boxes.push(GtBox::new(
                    o.class_id,
                    x1 as f64,
                    y1 as f64,
                    (x2 + 1) as f64,
                    (y2 + 1) as f64,
                )?);
            }
        }

        // crop the window, add sensor noise, quantize
        let mut frame = Array2::<u8>::zeros((cfg.height, cfg.width));
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let v = canvas[[(y as isize + oy) as usize, (x as isize + ox) as usize]];
                let v = if cfg.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v };
                frame[[y, x]] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        frames.push(frame);
        gt_boxes.push(boxes);
        oracle_masks.push(mask);
    }

    Ok(VideoSequence { frames, gt_boxes, oracle_masks, config: cfg.clone() })
}
