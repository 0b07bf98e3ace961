//! Per-pixel adaptive Gaussian-mixture background subtraction
//! (Stauffer–Grimson). Stands in for PAWCS as the fixed-camera motion cue:
//! the downstream contract only needs *some* background subtractor whose
//! output gets intersected with the ground-truth boxes.

use ndarray::{Array2, Array3};

use crate::config::BgParams;
use crate::error::{Error, Result};
use crate::types::SegMask;

/// Mixture state: `K` (weight, mean, variance) triples per pixel, intensities
/// in 0..255.
pub struct BgModel {
    params: BgParams,
    weight: Array3<f64>,
    mean: Array3<f64>,
    var: Array3<f64>,
    frames_seen: usize,
}

impl BgModel {
    pub fn new(h: usize, w: usize, params: BgParams) -> Result<Self> {
        if params.k == 0 {
            return Err(Error::Config("bg model needs k >= 1 components".into()));
        }
        if !(params.learning_rate > 0.0 && params.learning_rate < 1.0) {
            return Err(Error::Config("bg learning_rate must be in (0,1)".into()));
        }
        Ok(BgModel {
            params,
            weight: Array3::zeros((params.k, h, w)),
            mean: Array3::zeros((params.k, h, w)),
            var: Array3::from_elem((params.k, h, w), params.initial_variance),
            frames_seen: 0,
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Feed one frame; returns the raw foreground mask (all-background while
    /// still inside the warmup window).
    pub fn update_and_classify(&mut self, frame: &Array2<u8>) -> Result<SegMask> {
        let (h, w) = frame.dim();
        if self.weight.dim().1 != h || self.weight.dim().2 != w {
            return Err(Error::Shape(format!(
                "frame {h}x{w} does not match model {}x{}",
                self.weight.dim().1,
                self.weight.dim().2
            )));
        }
        let p = self.params;
        let alpha = p.learning_rate;
        let match_gate = p.match_sigmas * p.match_sigmas;
        let mut mask = SegMask::zeros((h, w));
        let warmed_up = self.frames_seen >= p.warmup_frames;

        for y in 0..h {
            for x in 0..w {
                let v = frame[[y, x]] as f64;

                if self.frames_seen == 0 {
                    self.weight[[0, y, x]] = 1.0;
                    self.mean[[0, y, x]] = v;
                    continue;
                }

                // best matching component: highest weight/sigma among those
                // within the gate
                let mut best: Option<(usize, f64)> = None;
                for k in 0..p.k {
                    if self.weight[[k, y, x]] <= 0.0 {
                        continue;
                    }
                    let d = v - self.mean[[k, y, x]];
                    if d * d <= match_gate * self.var[[k, y, x]] {
                        let rank = self.weight[[k, y, x]] / self.var[[k, y, x]].sqrt();
                        if best.map(|(_, r)| rank > r).unwrap_or(true) {
                            best = Some((k, rank));
                        }
                    }
                }

                let matched = match best {
                    Some((m, _)) => {
                        for k in 0..p.k {
                            let is_m = f64::from(k == m);
                            self.weight[[k, y, x]] =
                                (1.0 - alpha) * self.weight[[k, y, x]] + alpha * is_m;
                        }
                        // simplified rho = alpha update
                        let mu = self.mean[[m, y, x]];
                        let new_mu = (1.0 - alpha) * mu + alpha * v;
                        let d = v - new_mu;
                        self.mean[[m, y, x]] = new_mu;
                        self.var[[m, y, x]] = ((1.0 - alpha) * self.var[[m, y, x]]
                            + alpha * d * d)
                            .max(p.variance_floor);
                        Some(m)
                    }
                    None => {
                        // replace the weakest component (empty slots first)
                        let mut victim = 0;
                        let mut victim_rank = f64::INFINITY;
                        for k in 0..p.k {
                            let rank = if self.weight[[k, y, x]] <= 0.0 {
                                -1.0
                            } else {
                                self.weight[[k, y, x]] / self.var[[k, y, x]].sqrt()
                            };
                            if rank < victim_rank {
                                victim_rank = rank;
                                victim = k;
                            }
                        }
                        self.weight[[victim, y, x]] = alpha;
                        self.mean[[victim, y, x]] = v;
                        self.var[[victim, y, x]] = p.initial_variance;
                        None
                    }
                };

                // renormalize weights
                let mut sum = 0.0;
                for k in 0..p.k {
                    sum += self.weight[[k, y, x]];
                }
                if sum > 0.0 {
                    for k in 0..p.k {
                        self.weight[[k, y, x]] /= sum;
                    }
                }

                if warmed_up {
                    mask[[y, x]] = u8::from(!self.is_background(matched, y, x));
                }
            }
        }
        self.frames_seen += 1;
        Ok(mask)
    }

    /// Background set: components sorted by weight/sigma, keeping the smallest
    /// prefix whose cumulative weight exceeds `background_weight`.
    fn is_background(&self, matched: Option<usize>, y: usize, x: usize) -> bool {
        let m = match matched {
            Some(m) => m,
            None => return false,
        };
        let p = &self.params;
        let mut order: Vec<usize> = (0..p.k).filter(|&k| self.weight[[k, y, x]] > 0.0).collect();
        order.sort_by(|&a, &b| {
            let ra = self.weight[[a, y, x]] / self.var[[a, y, x]].sqrt();
            let rb = self.weight[[b, y, x]] / self.var[[b, y, x]].sqrt();
            rb.partial_cmp(&ra).unwrap()
        });
        let mut cum = 0.0;
        for &k in &order {
            if k == m {
                return true;
            }
            cum += self.weight[[k, y, x]];
            if cum > p.background_weight {
                return false;
            }
        }
        false
    }

    /// Largest deviation of any pixel's weight sum from 1 (invariant probe).
    pub fn max_weight_sum_error(&self) -> f64 {
        let (k, h, w) = self.weight.dim();
        let mut worst = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..k).map(|c| self.weight[[c, y, x]]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Run the subtractor over a whole fixed-camera sequence.
pub fn bg_subtract_sequence(frames: &[Array2<u8>], params: &BgParams) -> Result<Vec<SegMask>> {
    if frames.len() < params.warmup_frames {
        return Err(Error::SequenceTooShort {
            got: frames.len(),
            need: params.warmup_frames,
            why: "background model warmup".into(),
        });
    }
    let (h, w) = frames[0].dim();
    let mut model = BgModel::new(h, w, *params)?;
    let mut masks = Vec::with_capacity(frames.len());
    for f in frames {
        masks.push(model.update_and_classify(f)?);
    }
    Ok(masks)
}
