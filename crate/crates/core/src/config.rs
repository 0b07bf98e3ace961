//! Configuration types. One JSON file drives the whole pipeline; each
//! subcommand reads its own section, and every field has a sensible default so
//! minimal configs stay minimal.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMotion {
    None,
    Pan { dx: f64, dy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    TexturedNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotateMode {
    Fixed,
    Moving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    Bce,
    Mse,
}

/// Synthetic scene description for `gen-data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub object_kinds: Vec<ObjectKind>,
    /// Object side lengths are drawn uniformly from this range (pixels).
    pub size_min: usize,
    pub size_max: usize,
    /// Per-frame object speed range in px/frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub camera: CameraMotion,
    pub background: Background,
    pub n_frames: usize,
    /// Additive Gaussian pixel noise, in 8-bit intensity units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 128,
            width: 128,
            n_objects: 3,
            object_kinds: vec![ObjectKind::Rectangle, ObjectKind::Ellipse],
            size_min: 12,
            size_max: 28,
            speed_min: 1.0,
            speed_max: 2.5,
            camera: CameraMotion::None,
            background: Background::Flat,
            n_frames: 40,
            noise_sigma: 2.0,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image dims {}x{} must be divisible by 4 (network stride)",
                self.height, self.width
            )));
        }
        if self.n_frames < 2 {
            return Err(Error::Config("n_frames must be >= 2".into()));
        }
        if self.size_min < 4 {
            return Err(Error::Config("object sizes must be >= 4 px per side".into()));
        }
        if self.size_max < self.size_min {
            return Err(Error::Config("size_max < size_min".into()));
        }
        if self.size_max * 2 > self.height.min(self.width) {
            return Err(Error::Config("objects too large for the frame".into()));
        }
        if self.object_kinds.is_empty() && self.n_objects > 0 {
            return Err(Error::Config("object_kinds empty with n_objects > 0".into()));
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::Config("bad speed range".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// `gen-data` section: how many sequences and where to put them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub out_dir: PathBuf,
    pub n_sequences: usize,
    pub scene: SceneConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            out_dir: PathBuf::from("data"),
            n_sequences: 1,
            scene: SceneConfig::default(),
        }
    }
}

/// Stauffer–Grimson background-model parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BgParams {
    pub k: usize,
    pub learning_rate: f64,
    pub warmup_frames: usize,
    /// A pixel matches a component when (x-mu)^2 <= match_sigmas^2 * var.
    pub match_sigmas: f64,
    /// Components are background while their cumulative weight <= this.
    pub background_weight: f64,
    pub initial_variance: f64,
    pub variance_floor: f64,
}

impl Default for BgParams {
    fn default() -> Self {
        BgParams {
            k: 3,
            learning_rate: 0.01,
            warmup_frames: 20,
            match_sigmas: 2.5,
            background_weight: 0.7,
            initial_variance: 100.0,
            variance_floor: 16.0,
        }
    }
}

/// Farneback-style dense flow parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub iterations: usize,
    /// Half-width of the polynomial-expansion window.
    pub poly_n: usize,
    pub poly_sigma: f64,
    /// Half-width of the box window that aggregates the flow equations.
    pub aggregate_n: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 3,
            iterations: 3,
            poly_n: 3,
            poly_sigma: 1.2,
            // 7x7 window: wide enough to stabilize the 2x2 solve, narrow
            // enough to keep the motion halo around small objects thin
            aggregate_n: 3,
        }
    }
}

/// `annotate` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    pub seq_dir: PathBuf,
    pub mode: AnnotateMode,
    pub bg: BgParams,
    pub flow: FlowParams,
    /// Residual flow magnitude (px) above which a pixel counts as moving.
    pub mag_threshold: f64,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig {
            seq_dir: PathBuf::from("data/seq_000"),
            mode: AnnotateMode::Fixed,
            bg: BgParams::default(),
            flow: FlowParams::default(),
            mag_threshold: 0.5,
        }
    }
}

/// Network architecture knobs (Table IV axes plus desk-scale sizing).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_stacks: usize,
    pub base_channels: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    pub hourglass_depth: usize,
    pub attention_enabled: bool,
    pub multitask_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_stacks: 2,
            base_channels: 32,
            n_classes: 2,
            in_channels: 3,
            hourglass_depth: 4,
            attention_enabled: true,
            multitask_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stacks < 1 {
            return Err(Error::Config("n_stacks must be >= 1".into()));
        }
        if self.attention_enabled && !self.multitask_enabled {
            return Err(Error::Config(
                "attention_enabled requires multitask_enabled (the attention map \
                 is the segmentation head's output)"
                    .into(),
            ));
        }
        if self.base_channels < 4 || !self.base_channels.is_multiple_of(4) {
            return Err(Error::Config(
                "base_channels must be a positive multiple of 4".into(),
            ));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.hourglass_depth == 0 {
            return Err(Error::Config("hourglass_depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Smallest input side the hourglass can digest: stride-4 stem, then one
    /// halving per depth level, and the bottleneck must keep >= 1 px.
    pub fn min_input_side(&self) -> usize {
        4 * (1 << self.hourglass_depth)
    }
}

/// `train` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data_dirs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub n_iters: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub seg_weight: f64,
    pub wh_weight: f64,
    pub seg_loss: SegLossKind,
    pub grad_clip: f64,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dirs: vec![PathBuf::from("data/seq_000")],
            out_dir: PathBuf::from("runs/train"),
            model: ModelConfig::default(),
            lr: 2.5e-4,
            batch_size: 4,
            n_iters: 2000,
            seed: 0,
            checkpoint_every: 500,
            seg_weight: 1.0,
            wh_weight: 0.1,
            seg_loss: SegLossKind::Bce,
            grad_clip: 10.0,
            flip_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.batch_size == 0 || self.n_iters == 0 {
            return Err(Error::Config("batch_size and n_iters must be >= 1".into()));
        }
        if !(self.seg_weight >= 0.0 && self.wh_weight >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.data_dirs.is_empty() {
            return Err(Error::Config("no data_dirs given".into()));
        }
        Ok(())
    }
}

/// `detect` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub checkpoint: PathBuf,
    pub seq_dir: PathBuf,
    pub out_dir: PathBuf,
    pub top_k: usize,
    pub score_thresh: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            checkpoint: PathBuf::from("runs/train/model.ckpt"),
            seq_dir: PathBuf::from("data/seq_000"),
            out_dir: PathBuf::from("runs/detect"),
            top_k: 100,
            score_thresh: 0.25,
        }
    }
}

/// `eval-det` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalDetConfig {
    pub detections: PathBuf,
    pub seq_dir: PathBuf,
    pub out_dir: PathBuf,
    pub iou_min: f64,
    /// Continuous (area-under-curve) AP instead of 11-point interpolation.
    pub continuous_ap: bool,
}

impl Default for EvalDetConfig {
    fn default() -> Self {
        EvalDetConfig {
            detections: PathBuf::from("runs/detect/detections.json"),
            seq_dir: PathBuf::from("data/seq_000"),
            out_dir: PathBuf::from("runs/eval_det"),
            iou_min: 0.7,
            continuous_ap: false,
        }
    }
}

/// `eval-seg` section: run the net, binarize the attention map, mask with the
/// detected boxes, score against the oracle masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSegConfig {
    pub checkpoint: PathBuf,
    pub seq_dir: PathBuf,
    pub out_dir: PathBuf,
    pub threshold: f64,
    pub top_k: usize,
    pub score_thresh: f64,
}

impl Default for EvalSegConfig {
    fn default() -> Self {
        EvalSegConfig {
            checkpoint: PathBuf::from("runs/train/model.ckpt"),
            seq_dir: PathBuf::from("data/seq_000"),
            out_dir: PathBuf::from("runs/eval_seg"),
            threshold: 0.5,
            top_k: 100,
            score_thresh: 0.25,
        }
    }
}

/// `ablate` section: three Table-IV-shaped rows off one base config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub train: TrainConfig,
    pub eval_seq_dirs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub iou_min: f64,
    pub top_k: usize,
    pub score_thresh: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            train: TrainConfig::default(),
            eval_seq_dirs: vec![PathBuf::from("data/seq_000")],
            out_dir: PathBuf::from("runs/ablate"),
            iou_min: 0.7,
            top_k: 100,
            score_thresh: 0.25,
        }
    }
}

/// The whole config file; each subcommand reads its own section.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen_data: Option<GenDataConfig>,
    pub annotate: Option<AnnotateConfig>,
    pub train: Option<TrainConfig>,
    pub ablate: Option<AblateConfig>,
    pub detect: Option<DetectConfig>,
    pub eval_det: Option<EvalDetConfig>,
    pub eval_seg: Option<EvalSegConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
