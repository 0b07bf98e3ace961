//! Command-line interface: one binary, seven subcommands, a JSON config file
//! per run with flag overrides (flags win). Exit codes: 0 success, 1 runtime
//! failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{
    AblateConfig, AnnotateConfig, AnnotateMode, CameraMotion, DetectConfig, EvalDetConfig,
    EvalSegConfig, GenDataConfig, RunConfig, TrainConfig,
};
use crate::dataio::{self, read_sequence};
use crate::error::{Error, Result};
use crate::types::FrameDetections;
use crate::{annotate, checkpoint, decode, evalkit, trainer, videogen};

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "spotnet",
    version,
    about = "Center-keypoint detector with motion-derived segmentation labels"
)]
pub struct Cli {
    /// JSON config file; each subcommand reads its own section.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override the seed from the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate synthetic sequences with ground truth.
    GenData,
    /// Produce segmentation masks (motion cues intersected with gt boxes).
    Annotate {
        /// fixed = static camera (background model); moving = panning camera (optical flow)
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Train the detector, logging losses and writing checkpoints.
    Train,
    /// Train and evaluate the three ablation rows from one config.
    Ablate,
    /// Run a checkpoint over a sequence and write detections.json.
    Detect,
    /// Score saved detections against ground truth (mAP).
    EvalDet,
    /// Score the attention map against oracle masks (F-measure).
    EvalSeg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ModeArg {
    Fixed,
    Moving,
}

impl From<ModeArg> for AnnotateMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fixed => AnnotateMode::Fixed,
            ModeArg::Moving => AnnotateMode::Moving,
        }
    }
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// Written by every command; a run is reproducible from this file alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// SHA-256 over the config file and every input file, in sorted order.
    pub inputs_hash: String,
    /// The fully resolved section config this run used (flag overrides applied).
    pub resolved_config: serde_json::Value,
}

fn inputs_hash(config_path: &Path, inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(std::fs::read(config_path).map_err(|e| Error::io(config_path, e))?);
    let mut hash_file = |path: &Path| -> Result<()> {
        if let Some(name) = path.file_name() {
            h.update(name.as_encoded_bytes());
        }
        h.update(std::fs::read(path).map_err(|e| Error::io(path, e))?);
        Ok(())
    };
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(*p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in &files {
                hash_file(f)?;
            }
        } else if p.is_file() {
            hash_file(p)?;
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

fn write_manifest<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config_path: &Path,
    seed: u64,
    inputs: &[&Path],
    resolved: &C,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: config_path.to_path_buf(),
        seed,
        out_dir: out_dir.to_path_buf(),
        inputs_hash: inputs_hash(config_path, inputs)?,
        resolved_config: serde_json::to_value(resolved)
            .map_err(|e| Error::json(config_path, e))?,
    };
    dataio::write_json(&out_dir.join("run_manifest.json"), &manifest)
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

enum RunError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Runtime(e)
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!();
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(RunError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> std::result::Result<(), RunError> {
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| RunError::Usage("--config <FILE> is required".into()))?;
    if !config_path.is_file() {
        return Err(RunError::Usage(format!(
            "config file {} not found",
            config_path.display()
        )));
    }
    let cfg = RunConfig::load(config_path)
        .map_err(|e| RunError::Usage(format!("cannot parse config: {e}")))?;

    fn section<T>(s: Option<T>, name: &str) -> std::result::Result<T, RunError> {
        s.ok_or_else(|| RunError::Usage(format!("config has no `{name}` section")))
    }

    match &cli.command {
        Cmd::GenData => Ok(cmd_gen_data(
            section(cfg.gen_data, "gen_data")?,
            cli,
            config_path,
        )?),
        Cmd::Annotate { mode } => Ok(cmd_annotate(
            section(cfg.annotate, "annotate")?,
            *mode,
            cli,
            config_path,
        )?),
        Cmd::Train => Ok(cmd_train(section(cfg.train, "train")?, cli, config_path)?),
        Cmd::Ablate => Ok(cmd_ablate(section(cfg.ablate, "ablate")?, cli, config_path)?),
        Cmd::Detect => Ok(cmd_detect(section(cfg.detect, "detect")?, cli, config_path)?),
        Cmd::EvalDet => Ok(cmd_eval_det(
            section(cfg.eval_det, "eval_det")?,
            cli,
            config_path,
        )?),
        Cmd::EvalSeg => Ok(cmd_eval_seg(
            section(cfg.eval_seg, "eval_seg")?,
            cli,
            config_path,
        )?),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(mut cfg: GenDataConfig, cli: &Cli, config_path: &Path) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.scene.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.scene.validate()?;
    if cfg.n_sequences == 0 {
        return Err(Error::Config("n_sequences must be >= 1".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let dirs: Vec<PathBuf> = (0..cfg.n_sequences)
        .map(|i| cfg.out_dir.join(format!("seq_{i:03}")))
        .collect();
    let n_workers = crate::num_threads().clamp(1, cfg.n_sequences);
    // sequence i is seeded with base seed + i, so the result set is identical
    // regardless of worker count
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n_workers)
            .map(|wk| {
                let dirs = &dirs;
                let scene = &cfg.scene;
                s.spawn(move || -> Result<()> {
                    let mut i = wk;
                    while i < dirs.len() {
                        let mut sc = scene.clone();
                        sc.seed = scene.seed.wrapping_add(i as u64);
                        let seq = videogen::gen_sequence(&sc)?;
                        dataio::write_sequence(&seq, &dirs[i])?;
                        i += n_workers;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gen-data worker panicked"))
            .collect()
    });
    for r in results {
        r?;
    }
    for d in &dirs {
        println!("wrote {} ({} frames)", d.display(), cfg.scene.n_frames);
    }
    write_manifest(&cfg.out_dir, "gen-data", config_path, cfg.scene.seed, &[], &cfg)
}

fn cmd_annotate(
    mut cfg: AnnotateConfig,
    mode: Option<ModeArg>,
    cli: &Cli,
    config_path: &Path,
) -> Result<()> {
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| cfg.seq_dir.clone());
    let seq = read_sequence(&cfg.seq_dir)?;

    if let Some(man) = &seq.manifest {
        let expected = match man.config.camera {
            CameraMotion::None => AnnotateMode::Fixed,
            CameraMotion::Pan { .. } => AnnotateMode::Moving,
        };
        if expected != cfg.mode {
            eprintln!(
                "warning: sequence manifest records camera motion {:?}, which calls for \
                 mode {:?}, but mode {:?} was requested",
                man.config.camera, expected, cfg.mode
            );
        }
    }

    let masks = annotate::annotate_sequence(&seq, &cfg)?;

    // subset invariant: re-intersecting with the gt boxes must change nothing
    let mut violations = 0usize;
    for (t, m) in masks.iter().enumerate() {
        let clipped = annotate::intersect_with_boxes(m, &seq.gt_boxes[t]);
        violations += m
            .iter()
            .zip(clipped.iter())
            .filter(|(a, b)| a != b)
            .count();
    }
    if violations > 0 {
        return Err(Error::Data(format!(
            "subset invariant violated: {violations} foreground pixels outside gt boxes"
        )));
    }

    for (t, m) in masks.iter().enumerate() {
        dataio::save_mask_png(&cfg.seq_dir.join(dataio::annot_name(t)), m)?;
    }
    dataio::write_json(&cfg.seq_dir.join("annot_params.json"), &cfg)?;
    println!(
        "wrote {} masks to {} (subset invariant: ok)",
        masks.len(),
        cfg.seq_dir.display()
    );

    if let Some(oracle) = &seq.oracle_masks {
        let start = match cfg.mode {
            AnnotateMode::Fixed => cfg.bg.warmup_frames.min(masks.len()),
            AnnotateMode::Moving => 0,
        };
        let scored = &masks[start..];
        if !scored.is_empty() {
            let mean: f64 = scored
                .iter()
                .zip(&oracle[start..])
                .map(|(a, b)| mask_iou(a, b))
                .sum::<f64>()
                / scored.len() as f64;
            println!(
                "mean IoU vs oracle over {} post-warmup frames: {mean:.4}",
                scored.len()
            );
        }
    }

    write_manifest(
        &out_dir,
        "annotate",
        config_path,
        cli.seed.unwrap_or(0),
        &[&cfg.seq_dir],
        &cfg,
    )
}

fn mask_iou(a: &crate::types::SegMask, b: &crate::types::SegMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x == 1 || y == 1 {
            union += 1;
            if x == 1 && y == 1 {
                inter += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn cmd_train(mut cfg: TrainConfig, cli: &Cli, config_path: &Path) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let seqs = cfg
        .data_dirs
        .iter()
        .map(|d| read_sequence(d))
        .collect::<Result<Vec<_>>>()?;
    let out = trainer::train::<f32>(&seqs, &cfg)?;
    let first = out.trace.first().expect("n_iters >= 1");
    let last = out.trace.last().expect("n_iters >= 1");
    println!(
        "trained {} iterations: L_tot {:.4} -> {:.4}",
        cfg.n_iters, first.l_tot, last.l_tot
    );
    println!(
        "final checkpoint: {}",
        out.checkpoints.last().expect("final checkpoint").display()
    );
    println!("loss log: {}", out.log_csv.display());
    let inputs: Vec<&Path> = cfg.data_dirs.iter().map(|p| p.as_path()).collect();
    write_manifest(&cfg.out_dir, "train", config_path, cfg.seed, &inputs, &cfg)
}

fn cmd_ablate(mut cfg: AblateConfig, cli: &Cli, config_path: &Path) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.train.validate()?;
    if cfg.eval_seq_dirs.is_empty() {
        return Err(Error::Config("ablate needs eval_seq_dirs".into()));
    }
    let train_seqs = cfg
        .train
        .data_dirs
        .iter()
        .map(|d| read_sequence(d))
        .collect::<Result<Vec<_>>>()?;
    let eval_seqs = cfg
        .eval_seq_dirs
        .iter()
        .map(|d| read_sequence(d))
        .collect::<Result<Vec<_>>>()?;
    let report = trainer::ablate::<f32>(&train_seqs, &eval_seqs, &cfg)?;

    println!(
        "{:<22} {:<10} {:<10} {:>9}  L_tot first -> last",
        "row", "attention", "multitask", "mAP@0.70"
    );
    for r in &report.rows {
        println!(
            "{:<22} {:<10} {:<10} {:>9.4}  {:.4} -> {:.4}",
            r.name,
            if r.attention { "on" } else { "off" },
            if r.multitask { "on" } else { "off" },
            r.map,
            r.initial_loss,
            r.final_loss
        );
    }
    println!(
        "report: {}",
        cfg.out_dir.join("ablation_report.json").display()
    );

    let mut inputs: Vec<&Path> = cfg.train.data_dirs.iter().map(|p| p.as_path()).collect();
    inputs.extend(cfg.eval_seq_dirs.iter().map(|p| p.as_path()));
    write_manifest(
        &cfg.out_dir,
        "ablate",
        config_path,
        cfg.train.seed,
        &inputs,
        &cfg,
    )
}

fn cmd_detect(mut cfg: DetectConfig, cli: &Cli, config_path: &Path) -> Result<()> {
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    let model = checkpoint::load_model::<f32>(&cfg.checkpoint)?;
    let seq = read_sequence(&cfg.seq_dir)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let (dets, _) = trainer::detect_frames(
        &model,
        std::slice::from_ref(&seq),
        cfg.top_k,
        cfg.score_thresh,
    )?;
    let records: Vec<FrameDetections> = dets
        .into_iter()
        .enumerate()
        .map(|(frame, detections)| FrameDetections { frame, detections })
        .collect();
    let path = cfg.out_dir.join("detections.json");
    dataio::write_json(&path, &records)?;
    println!(
        "wrote detections for {} frames to {}",
        records.len(),
        path.display()
    );
    write_manifest(
        &cfg.out_dir,
        "detect",
        config_path,
        cli.seed.unwrap_or(0),
        &[&cfg.checkpoint, &cfg.seq_dir],
        &cfg,
    )
}

fn cmd_eval_det(mut cfg: EvalDetConfig, cli: &Cli, config_path: &Path) -> Result<()> {
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    let records: Vec<FrameDetections> = dataio::read_json(&cfg.detections)?;
    let seq = read_sequence(&cfg.seq_dir)?;
    if records.len() != seq.n_frames() {
        return Err(Error::Data(format!(
            "detections cover {} frames but the sequence has {}",
            records.len(),
            seq.n_frames()
        )));
    }
    let mut dets = vec![Vec::new(); seq.n_frames()];
    for r in records {
        if r.frame >= dets.len() {
            return Err(Error::Data(format!("frame index {} out of range", r.frame)));
        }
        dets[r.frame] = r.detections;
    }
    let (map, curves) =
        evalkit::mean_average_precision(&dets, &seq.gt_boxes, cfg.iou_min, cfg.continuous_ap)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut series = Vec::new();
    let mut per_class = std::collections::BTreeMap::new();
    for (class, curve) in &curves {
        evalkit::write_pr_csv(&cfg.out_dir.join(format!("pr_class{class}.csv")), curve)?;
        per_class.insert(class.to_string(), curve.ap);
        series.push(crate::plot::Series {
            label: format!("class{class}"),
            points: curve.points.clone(),
        });
    }
    crate::plot::line_plot(
        &cfg.out_dir.join("pr_curves.png"),
        &series,
        (0.0, 1.0),
        (0.0, 1.0),
    )?;
    #[derive(Serialize)]
    struct Metrics<'a> {
        map: f64,
        iou_min: f64,
        continuous_ap: bool,
        per_class_ap: &'a std::collections::BTreeMap<String, f64>,
    }
    dataio::write_json(
        &cfg.out_dir.join("metrics.json"),
        &Metrics {
            map,
            iou_min: cfg.iou_min,
            continuous_ap: cfg.continuous_ap,
            per_class_ap: &per_class,
        },
    )?;
    println!("mAP {map:.4}");
    write_manifest(
        &cfg.out_dir,
        "eval-det",
        config_path,
        cli.seed.unwrap_or(0),
        &[&cfg.detections, &cfg.seq_dir],
        &cfg,
    )
}

fn cmd_eval_seg(mut cfg: EvalSegConfig, cli: &Cli, config_path: &Path) -> Result<()> {
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    let model = checkpoint::load_model::<f32>(&cfg.checkpoint)?;
    let seq = read_sequence(&cfg.seq_dir)?;
    let gt_masks = seq.oracle_masks.as_ref().ok_or_else(|| {
        Error::Data(format!(
            "eval-seg needs oracle masks (mask_*.png) in {}",
            cfg.seq_dir.display()
        ))
    })?;

    #[derive(Serialize)]
    struct FrameScore {
        frame: usize,
        precision: f64,
        recall: f64,
        f_measure: f64,
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut per_frame = Vec::new();
    for (t, frame) in seq.frames.iter().enumerate() {
        let input =
            trainer::image_tensor::<f32>(frame, model.config.in_channels).insert_axis(Axis(0));
        let out = model.infer(&input)?;
        let att = out
            .attention
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .mapv(|v| v as f64)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("attention is (1,1,H,W)");
        let mut frame_dets = decode::decode_output(
            &out.heatmap,
            &out.wh,
            &out.offset,
            cfg.top_k,
            cfg.score_thresh,
        )?;
        let pred = evalkit::binarize_and_mask(&att, &frame_dets.remove(0), cfg.threshold);
        let (t_, p_, n_) = evalkit::mask_counts(&pred, &gt_masks[t])?;
        tp += t_;
        fp += p_;
        fn_ += n_;
        let (pr, rc, f) = evalkit::prf_from_counts(t_, p_, n_);
        per_frame.push(FrameScore {
            frame: t,
            precision: pr,
            recall: rc,
            f_measure: f,
        });
    }
    let (precision, recall, f) = evalkit::prf_from_counts(tp, fp, fn_);

    #[derive(Serialize)]
    struct Metrics {
        precision: f64,
        recall: f64,
        f_measure: f64,
        threshold: f64,
        per_frame: Vec<FrameScore>,
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    dataio::write_json(
        &cfg.out_dir.join("metrics.json"),
        &Metrics {
            precision,
            recall,
            f_measure: f,
            threshold: cfg.threshold,
            per_frame,
        },
    )?;
    println!("F-measure {f:.4} (precision {precision:.4}, recall {recall:.4})");
    write_manifest(
        &cfg.out_dir,
        "eval-seg",
        config_path,
        cli.seed.unwrap_or(0),
        &[&cfg.checkpoint, &cfg.seq_dir],
        &cfg,
    )
}
