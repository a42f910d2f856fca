//! Run orchestration: dataset generation, the training and evaluation
//! loops, ablation sweeps, the whole-model gradient check, and kernel
//! micro-benchmarks.
//!
//! Every command here is deterministic under (config, seed): reports
//! exclude wall-clock (timing goes to its own artifact), collections are
//! ordered, and the orchestration loops are sequential — parallelism
//! lives inside the tensor kernels, which write disjoint output chunks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::detect::BoxRecord;
use crate::error::{Error, Result};
use crate::geometry::lift_splat;
use crate::lgaft::{adaptive_weights, expand_channels, lgaft_fuse, LgaftParams, Modality};
use crate::metrics::average_precision;
use crate::model::Model;
use crate::msdpt::{window_self_attention, MsdptParams};
use crate::par;
use crate::scenegen::{generate_scene, load_scene, save_scene, Frame};
use crate::sparse::{sparse_conv3d, voxelize, VoxelizationConfig};
use crate::tensor::{
    checkpoint_bytes, fd, file_sha256, load_checkpoint, sha256_hex, Adam, AdamConfig, ParamInit,
    Registry, Tensor,
};

/// Central-difference step for the whole-model gradient check.
pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Pass threshold on the worst per-parameter relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

// ---------------------------------------------------------------- reports

/// Loss terms recorded at one optimizer step.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub scene: usize,
    pub frame: u64,
    pub detection: f64,
    pub depth: f64,
    pub occupancy: f64,
    pub total: f64,
}

/// Deterministic summary of one train or eval run. Identical (config,
/// seed) must produce byte-identical serialized reports, so wall-clock
/// lives in [`TimingReport`] instead.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_scenes: usize,
    pub n_frames: usize,
    pub param_count: usize,
    /// Empty for eval runs.
    pub steps: Vec<StepLoss>,
    pub ap_per_class: BTreeMap<usize, f64>,
    pub mean_ap: f64,
    pub checkpoint_sha256: String,
}

/// Wall-clock side channel, deliberately separate from [`RunReport`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingReport {
    pub wall_ms: u128,
    pub steps: usize,
}

/// Mean of the detection term over a slice of step records.
pub fn mean_detection(steps: &[StepLoss]) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    steps.iter().map(|s| s.detection).sum::<f64>() / steps.len() as f64
}

/// Serialize a value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: "json",
        details: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the per-step losses as CSV for external plotting.
pub fn write_losses_csv(path: &Path, steps: &[StepLoss]) -> Result<()> {
    let mut text = String::from("step,scene,frame,detection,depth,occupancy,total\n");
    for s in steps {
        text += &format!(
            "{},{},{},{},{},{},{}\n",
            s.step, s.scene, s.frame, s.detection, s.depth, s.occupancy, s.total
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------- dataset

/// Generate the configured scene set in memory.
pub fn generate_dataset(cfg: &PipelineConfig) -> Result<Vec<Vec<Frame>>> {
    (0..cfg.scenes)
        .map(|i| generate_scene(&cfg.scene_config(i as u64)))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenSummary {
    pub config_hash: String,
    pub scenes: usize,
    pub frames: usize,
    pub boxes: usize,
    pub points: usize,
}

/// Generate the scene set and write one `scene_NNNN/` directory per
/// scene plus a `gen.json` summary.
pub fn generate_to_dir(cfg: &PipelineConfig, out: &Path) -> Result<GenSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut summary = GenSummary {
        config_hash: cfg.hash(),
        scenes: cfg.scenes,
        frames: 0,
        boxes: 0,
        points: 0,
    };
    for i in 0..cfg.scenes {
        let sc = cfg.scene_config(i as u64);
        let frames = generate_scene(&sc)?;
        summary.frames += frames.len();
        summary.boxes += frames.iter().map(|f| f.gt_boxes.len()).sum::<usize>();
        summary.points += frames.iter().map(|f| f.points.len()).sum::<usize>();
        save_scene(&out.join(format!("scene_{i:04}")), &sc, &frames)?;
    }
    write_json(&out.join("gen.json"), &summary)?;
    Ok(summary)
}

/// Load every `scene_*` subdirectory of a dataset directory, in name
/// order.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<Vec<Frame>>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut scene_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    scene_dirs.sort();
    if scene_dirs.is_empty() {
        return Err(Error::contract(
            "load_dataset",
            format!("no scene_* directories under {}", dir.display()),
        ));
    }
    scene_dirs
        .iter()
        .map(|d| load_scene(d).map(|(_, frames)| frames))
        .collect()
}

// ---------------------------------------------------------------- training

pub struct TrainResult {
    pub model: Model,
    pub report: RunReport,
    pub evaluation: Evaluation,
    /// Serialized final parameters; hash matches `report.checkpoint_sha256`.
    pub checkpoint: Vec<u8>,
    pub timing: TimingReport,
}

/// Optimize the configured stage's parameters for `cfg.steps` steps (one
/// frame per step, cycling over scenes in order, temporal history reset
/// at every scene start), then score the trained model on the same
/// frames.
pub fn train(
    cfg: &PipelineConfig,
    scenes: &[Vec<Frame>],
    mut on_step: impl FnMut(&StepLoss),
) -> Result<TrainResult> {
    let start = Instant::now();
    let total_frames: usize = scenes.iter().map(|s| s.len()).sum();
    if total_frames == 0 {
        return Err(Error::contract("train", "dataset has no frames"));
    }
    let model = Model::new(cfg)?;
    let trainable = model.trainable_parameters();
    if trainable.is_empty() {
        return Err(Error::Config(format!(
            "stage `{}` selects no parameters",
            cfg.stage
        )));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let mut steps = Vec::with_capacity(cfg.steps);
    let mut step = 0;
    'training: loop {
        for (scene_idx, scene) in scenes.iter().enumerate() {
            let mut buf = model.new_buffer()?;
            for frame in scene {
                if step == cfg.steps {
                    break 'training;
                }
                model.registry.zero_grads();
                let out = model.run(frame, &buf)?;
                out.total_loss.backward()?;
                adam.step(&trainable)?;
                let rec = StepLoss {
                    step,
                    scene: scene_idx,
                    frame: frame.frame_id,
                    detection: out.detection_loss.item()?,
                    depth: out.depth_loss.item()?,
                    occupancy: out.occupancy_loss.item()?,
                    total: out.total_loss.item()?,
                };
                on_step(&rec);
                steps.push(rec);
                buf.push(frame.frame_id, frame.ego.clone(), out.history)?;
                step += 1;
            }
        }
    }

    let checkpoint = checkpoint_bytes(&model.registry.parameters())?;
    let evaluation = evaluate_model(&model, scenes)?;
    let report = RunReport {
        command: "train".into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        n_scenes: scenes.len(),
        n_frames: total_frames,
        param_count: model.param_count(),
        steps,
        ap_per_class: evaluation.ap_per_class.clone(),
        mean_ap: evaluation.mean_ap,
        checkpoint_sha256: sha256_hex(&checkpoint),
    };
    let timing = TimingReport {
        wall_ms: start.elapsed().as_millis(),
        steps: cfg.steps,
    };
    Ok(TrainResult {
        model,
        report,
        evaluation,
        checkpoint,
        timing,
    })
}

// -------------------------------------------------------------- evaluation

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<BoxRecord>,
    pub ground_truth: Vec<BoxRecord>,
    pub ap_per_class: BTreeMap<usize, f64>,
    pub mean_ap: f64,
}

/// Frame key for matching predictions to ground truth across scenes.
fn dataset_frame_id(scene_idx: usize, frame_idx: usize) -> u64 {
    (scene_idx as u64) << 32 | frame_idx as u64
}

/// Decode and score every frame with the model as-is. Scenes run in
/// order; temporal history threads through each scene exactly as in
/// training.
pub fn evaluate_model(model: &Model, scenes: &[Vec<Frame>]) -> Result<Evaluation> {
    let mut predictions = Vec::new();
    let mut ground_truth = Vec::new();
    for (scene_idx, scene) in scenes.iter().enumerate() {
        let mut buf = model.new_buffer()?;
        for (frame_idx, frame) in scene.iter().enumerate() {
            let out = model.run(frame, &buf)?;
            let id = dataset_frame_id(scene_idx, frame_idx);
            for b in model.decode_frame(&out.prediction)? {
                predictions.push(BoxRecord::from_box(id, &b));
            }
            for b in &frame.gt_boxes {
                ground_truth.push(BoxRecord::from_box(id, b));
            }
            buf.push(frame.frame_id, frame.ego.clone(), out.history)?;
        }
    }
    let iou = model.config().iou_thresh;
    let ap_per_class = average_precision(&predictions, &ground_truth, iou)?;
    let gt_classes: std::collections::BTreeSet<usize> =
        ground_truth.iter().map(|g| g.class).collect();
    let mean_ap = if gt_classes.is_empty() {
        0.0
    } else {
        gt_classes.iter().map(|c| ap_per_class[c]).sum::<f64>() / gt_classes.len() as f64
    };
    Ok(Evaluation {
        predictions,
        ground_truth,
        ap_per_class,
        mean_ap,
    })
}

#[derive(Debug)]
pub struct EvalResult {
    pub report: RunReport,
    pub evaluation: Evaluation,
    pub timing: TimingReport,
}

/// Score a stored checkpoint on a scene set.
pub fn evaluate(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    scenes: &[Vec<Frame>],
) -> Result<EvalResult> {
    let start = Instant::now();
    let model = Model::new(cfg)?;
    let values = load_checkpoint(checkpoint)?;
    model.registry.load_values(&values)?;
    let evaluation = evaluate_model(&model, scenes)?;
    let report = RunReport {
        command: "eval".into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        n_scenes: scenes.len(),
        n_frames: scenes.iter().map(|s| s.len()).sum(),
        param_count: model.param_count(),
        steps: Vec::new(),
        ap_per_class: evaluation.ap_per_class.clone(),
        mean_ap: evaluation.mean_ap,
        checkpoint_sha256: file_sha256(checkpoint)?,
    };
    let timing = TimingReport {
        wall_ms: start.elapsed().as_millis(),
        steps: 0,
    };
    Ok(EvalResult {
        report,
        evaluation,
        timing,
    })
}

// ---------------------------------------------------------------- ablation

/// One sweep dimension: guidance toggles, fusion strategy, or attention
/// pyramid depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Guidance,
    Strategy,
    Scales,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [
        AblationAxis::Guidance,
        AblationAxis::Strategy,
        AblationAxis::Scales,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Guidance => "guidance",
            AblationAxis::Strategy => "strategy",
            AblationAxis::Scales => "scales",
        }
    }

    pub fn parse(s: &str) -> Result<AblationAxis> {
        match s {
            "guidance" => Ok(AblationAxis::Guidance),
            "strategy" => Ok(AblationAxis::Strategy),
            "scales" => Ok(AblationAxis::Scales),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected guidance, strategy, or scales)"
            ))),
        }
    }

    /// The config variants this axis sweeps, as (label, config) pairs.
    fn variants(&self, base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
        match self {
            AblationAxis::Guidance => [
                (false, false, "none"),
                (true, false, "sdg"),
                (false, true, "log"),
                (true, true, "sdg+log"),
            ]
            .iter()
            .map(|&(sdg, log, label)| {
                let mut c = base.clone();
                c.sdg = sdg;
                c.log = log;
                (label.to_string(), c)
            })
            .collect(),
            AblationAxis::Strategy => crate::config::STRATEGIES
                .iter()
                .map(|&s| {
                    let mut c = base.clone();
                    c.lgaft_strategy = s.to_string();
                    (s.to_string(), c)
                })
                .collect(),
            AblationAxis::Scales => (1..=4)
                .map(|n| {
                    let mut c = base.clone();
                    c.msdpt = true;
                    c.msdpt_scales = n;
                    (n.to_string(), c)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub label: String,
    pub config_hash: String,
    pub mean_ap: f64,
    /// Mean detection loss over the final epoch.
    pub final_detection_loss: f64,
    pub final_total_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Human-readable companion to the JSON table. Differences between
    /// rows are reported for inspection, never asserted — at this scale
    /// noise can invert small gaps.
    pub fn markdown(&self) -> String {
        let mut out = String::from(
            "# Ablation results\n\nMean AP at the configured IoU threshold on the training \
             frames; detection\nloss is averaged over the final epoch. Row differences are \
             reported for\ninspection — toy-scale noise can invert small gaps.\n",
        );
        for axis in AblationAxis::ALL {
            let rows: Vec<&AblationRow> = self
                .rows
                .iter()
                .filter(|r| r.axis == axis.name())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let title = match axis {
                AblationAxis::Guidance => "Depth hints and occupancy gating",
                AblationAxis::Strategy => "Fusion strategy",
                AblationAxis::Scales => "Attention pyramid depth",
            };
            out += &format!(
                "\n## {title}\n\n| variant | mean AP | final detection loss |\n|---|---:|---:|\n"
            );
            for r in &rows {
                out += &format!(
                    "| {} | {:.4} | {:.4} |\n",
                    r.label, r.mean_ap, r.final_detection_loss
                );
            }
            let (first, last) = (rows[0], rows[rows.len() - 1]);
            if rows.len() > 1 {
                out += &format!(
                    "\nmean AP `{}` − `{}`: {:+.4}\n",
                    last.label,
                    first.label,
                    last.mean_ap - first.mean_ap
                );
            }
        }
        out
    }
}

/// Re-train and score one configuration per variant along each requested
/// axis, on one shared dataset generated from the base config.
pub fn ablate(
    cfg: &PipelineConfig,
    axes: &[AblationAxis],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let scenes = generate_dataset(cfg)?;
    let epoch: usize = scenes.iter().map(|s| s.len()).sum();
    let mut rows = Vec::new();
    for axis in axes {
        for (label, variant) in axis.variants(cfg) {
            let result = train(&variant, &scenes, |_| {})?;
            let tail = &result.report.steps[result.report.steps.len().saturating_sub(epoch)..];
            let row = AblationRow {
                axis: axis.name().to_string(),
                label,
                config_hash: variant.hash(),
                mean_ap: result.report.mean_ap,
                final_detection_loss: mean_detection(tail),
                final_total_loss: if tail.is_empty() {
                    0.0
                } else {
                    tail.iter().map(|s| s.total).sum::<f64>() / tail.len() as f64
                },
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(AblationTable { rows })
}

// ------------------------------------------------------------- grad check

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Seed actually used (the first one whose streams are all live).
    pub seed: u64,
    pub param_count: usize,
    pub scalars_checked: usize,
    /// Parameters outside the active graph (e.g. unused fusion
    /// baselines); both gradient sides are exactly zero for them.
    pub dead_params: Vec<String>,
    pub worst_param: String,
    pub max_rel_err: f64,
    pub step_size: f64,
    pub loss: f64,
    pub passed: bool,
}

/// Find the first seed at or above `cfg.seed` whose generated scene
/// keeps every stream live: nonzero LiDAR BEV features, nonzero camera
/// volume, and at least one ground-truth box inside the grid. Tiny
/// configs can lose a stream to ReLU die-off on unlucky draws, which
/// would make a gradient check vacuous.
pub fn find_live_instance(
    cfg: &PipelineConfig,
    tries: u64,
) -> Result<(PipelineConfig, Model, Vec<Vec<Frame>>)> {
    let alive = |t: &Tensor| t.values().iter().any(|v| v.abs() > 1e-9);
    for offset in 0..tries {
        let mut candidate = cfg.clone();
        candidate.seed = cfg.seed + offset;
        let model = Model::new(&candidate)?;
        let scenes = generate_dataset(&candidate)?;
        let frame = match scenes.first().and_then(|s| s.first()) {
            Some(f) => f,
            None => return Err(Error::contract("find_live_instance", "empty dataset")),
        };
        let f_lb = model.lidar_bev(frame)?;
        let hints = model.lidar_depth(frame);
        let (vol, _) = model.camera_volume(frame, &hints)?;
        let grid = model.grid();
        let boxed = frame
            .gt_boxes
            .iter()
            .any(|b| grid.voxel_index(&[b.center.0, b.center.1, b.center.2]).is_some());
        if alive(&f_lb.values) && alive(&vol.values) && boxed {
            return Ok((candidate, model, scenes));
        }
    }
    Err(Error::Generation(format!(
        "no live seed in {}..{}",
        cfg.seed,
        cfg.seed + tries
    )))
}

/// Compare the reverse-mode gradient of the total loss against central
/// finite differences over every parameter scalar, perturbing the live
/// registry values in place and re-running the forward pass.
///
/// The check runs at a jittered parameter point, not the raw init: empty
/// BEV cells are exactly zero, and with zero-initialized biases they stay
/// exactly zero up to each ReLU, parking the loss on a kink where central
/// differences measure the average one-sided slope instead of the
/// derivative. A deterministic offset of at least `0.01` (two orders above
/// the probe step) per scalar moves evaluation to a generic point.
pub fn grad_check(cfg: &PipelineConfig) -> Result<GradCheckReport> {
    let (live_cfg, model, scenes) = find_live_instance(cfg, 256)?;
    let frame = &scenes[0][0];
    let buf = model.new_buffer()?;

    let mut rng = ChaCha8Rng::seed_from_u64(live_cfg.seed ^ 0xA5A5_5A5A);
    for p in model.registry.parameters() {
        let jittered: Vec<f64> = p
            .tensor()
            .to_vec()
            .into_iter()
            .map(|v| {
                let mag = rng.random_range(0.01..=0.05);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                v + sign * mag
            })
            .collect();
        p.tensor().set_values(jittered)?;
    }

    model.registry.zero_grads();
    let out = model.run(frame, &buf)?;
    let loss = out.total_loss.item()?;
    out.total_loss.backward()?;
    let params = model.registry.parameters();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.tensor()
                .grad()
                .unwrap_or_else(|| vec![0.0; p.tensor().len()])
        })
        .collect();

    let mut scalars_checked = 0;
    let mut dead_params = Vec::new();
    let mut worst = (0.0f64, String::new());
    for (p, a) in params.iter().zip(&analytic) {
        let base = p.tensor().to_vec();
        let mut numeric = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + GRAD_CHECK_STEP;
            p.tensor().set_values(probe)?;
            let up = model.run(frame, &buf)?.total_loss.item()?;
            let mut probe = base.clone();
            probe[i] = base[i] - GRAD_CHECK_STEP;
            p.tensor().set_values(probe)?;
            let down = model.run(frame, &buf)?.total_loss.item()?;
            numeric[i] = (up - down) / (2.0 * GRAD_CHECK_STEP);
        }
        p.tensor().set_values(base)?;
        scalars_checked += numeric.len();

        let magnitude = a
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if magnitude < 1e-9 {
            dead_params.push(p.name().to_string());
            continue;
        }
        let err = fd::max_rel_err(a, &numeric);
        if err > worst.0 {
            worst = (err, p.name().to_string());
        }
    }
    dead_params.sort();

    Ok(GradCheckReport {
        seed: live_cfg.seed,
        param_count: model.param_count(),
        scalars_checked,
        dead_params,
        worst_param: worst.1,
        max_rel_err: worst.0,
        step_size: GRAD_CHECK_STEP,
        loss,
        passed: worst.0 < GRAD_CHECK_TOL,
    })
}

// ------------------------------------------------------------------ bench

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchEntry {
    pub name: String,
    pub iterations: usize,
    pub sequential_ns: f64,
    pub parallel_ns: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    /// False when the crate was built without the `parallel` feature; the
    /// two timing columns then measure the same sequential code.
    pub parallel_available: bool,
    pub entries: Vec<BenchEntry>,
}

fn time_ns(mut f: impl FnMut() -> Result<()>, iterations: usize) -> Result<f64> {
    f()?; // warmup
    let t0 = Instant::now();
    for _ in 0..iterations {
        f()?;
    }
    Ok(t0.elapsed().as_nanos() as f64 / iterations as f64)
}

fn bench_entry(
    name: &str,
    iterations: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<BenchEntry> {
    par::set_parallel(false);
    let sequential = time_ns(&mut f, iterations);
    par::set_parallel(true);
    let sequential_ns = sequential?;
    let parallel_ns = time_ns(&mut f, iterations)?;
    Ok(BenchEntry {
        name: name.to_string(),
        iterations,
        sequential_ns,
        parallel_ns,
    })
}

/// Time the four hottest kernels at the configured scale, in sequential
/// and rayon mode. All inputs are deterministic draws, so repeated runs
/// time the same arithmetic.
pub fn bench(cfg: &PipelineConfig, iterations: usize) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::contract("bench", "iterations must be nonzero"));
    }
    cfg.validate()?;
    let grid = cfg.grid();
    let vol = cfg.volume_config();
    let frames = generate_scene(&cfg.scene_config(0))?;
    let frame = &frames[0];
    let mut reg = Registry::new(cfg.seed);
    let xavier = |fan_in: usize, fan_out: usize| ParamInit::XavierUniform { fan_in, fan_out };

    let mut entries = Vec::new();

    let vox = voxelize(&frame.points, &VoxelizationConfig::from_grid(&grid, 32))?;
    let k3 = cfg.chain_kernel.pow(3);
    let w_conv = reg.param(
        "bench.conv",
        &[k3, vox.channels(), cfg.chain_widths[0]],
        xavier(k3 * vox.channels(), cfg.chain_widths[0]),
    )?;
    entries.push(bench_entry("sparse_conv3d", iterations, || {
        sparse_conv3d(&vox, &w_conv, 1, true).map(|_| ())
    })?);

    let (hf, wf) = (
        cfg.image_h / crate::camera::FEATURE_STRIDE,
        cfg.image_w / crate::camera::FEATURE_STRIDE,
    );
    let feat = reg.param(
        "bench.lift.feat",
        &[cfg.mix_channels, hf, wf],
        xavier(cfg.mix_channels, hf * wf),
    )?;
    let dist = reg
        .param(
            "bench.lift.logits",
            &[cfg.depth_bins, hf, wf],
            xavier(cfg.depth_bins, hf * wf),
        )?
        .softmax(0)?
        .detach();
    let bins = cfg.camera_config().bins;
    let cam = frame.cameras[0].clone();
    entries.push(bench_entry("lift_splat", iterations, || {
        lift_splat(&feat, &dist, &cam, &bins, &grid, &vol).map(|_| ())
    })?);

    let (bev_w, bev_h) = grid.bev_dims();
    let dpt = MsdptParams::create(&mut reg, "bench.dpt", &cfg.msdpt_config(), cfg.mix_channels)?;
    let slice = reg.param(
        "bench.dpt.slice",
        &[cfg.mix_channels, bev_h, bev_w],
        xavier(cfg.mix_channels, bev_h * bev_w),
    )?;
    let window = cfg.msdpt_config().window;
    entries.push(bench_entry("window_attention", iterations, || {
        window_self_attention(&slice, &dpt.blocks[0], &window).map(|_| ())
    })?);

    let fuse = LgaftParams::create(
        &mut reg,
        "bench.fuse",
        cfg.bev_channels,
        cfg.bev_channels,
        (bev_h, bev_w),
        &cfg.lgaft_config(),
    )?;
    let bev_of = |t: Tensor| crate::grid::BevGrid::new(t, grid.x_min, grid.y_min, grid.bev_cell());
    let f_lb = bev_of(reg.param(
        "bench.fuse.lidar",
        &[cfg.bev_channels, bev_h, bev_w],
        xavier(cfg.bev_channels, bev_h * bev_w),
    )?)?;
    let f_cb = bev_of(reg.param(
        "bench.fuse.camera",
        &[cfg.bev_channels, bev_h, bev_w],
        xavier(cfg.bev_channels, bev_h * bev_w),
    )?)?;
    let l = expand_channels(&f_lb, Modality::Lidar, &fuse)?;
    let c = expand_channels(&f_cb, Modality::Camera, &fuse)?;
    let wf_gate = adaptive_weights(&l, &c, &fuse)?;
    entries.push(bench_entry("lgaft_fuse", iterations, || {
        lgaft_fuse(&l, &c, &wf_gate, &fuse.pos, &fuse).map(|_| ())
    })?);

    Ok(BenchReport {
        parallel_available: cfg!(feature = "parallel"),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> PipelineConfig {
        PipelineConfig {
            steps: 2,
            ..PipelineConfig::micro()
        }
    }

    #[test]
    fn train_is_bit_deterministic() {
        let (cfg, _, scenes) = find_live_instance(&quick_cfg(), 256).unwrap();
        let a = train(&cfg, &scenes, |_| {}).unwrap();
        let b = train(&cfg, &scenes, |_| {}).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.report, b.report);
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        assert_eq!(a.report.steps.len(), 2);
        assert!(a.report.steps.iter().all(|s| s.total.is_finite()));
    }

    #[test]
    fn train_then_eval_roundtrip() {
        let (cfg, _, scenes) = find_live_instance(&quick_cfg(), 256).unwrap();
        let trained = train(&cfg, &scenes, |_| {}).unwrap();

        let dir = std::env::temp_dir().join(format!("bf-eval-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("model.ckpt");
        std::fs::write(&ckpt, &trained.checkpoint).unwrap();

        let eval = evaluate(&cfg, &ckpt, &scenes).unwrap();
        assert_eq!(eval.report.command, "eval");
        assert_eq!(eval.report.checkpoint_sha256, trained.report.checkpoint_sha256);
        // same parameters, same frames: scores must agree with the
        // trainer's own final evaluation
        assert_eq!(eval.report.mean_ap, trained.report.mean_ap);
        assert_eq!(
            eval.evaluation.ground_truth.len(),
            scenes.iter().flatten().map(|f| f.gt_boxes.len()).sum::<usize>()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_checkpoint_is_an_io_error() {
        let cfg = quick_cfg();
        let scenes = generate_dataset(&cfg).unwrap();
        let err = evaluate(&cfg, Path::new("/nonexistent/model.ckpt"), &scenes).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "got {err:?}");
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let cfg = PipelineConfig {
            scenes: 2,
            frames: 2,
            ..PipelineConfig::micro()
        };
        let dir = std::env::temp_dir().join(format!("bf-gen-{}", std::process::id()));
        let summary = generate_to_dir(&cfg, &dir).unwrap();
        assert_eq!(summary.scenes, 2);
        assert_eq!(summary.frames, 4);

        let loaded = load_dataset_dir(&dir).unwrap();
        let fresh = generate_dataset(&cfg).unwrap();
        assert_eq!(loaded.len(), 2);
        for (l, f) in loaded.iter().flatten().zip(fresh.iter().flatten()) {
            assert_eq!(l.frame_id, f.frame_id);
            assert_eq!(l.points, f.points);
            assert_eq!(*l.images.values(), *f.images.values());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ablate_strategy_axis_completes() {
        let (cfg, _, _) = find_live_instance(
            &PipelineConfig {
                steps: 1,
                ..PipelineConfig::micro()
            },
            256,
        )
        .unwrap();
        let mut seen = Vec::new();
        let table = ablate(&cfg, &[AblationAxis::Strategy], |r| {
            seen.push(r.label.clone())
        })
        .unwrap();
        assert_eq!(seen, ["add", "concat", "lgft", "lgaft"]);
        assert_eq!(table.rows.len(), 4);
        assert!(table.rows.iter().all(|r| r.final_detection_loss.is_finite()));
        let md = table.markdown();
        assert!(md.contains("| concat |"), "{md}");
    }

    #[test]
    fn grad_check_micro_passes() {
        let report = grad_check(&PipelineConfig::micro()).unwrap();
        assert!(
            report.passed,
            "worst {} at {} (checked {} scalars)",
            report.max_rel_err, report.worst_param, report.scalars_checked
        );
        assert!(report.param_count <= 200, "{} params", report.param_count);
        assert_eq!(report.scalars_checked, report.param_count);
    }

    #[test]
    fn bench_smoke() {
        let report = bench(&PipelineConfig::micro(), 1).unwrap();
        assert_eq!(report.entries.len(), 4);
        assert!(report
            .entries
            .iter()
            .all(|e| e.sequential_ns > 0.0 && e.parallel_ns > 0.0));
        assert!(par::parallel_enabled());
    }
}
