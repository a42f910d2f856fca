//! Center-heatmap detection head over the fused BEV map: a small conv
//! encoder with sigmoid heatmap and linear regression heads, CenterPoint
//! -style target assignment (gaussian peaks, per-center regression), the
//! focal + L1 training loss, and peak decoding back to boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BevGrid, GridConfig};
use crate::tensor::{ParamInit, Registry, Tensor};

/// Regression layout per center cell:
/// (dx, dy, z, log l, log w, log h, sin yaw, cos yaw).
pub const REGRESSION_CHANNELS: usize = 8;

const HEAT_EPS: f64 = 1e-12;

/// An oriented box: `size = (l, w, h)` with `l` along the heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: (f64, f64, f64),
    pub size: (f64, f64, f64),
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    pub fn new(
        center: (f64, f64, f64),
        size: (f64, f64, f64),
        yaw: f64,
        class_id: usize,
        score: f64,
    ) -> Result<Box3D> {
        if size.0 <= 0.0 || size.1 <= 0.0 || size.2 <= 0.0 {
            return Err(Error::contract("box3d", format!("size {size:?} must be positive")));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::contract("box3d", format!("score {score} outside [0,1]")));
        }
        let vals = [center.0, center.1, center.2, yaw];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("box3d", "non-finite geometry"));
        }
        Ok(Box3D {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id,
            score,
        })
    }

    /// Footprint corners in BEV, counter-clockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size.0 / 2.0, self.size.1 / 2.0);
        let rot = |dx: f64, dy: f64| {
            (
                self.center.0 + c * dx - s * dy,
                self.center.1 + s * dx + c * dy,
            )
        };
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }
}

/// Wrap into (−π, π].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut y = yaw.rem_euclid(2.0 * std::f64::consts::PI);
    if y > std::f64::consts::PI {
        y -= 2.0 * std::f64::consts::PI;
    }
    y
}

/// Dense per-cell detection maps — either training targets or raw head
/// outputs. Heatmap entries live in [0,1].
#[derive(Clone, Debug)]
pub struct DetectionTargets {
    pub heatmap: Tensor,
    pub regression: Tensor,
}

impl DetectionTargets {
    pub fn new(heatmap: Tensor, regression: Tensor) -> Result<DetectionTargets> {
        if heatmap.rank() != 3 || regression.rank() != 3 {
            return Err(Error::dim(
                "detection_targets",
                format!(
                    "expected heatmap[K×H×W] and regression[R×H×W], got {:?}, {:?}",
                    heatmap.shape(),
                    regression.shape()
                ),
            ));
        }
        if regression.shape()[0] != REGRESSION_CHANNELS
            || heatmap.shape()[1..] != regression.shape()[1..]
        {
            return Err(Error::dim(
                "detection_targets",
                format!(
                    "regression {:?} must be [{REGRESSION_CHANNELS}×H×W] matching heatmap {:?}",
                    regression.shape(),
                    heatmap.shape()
                ),
            ));
        }
        if heatmap.to_vec().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract(
                "detection_targets",
                "heatmap values must lie in [0,1]",
            ));
        }
        Ok(DetectionTargets { heatmap, regression })
    }

    pub fn num_classes(&self) -> usize {
        self.heatmap.shape()[0]
    }
}

/// Learnable state of the head: two 3×3 encoder convs and the two 1×1
/// output heads. The heatmap bias starts negative so early sigmoid
/// outputs sit near zero (almost every cell is background).
#[derive(Clone, Debug)]
pub struct DetectParams {
    pub enc1: Tensor,
    pub enc2: Tensor,
    pub heat: (Tensor, Tensor),
    pub reg: (Tensor, Tensor),
}

impl DetectParams {
    pub fn create(
        reg: &mut Registry,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        num_classes: usize,
    ) -> Result<DetectParams> {
        if hidden == 0 || num_classes == 0 {
            return Err(Error::Config("head widths must be nonzero".into()));
        }
        let conv = |reg: &mut Registry, name: String, c_in: usize, c_out: usize, k: usize| {
            reg.param(
                &name,
                &[c_out, c_in, k, k],
                ParamInit::XavierUniform {
                    fan_in: c_in * k * k,
                    fan_out: c_out * k * k,
                },
            )
        };
        Ok(DetectParams {
            enc1: conv(reg, format!("{prefix}.enc1"), in_channels, hidden, 3)?,
            enc2: conv(reg, format!("{prefix}.enc2"), hidden, hidden, 3)?,
            heat: (
                conv(reg, format!("{prefix}.heat.w"), hidden, num_classes, 1)?,
                reg.param(
                    &format!("{prefix}.heat.b"),
                    &[num_classes],
                    ParamInit::Constant(-2.19),
                )?,
            ),
            reg: (
                conv(reg, format!("{prefix}.reg.w"), hidden, REGRESSION_CHANNELS, 1)?,
                reg.param(
                    &format!("{prefix}.reg.b"),
                    &[REGRESSION_CHANNELS],
                    ParamInit::Constant(0.0),
                )?,
            ),
        })
    }
}

/// Run the head. Spatial shape is preserved; heatmap channels pass
/// through a sigmoid, regression channels stay linear.
pub fn head_forward(bev: &BevGrid, params: &DetectParams) -> Result<DetectionTargets> {
    let enc = bev
        .values
        .conv2d(&params.enc1, 1, 1)?
        .relu()?
        .conv2d(&params.enc2, 1, 1)?
        .relu()?;
    let k = params.heat.1.shape()[0];
    let heat = enc
        .conv2d(&params.heat.0, 1, 0)?
        .add_bcast(&params.heat.1.reshape(&[k, 1, 1])?)?
        .sigmoid()?;
    let reg = enc
        .conv2d(&params.reg.0, 1, 0)?
        .add_bcast(&params.reg.1.reshape(&[REGRESSION_CHANNELS, 1, 1])?)?;
    DetectionTargets::new(heat, reg)
}

/// Gaussian splat radius (in cells) from a box footprint: one sixth of
/// the footprint diagonal, floored at half a cell so every peak has
/// some spatial support.
fn gaussian_sigma(b: &Box3D, cell: f64) -> f64 {
    let diag = (b.size.0 * b.size.0 + b.size.1 * b.size.1).sqrt() / cell;
    (diag / 6.0).max(0.5)
}

/// Encode ground-truth boxes onto the BEV layout: a gaussian peak per
/// center (max-merged across boxes of one class) and regression values
/// at the center cell only. Boxes whose center leaves the grid are
/// skipped.
pub fn make_targets(
    boxes: &[Box3D],
    grid: &GridConfig,
    num_classes: usize,
) -> Result<DetectionTargets> {
    let (w, h) = grid.bev_dims();
    let cell = grid.bev_cell();
    let mut heat = vec![0.0f64; num_classes * h * w];
    let mut regv = vec![0.0f64; REGRESSION_CHANNELS * h * w];
    for b in boxes {
        if b.class_id >= num_classes {
            return Err(Error::contract(
                "make_targets",
                format!("class id {} outside 0..{num_classes}", b.class_id),
            ));
        }
        let fx = (b.center.0 - grid.x_min) / cell;
        let fy = (b.center.1 - grid.y_min) / cell;
        if fx < 0.0 || fy < 0.0 || fx >= w as f64 || fy >= h as f64 {
            continue;
        }
        let (cx, cy) = (fx as usize, fy as usize);
        let sigma = gaussian_sigma(b, cell);
        let radius = (3.0 * sigma).ceil() as i64;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let at = (b.class_id * h + y as usize) * w + x as usize;
                heat[at] = heat[at].max(g);
            }
        }
        let (ccx, ccy) = (
            grid.x_min + (cx as f64 + 0.5) * cell,
            grid.y_min + (cy as f64 + 0.5) * cell,
        );
        let site = cy * w + cx;
        let fields = [
            b.center.0 - ccx,
            b.center.1 - ccy,
            b.center.2,
            b.size.0.ln(),
            b.size.1.ln(),
            b.size.2.ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        for (ch, v) in fields.iter().enumerate() {
            regv[ch * h * w + site] = *v;
        }
    }
    DetectionTargets::new(
        Tensor::new(&[num_classes, h, w], heat)?,
        Tensor::new(&[REGRESSION_CHANNELS, h, w], regv)?,
    )
}

/// Focal heatmap loss plus L1 regression at positive cells, both
/// normalized by the positive count. Targets are treated as constants.
pub fn detection_loss(pred: &DetectionTargets, targets: &DetectionTargets) -> Result<Tensor> {
    if pred.heatmap.shape() != targets.heatmap.shape()
        || pred.regression.shape() != targets.regression.shape()
    {
        return Err(Error::dim(
            "detection_loss",
            format!(
                "prediction maps {:?}/{:?} do not match targets {:?}/{:?}",
                pred.heatmap.shape(),
                pred.regression.shape(),
                targets.heatmap.shape(),
                targets.regression.shape()
            ),
        ));
    }
    let t = targets.heatmap.to_vec();
    let shape = targets.heatmap.shape().to_vec();
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let pos_mask: Vec<f64> = t.iter().map(|&v| if v == 1.0 { 1.0 } else { 0.0 }).collect();
    let neg_weight: Vec<f64> = t.iter().map(|&v| (1.0 - v).powi(4)).collect();
    let n_pos = pos_mask.iter().sum::<f64>().max(1.0);
    let pos_t = Tensor::new(&shape, pos_mask.clone())?;
    let neg_t = Tensor::new(&shape, neg_weight)?;

    let p = &pred.heatmap;
    let one_minus_p = p.scale(-1.0)?.add_scalar(1.0)?;
    // positives: −(1−p)² ln(p);  negatives: −(1−t)⁴ p² ln(1−p)
    let pos_term = pos_t
        .mul(&one_minus_p.mul(&one_minus_p)?)?
        .mul(&p.add_scalar(HEAT_EPS)?.ln()?)?;
    let neg_term = neg_t
        .mul(&p.mul(p)?)?
        .mul(&one_minus_p.add_scalar(HEAT_EPS)?.ln()?)?;
    let heat_loss = pos_term
        .add(&neg_term)?
        .sum_all()?
        .scale(-1.0 / n_pos)?;

    // broadcast the positive-cell mask over regression channels
    let mut cell_mask = vec![0.0; h * w];
    for ch in 0..k {
        for site in 0..h * w {
            if pos_mask[ch * h * w + site] == 1.0 {
                cell_mask[site] = 1.0;
            }
        }
    }
    let mask_t = Tensor::new(&[1, h, w], cell_mask)?;
    let diff = pred.regression.add(&targets.regression.scale(-1.0)?)?;
    let reg_loss = diff
        .abs()?
        .mul_bcast(&mask_t)?
        .sum_all()?
        .scale(0.25 / n_pos)?;
    heat_loss.add(&reg_loss)
}

/// Peak-pick boxes out of raw head output: a cell is kept when its score
/// passes the threshold and is a 3×3 local maximum of its class plane.
/// Results come back score-sorted, at most `max_dets` of them.
pub fn decode(
    pred: &DetectionTargets,
    grid: &GridConfig,
    score_thresh: f64,
    max_dets: usize,
) -> Result<Vec<Box3D>> {
    let (w, h) = grid.bev_dims();
    if pred.heatmap.shape()[1] != h || pred.heatmap.shape()[2] != w {
        return Err(Error::dim(
            "decode",
            format!("heatmap {:?} does not match grid {h}×{w}", pred.heatmap.shape()),
        ));
    }
    let cell = grid.bev_cell();
    let heat = pred.heatmap.to_vec();
    let regv = pred.regression.to_vec();
    let k = pred.num_classes();
    let mut out = Vec::new();
    for class in 0..k {
        let plane = &heat[class * h * w..(class + 1) * h * w];
        for cy in 0..h {
            for cx in 0..w {
                let score = plane[cy * w + cx];
                if score < score_thresh {
                    continue;
                }
                let mut is_peak = true;
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64
                        {
                            continue;
                        }
                        if plane[ny as usize * w + nx as usize] > score {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let site = cy * w + cx;
                let at = |ch: usize| regv[ch * h * w + site];
                let (ccx, ccy) = (
                    grid.x_min + (cx as f64 + 0.5) * cell,
                    grid.y_min + (cy as f64 + 0.5) * cell,
                );
                out.push(Box3D::new(
                    (ccx + at(0), ccy + at(1), at(2)),
                    (at(3).exp(), at(4).exp(), at(5).exp()),
                    at(6).atan2(at(7)),
                    class,
                    score,
                )?);
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(max_dets);
    Ok(out)
}

/// One serialized box; the line format of prediction/ground-truth files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BoxRecord {
    pub frame_id: u64,
    pub class: usize,
    pub score: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl BoxRecord {
    pub fn from_box(frame_id: u64, b: &Box3D) -> BoxRecord {
        BoxRecord {
            frame_id,
            class: b.class_id,
            score: b.score,
            x: b.center.0,
            y: b.center.1,
            z: b.center.2,
            l: b.size.0,
            w: b.size.1,
            h: b.size.2,
            yaw: b.yaw,
        }
    }

    pub fn to_box(&self) -> Result<Box3D> {
        Box3D::new(
            (self.x, self.y, self.z),
            (self.l, self.w, self.h),
            self.yaw,
            self.class,
            self.score,
        )
    }
}

/// Write boxes as JSON lines.
pub fn save_boxes(path: &std::path::Path, records: &[BoxRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::contract("save_boxes", e.to_string()))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read boxes from JSON lines.
pub fn load_boxes(path: &std::path::Path) -> Result<Vec<BoxRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::contract("load_boxes", e.to_string()))
        })
        .collect()
}
