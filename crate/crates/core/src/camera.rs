//! Camera stream: multi-view backbone, sparse-depth guidance, depth
//! distribution prediction, and assembly of the camera feature volume.
//!
//! All encoders are weight-shared across views — every view runs through
//! the same parameter tensors, so "sharing" is structural, not copied.
//! Convolutions are bias-free throughout: zero input means zero output,
//! which several downstream invariants rely on.

use crate::error::{Error, Result};
use crate::geometry::{lift_splat, CameraModel, DepthBins, DepthMap};
use crate::grid::{GridConfig, VolumeConfig};
use crate::tensor::{concat, ParamInit, Registry, Tensor};

/// Architecture knobs for the camera stream. The backbone is a fixed
/// three-stage stride-2 stack (total stride 8); widths are configurable.
#[derive(Clone, Debug)]
pub struct CameraConfig {
    pub in_channels: usize,
    pub stage_widths: [usize; 3],
    pub depth_widths: [usize; 3],
    pub mix_channels: usize,
    pub bins: DepthBins,
}

/// Overall downsampling of the backbone and depth encoder.
pub const FEATURE_STRIDE: usize = 8;

impl CameraConfig {
    pub fn desk_default() -> CameraConfig {
        CameraConfig {
            in_channels: 1,
            stage_widths: [8, 16, 32],
            depth_widths: [4, 8, 8],
            mix_channels: 32,
            bins: DepthBins::desk_default(),
        }
    }

    pub fn validate(&self, image_size: (usize, usize)) -> Result<()> {
        if self.in_channels == 0
            || self.stage_widths.contains(&0)
            || self.depth_widths.contains(&0)
            || self.mix_channels == 0
        {
            return Err(Error::Config("camera channel widths must be positive".into()));
        }
        let (h, w) = image_size;
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image resolution {h}×{w} must be divisible by {FEATURE_STRIDE}"
            )));
        }
        self.bins.validate()
    }
}

/// Learnable tensors for the camera stream.
#[derive(Clone, Debug)]
pub struct CameraParams {
    pub backbone: [Tensor; 3],
    pub depth_encoder: [Tensor; 3],
    pub mix: Tensor,
    pub depth_head: Tensor,
    cfg: CameraConfig,
}

impl CameraParams {
    pub fn create(reg: &mut Registry, prefix: &str, cfg: &CameraConfig) -> Result<CameraParams> {
        let conv = |reg: &mut Registry, name: String, c_out: usize, c_in: usize, k: usize| {
            reg.param(
                &name,
                &[c_out, c_in, k, k],
                ParamInit::XavierUniform {
                    fan_in: c_in * k * k,
                    fan_out: c_out * k * k,
                },
            )
        };
        let backbone = [
            conv(reg, format!("{prefix}.backbone.stage1"), cfg.stage_widths[0], cfg.in_channels, 3)?,
            conv(reg, format!("{prefix}.backbone.stage2"), cfg.stage_widths[1], cfg.stage_widths[0], 3)?,
            conv(reg, format!("{prefix}.backbone.stage3"), cfg.stage_widths[2], cfg.stage_widths[1], 3)?,
        ];
        let depth_encoder = [
            conv(reg, format!("{prefix}.depth.stage1"), cfg.depth_widths[0], 2, 3)?,
            conv(reg, format!("{prefix}.depth.stage2"), cfg.depth_widths[1], cfg.depth_widths[0], 3)?,
            conv(reg, format!("{prefix}.depth.stage3"), cfg.depth_widths[2], cfg.depth_widths[1], 3)?,
        ];
        let mix = conv(
            reg,
            format!("{prefix}.mix"),
            cfg.mix_channels,
            cfg.stage_widths[2] + cfg.depth_widths[2],
            1,
        )?;
        let depth_head = conv(
            reg,
            format!("{prefix}.depth_head"),
            cfg.bins.count,
            cfg.mix_channels,
            1,
        )?;
        Ok(CameraParams {
            backbone,
            depth_encoder,
            mix,
            depth_head,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &CameraConfig {
        &self.cfg
    }
}

/// Per-view feature maps plus the camera models that produced them.
#[derive(Clone, Debug)]
pub struct MultiViewFeatures {
    pub feats: Tensor,
    pub cams: Vec<CameraModel>,
}

impl MultiViewFeatures {
    pub fn new(feats: Tensor, cams: Vec<CameraModel>) -> Result<MultiViewFeatures> {
        if feats.rank() != 4 || feats.shape()[0] != cams.len() || cams.is_empty() {
            return Err(Error::dim(
                "multi_view_features",
                format!(
                    "expected feats[N_c×C×H_f×W_f] with one camera per view, got {:?} for {} cameras",
                    feats.shape(),
                    cams.len()
                ),
            ));
        }
        Ok(MultiViewFeatures { feats, cams })
    }

    pub fn views(&self) -> usize {
        self.cams.len()
    }
}

fn stage_stack(view: &Tensor, stages: &[Tensor; 3]) -> Result<Tensor> {
    let mut x = view.clone();
    for w in stages {
        x = x.conv2d(w, 2, 1)?.relu()?;
    }
    Ok(x)
}

/// Run each view through the same stack and restack along the view axis.
fn per_view<F>(input: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let n_views = input.shape()[0];
    let view_shape = input.shape()[1..].to_vec();
    let mut outs = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let view = input.slice(0, v, 1)?.reshape(&view_shape)?;
        let out = f(&view)?;
        let mut stacked_shape = vec![1];
        stacked_shape.extend_from_slice(out.shape());
        outs.push(out.reshape(&stacked_shape)?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    concat(&refs, 0)
}

/// Shared three-stage backbone, total stride 8.
pub fn image_backbone(
    images: &Tensor,
    params: &CameraParams,
    cams: Vec<CameraModel>,
) -> Result<MultiViewFeatures> {
    if images.rank() != 4 {
        return Err(Error::dim(
            "image_backbone",
            format!("expected images[N_c×C×H×W], got {:?}", images.shape()),
        ));
    }
    let (h, w) = (images.shape()[2], images.shape()[3]);
    params.cfg.validate((h, w))?;
    let feats = per_view(images, |view| stage_stack(view, &params.backbone))?;
    MultiViewFeatures::new(feats, cams)
}

/// Encode per-view sparse depth as (value, validity) planes through the
/// shared stride-8 stack.
pub fn encode_sparse_depth(depths: &[DepthMap], params: &CameraParams) -> Result<Tensor> {
    if depths.is_empty() {
        return Err(Error::contract("encode_sparse_depth", "need at least one view"));
    }
    let (h, w) = (depths[0].h(), depths[0].w());
    params.cfg.validate((h, w))?;
    let mut planes = Vec::with_capacity(depths.len() * 2 * h * w);
    for d in depths {
        if d.h() != h || d.w() != w {
            return Err(Error::dim(
                "encode_sparse_depth",
                "views have mismatched depth resolutions".to_string(),
            ));
        }
        let (values, valid) = d.planes();
        planes.extend(values);
        planes.extend(valid);
    }
    let stacked = Tensor::new(&[depths.len(), 2, h, w], planes)?;
    per_view(&stacked, |view| stage_stack(view, &params.depth_encoder))
}

/// Concatenate image and depth features per view and mix with a 1×1
/// convolution: the depth-aware camera features.
pub fn make_depth_aware(
    img_feats: &MultiViewFeatures,
    depth_feats: &Tensor,
    params: &CameraParams,
) -> Result<MultiViewFeatures> {
    let f = &img_feats.feats;
    if depth_feats.rank() != 4
        || depth_feats.shape()[0] != f.shape()[0]
        || depth_feats.shape()[2..] != f.shape()[2..]
    {
        return Err(Error::dim(
            "make_depth_aware",
            format!(
                "image features {:?} and depth features {:?} do not align",
                f.shape(),
                depth_feats.shape()
            ),
        ));
    }
    let n_views = f.shape()[0];
    let mut outs = Vec::with_capacity(n_views);
    let img_shape = f.shape()[1..].to_vec();
    let dep_shape = depth_feats.shape()[1..].to_vec();
    for v in 0..n_views {
        let iv = f.slice(0, v, 1)?.reshape(&img_shape)?;
        let dv = depth_feats.slice(0, v, 1)?.reshape(&dep_shape)?;
        let cat = concat(&[&iv, &dv], 0)?;
        let mixed = cat.conv2d(&params.mix, 1, 0)?;
        let mut stacked_shape = vec![1];
        stacked_shape.extend_from_slice(mixed.shape());
        outs.push(mixed.reshape(&stacked_shape)?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    MultiViewFeatures::new(concat(&refs, 0)?, img_feats.cams.clone())
}

/// 1×1 head + per-pixel softmax over the depth bins.
pub fn predict_depth_distribution(
    depth_aware: &MultiViewFeatures,
    params: &CameraParams,
) -> Result<Tensor> {
    per_view(&depth_aware.feats, |view| {
        view.conv2d(&params.depth_head, 1, 0)?.softmax(0)
    })
}

/// Lift every view and sum the volumes (view-index order).
pub fn build_feature_volume(
    mv: &MultiViewFeatures,
    depth_dist: &Tensor,
    bins: &DepthBins,
    grid: &GridConfig,
    vol: &VolumeConfig,
) -> Result<crate::grid::FeatureVolume> {
    if depth_dist.rank() != 4 || depth_dist.shape()[0] != mv.views() {
        return Err(Error::dim(
            "build_feature_volume",
            format!(
                "depth distribution {:?} does not cover {} views",
                depth_dist.shape(),
                mv.views()
            ),
        ));
    }
    let feat_shape = mv.feats.shape()[1..].to_vec();
    let dist_shape = depth_dist.shape()[1..].to_vec();
    let mut total: Option<Tensor> = None;
    for (v, cam) in mv.cams.iter().enumerate() {
        let feat = mv.feats.slice(0, v, 1)?.reshape(&feat_shape)?;
        let dist = depth_dist.slice(0, v, 1)?.reshape(&dist_shape)?;
        let lifted = lift_splat(&feat, &dist, cam, bins, grid, vol)?;
        total = Some(match total {
            None => lifted,
            Some(acc) => acc.add(&lifted)?,
        });
    }
    let values = total.expect("N_c >= 1 by MultiViewFeatures invariant");
    crate::grid::FeatureVolume::new(
        values,
        grid.x_min,
        grid.y_min,
        grid.z_min,
        grid.bev_cell(),
        vol.z_cell(grid),
    )
}

/// Cross-entropy between the predicted depth distribution and the binned
/// LiDAR depth, averaged over valid feature cells. A feature cell takes
/// the minimum valid depth inside its stride×stride image block (nearest
/// surface wins, matching the z-buffer rule); cells with no valid depth
/// — or depth outside the bin range — are skipped. Returns zero when
/// nothing is valid.
pub fn depth_supervision_loss(
    depth_dist: &Tensor,
    gt_depth: &[DepthMap],
    bins: &DepthBins,
) -> Result<Tensor> {
    if depth_dist.rank() != 4 || depth_dist.shape()[0] != gt_depth.len() {
        return Err(Error::dim(
            "depth_supervision_loss",
            format!(
                "distribution {:?} does not cover {} views",
                depth_dist.shape(),
                gt_depth.len()
            ),
        ));
    }
    let (d, hf, wf) = (
        depth_dist.shape()[1],
        depth_dist.shape()[2],
        depth_dist.shape()[3],
    );
    if d != bins.count {
        return Err(Error::dim(
            "depth_supervision_loss",
            format!("distribution has {d} bins, config wants {}", bins.count),
        ));
    }
    let mut picks: Vec<usize> = Vec::new();
    for (v, map) in gt_depth.iter().enumerate() {
        if map.h() != hf * FEATURE_STRIDE || map.w() != wf * FEATURE_STRIDE {
            return Err(Error::dim(
                "depth_supervision_loss",
                format!(
                    "depth map {}×{} is not the feature grid at stride {FEATURE_STRIDE}",
                    map.h(),
                    map.w()
                ),
            ));
        }
        for i in 0..hf {
            for j in 0..wf {
                let mut best: Option<f64> = None;
                for bi in 0..FEATURE_STRIDE {
                    for bj in 0..FEATURE_STRIDE {
                        if let Some(depth) = map.get(i * FEATURE_STRIDE + bi, j * FEATURE_STRIDE + bj) {
                            best = Some(best.map_or(depth, |b: f64| b.min(depth)));
                        }
                    }
                }
                let Some(depth) = best else { continue };
                let Some(bin) = bins.bin_of(depth) else { continue };
                picks.push(((v * d) + bin) * (hf * wf) + i * wf + j);
            }
        }
    }
    if picks.is_empty() {
        return Tensor::scalar(0.0);
    }
    let count = picks.len();
    let probs = depth_dist.gather(&picks, &[count])?;
    // tiny additive floor keeps ln finite if a bin ever underflows; it is
    // far below f64 epsilon for any realistic probability
    probs
        .add_scalar(1e-300)?
        .ln()?
        .sum_all()?
        .scale(-1.0 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_sparse_depth;
    use crate::tensor::fd;
    use nalgebra::{Matrix3, Vector3};

    fn tiny_cfg() -> CameraConfig {
        CameraConfig {
            in_channels: 1,
            stage_widths: [2, 3, 4],
            depth_widths: [2, 2, 3],
            mix_channels: 4,
            bins: DepthBins {
                min: 1.0,
                max: 9.0,
                count: 4,
            },
        }
    }

    fn forward_camera() -> CameraModel {
        let rotation = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        CameraModel::new(12.0, 12.0, 12.0, 8.0, rotation, Vector3::zeros(), (16, 24)).unwrap()
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.17).sin() * scale).collect();
        Tensor::new(shape, vals).unwrap()
    }

    #[test]
    fn backbone_stride_and_zero_images() {
        let mut reg = Registry::new(3);
        let params = CameraParams::create(&mut reg, "cam", &tiny_cfg()).unwrap();
        let images = Tensor::zeros(&[2, 1, 16, 24]).unwrap();
        let cams = vec![forward_camera(), forward_camera()];
        let mv = image_backbone(&images, &params, cams).unwrap();
        assert_eq!(mv.feats.shape(), &[2, 4, 2, 3]); // 16/8 × 24/8
        assert!(mv.feats.to_vec().iter().all(|&v| v == 0.0), "bias-free stack");
    }

    #[test]
    fn backbone_rejects_odd_resolution() {
        let mut reg = Registry::new(3);
        let params = CameraParams::create(&mut reg, "cam", &tiny_cfg()).unwrap();
        let images = Tensor::zeros(&[1, 1, 12, 24]).unwrap();
        assert!(matches!(
            image_backbone(&images, &params, vec![forward_camera()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn view_weight_sharing_is_real() {
        let mut reg = Registry::new(5);
        let params = CameraParams::create(&mut reg, "cam", &tiny_cfg()).unwrap();
        let one = ramp(&[1, 1, 16, 24], 1.0).to_vec();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let images = Tensor::new(&[2, 1, 16, 24], two).unwrap();
        let mv = image_backbone(&images, &params, vec![forward_camera(), forward_camera()]).unwrap();
        let v = mv.feats.to_vec();
        let half = v.len() / 2;
        assert_eq!(v[..half], v[half..], "identical views, identical features");
    }

    #[test]
    fn depth_encoder_sees_validity() {
        let mut reg = Registry::new(7);
        let params = CameraParams::create(&mut reg, "cam", &tiny_cfg()).unwrap();
        let empty = DepthMap::empty(16, 24);
        let out = encode_sparse_depth(&[empty], &params).unwrap();
        assert_eq!(out.shape(), &[1, 3, 2, 3]);
        assert!(out.to_vec().iter().all(|&v| v == 0.0), "all-invalid input, bias-free");

        let near = rasterize_sparse_depth(&[(5.0, 5.0, 2.0), (13.0, 9.0, 4.0)], (16, 24));
        let far = rasterize_sparse_depth(&[(5.0, 5.0, 4.0), (13.0, 9.0, 8.0)], (16, 24));
        let a = encode_sparse_depth(&[near], &params).unwrap().to_vec();
        let b = encode_sparse_depth(&[far], &params).unwrap().to_vec();
        let delta: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(delta > 0.0, "encoder must react to depth changes");
    }

    #[test]
    fn depth_aware_mixing_shapes() {
        let mut reg = Registry::new(9);
        let cfg = tiny_cfg();
        let params = CameraParams::create(&mut reg, "cam", &cfg).unwrap();
        let images = ramp(&[2, 1, 16, 24], 0.5);
        let cams = vec![forward_camera(), forward_camera()];
        let mv = image_backbone(&images, &params, cams).unwrap();
        let depths = vec![DepthMap::empty(16, 24), DepthMap::empty(16, 24)];
        let dfeats = encode_sparse_depth(&depths, &params).unwrap();
        let aware = make_depth_aware(&mv, &dfeats, &params).unwrap();
        assert_eq!(aware.feats.shape(), &[2, cfg.mix_channels, 2, 3]);

        let dist = predict_depth_distribution(&aware, &params).unwrap();
        assert_eq!(dist.shape(), &[2, 4, 2, 3]);
        let v = dist.to_vec();
        // per-pixel columns sum to 1
        for view in 0..2 {
            for pix in 0..6 {
                let sum: f64 = (0..4).map(|k| v[(view * 4 + k) * 6 + pix]).sum();
                assert!((sum - 1.0).abs() < 1e-12, "column sum {sum}");
            }
        }
    }

    #[test]
    fn volume_from_massed_bin_hits_one_voxel() {
        let cfg = tiny_cfg();
        // 4 bins over [1, 9]: midpoints 2, 4, 6, 8
        let bins = cfg.bins;
        let grid = GridConfig {
            x_min: -6.4,
            x_max: 6.4,
            y_min: -6.4,
            y_max: 6.4,
            z_min: -1.0,
            z_max: 5.4,
            voxel: (0.4, 0.4, 0.4),
        };
        let vol = VolumeConfig { z_bins: 4 };
        let cam = forward_camera();
        // pixel (0,1) with all mass on bin 1 (depth 4 m) unprojects to
        // ego (4.0, 0.0, 1.33), inside the grid: the feature splats into
        // exactly one voxel
        let target = 1; // row 0, column 1
        let mut feat = vec![0.0; 2 * 2 * 3];
        feat[0 * 6 + target] = 2.5;
        feat[1 * 6 + target] = -1.5;
        let mut dist = vec![0.0; 4 * 2 * 3];
        // normalize every pixel; target pixel mass on bin 1, others on bin 0
        for pix in 0..6 {
            if pix == target {
                dist[1 * 6 + pix] = 1.0;
            } else {
                dist[0 * 6 + pix] = 1.0;
            }
        }
        let mv = MultiViewFeatures::new(Tensor::new(&[1, 2, 2, 3], feat).unwrap(), vec![cam]).unwrap();
        let dd = Tensor::new(&[1, 4, 2, 3], dist).unwrap();
        let volume = build_feature_volume(&mv, &dd, &bins, &grid, &vol).unwrap();
        let v = volume.values.to_vec();
        let nonzero: Vec<usize> = v.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero.len(), 2, "one voxel, two channels");
        let per_ch = v.len() / 2;
        assert_eq!(nonzero[1] - nonzero[0], per_ch);
        assert!((v[nonzero[0]] - 2.5).abs() < 1e-12);
        assert!((v[nonzero[1]] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_analytic_cases() {
        let bins = DepthBins {
            min: 1.0,
            max: 9.0,
            count: 4,
        };
        // no valid pixels → exactly zero
        let dist = Tensor::new(&[1, 4, 1, 1], vec![0.25; 4]).unwrap();
        let empty = vec![DepthMap::empty(8, 8)];
        let loss = depth_supervision_loss(&dist, &empty, &bins).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);

        // uniform prediction → ln(D)
        let gt = vec![rasterize_sparse_depth(&[(3.0, 3.0, 4.5)], (8, 8))];
        let loss = depth_supervision_loss(&dist, &gt, &bins).unwrap();
        assert!((loss.item().unwrap() - 4.0f64.ln()).abs() < 1e-12);

        // one-hot on the true bin (4.5 m → bin 1) → zero loss
        let onehot = Tensor::new(&[1, 4, 1, 1], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let loss = depth_supervision_loss(&onehot, &gt, &bins).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn backbone_gradients_match_fd() {
        let mut reg = Registry::new(13);
        let cfg = CameraConfig {
            in_channels: 1,
            stage_widths: [2, 2, 2],
            depth_widths: [2, 2, 2],
            mix_channels: 2,
            bins: DepthBins {
                min: 1.0,
                max: 5.0,
                count: 2,
            },
        };
        let params = CameraParams::create(&mut reg, "cam", &cfg).unwrap();
        let images = ramp(&[1, 1, 16, 16], 0.8);
        let cams = vec![forward_camera()];
        let f = move |args: &[Tensor]| {
            let p = CameraParams {
                backbone: [args[1].clone(), params.backbone[1].clone(), params.backbone[2].clone()],
                depth_encoder: params.depth_encoder.clone(),
                mix: params.mix.clone(),
                depth_head: params.depth_head.clone(),
                cfg: cfg.clone(),
            };
            let mv = image_backbone(&args[0], &p, cams.clone())?;
            mv.feats.mul(&mv.feats)?.sum_all()
        };
        let stage1 = reg.get("cam.backbone.stage1").unwrap().tensor().detach();
        let err = fd::check_gradients(&f, &[images, stage1], 1e-5).unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }
}
