//! Camera geometry, depth rasterization, lift-splat, and BEV warping.
//!
//! Conventions: the ego frame is x-forward-right-handed with z up; the
//! camera frame is the usual computer-vision one (z forward, x right,
//! y down). Pixel coordinates are continuous with the origin at the
//! top-left corner of the top-left pixel, so pixel (i, j) spans
//! [j, j+1) × [i, i+1) and has center (j + 0.5, i + 0.5).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::grid::{BevGrid, GridConfig, PointCloud, VolumeConfig};
use crate::par;
use crate::tensor::{Tensor, VjpCtx};

fn check_rotation(op: &'static str, r: &Matrix3<f64>) -> Result<()> {
    let gram = r.transpose() * r;
    let err = (gram - Matrix3::identity()).abs().max();
    if err > 1e-9 {
        return Err(Error::contract(
            op,
            format!("rotation not orthonormal (max deviation {err:.2e})"),
        ));
    }
    if r.determinant() < 0.0 {
        return Err(Error::contract(op, "rotation has negative determinant"));
    }
    Ok(())
}

/// Pinhole camera: intrinsics plus a rigid ego→camera transform.
#[derive(Clone, Debug)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// p_cam = rotation · p_ego + translation
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// (H_img, W_img) pixels.
    pub image_size: (usize, usize),
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: (usize, usize),
    ) -> Result<CameraModel> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::contract("camera_model", "focal lengths must be positive"));
        }
        check_rotation("camera_model", &rotation)?;
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            image_size,
        })
    }

    pub fn ego_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_ego(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Project an ego-frame point; `None` when behind the camera or
    /// outside the image.
    pub fn project(&self, p_ego: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.ego_to_camera(p_ego);
        if pc.z <= 0.0 {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        let (h, w) = self.image_size;
        if u < 0.0 || u >= w as f64 || v < 0.0 || v >= h as f64 {
            return None;
        }
        Some((u, v, pc.z))
    }

    /// Analytic inverse of [`CameraModel::project`] for depth > 0.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let pc = Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        );
        self.camera_to_ego(&pc)
    }
}

/// Rigid ego→world transform at one timestamp.
#[derive(Clone, Debug)]
pub struct EgoPose {
    /// p_world = rotation · p_ego + translation
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub timestamp: f64,
}

impl EgoPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, timestamp: f64) -> Result<EgoPose> {
        check_rotation("ego_pose", &rotation)?;
        Ok(EgoPose {
            rotation,
            translation,
            timestamp,
        })
    }

    /// Identity pose at time 0.
    pub fn identity() -> EgoPose {
        EgoPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            timestamp: 0.0,
        }
    }

    /// Pose translated in the ground plane with a yaw heading.
    pub fn planar(x: f64, y: f64, yaw: f64, timestamp: f64) -> EgoPose {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        EgoPose {
            rotation,
            translation: Vector3::new(x, y, 0.0),
            timestamp,
        }
    }
}

/// Per-pixel metric depth with validity; invalid entries are exactly 0.
#[derive(Clone, Debug)]
pub struct DepthMap {
    values: Vec<f64>,
    mask: Vec<bool>,
    h: usize,
    w: usize,
}

impl DepthMap {
    pub fn empty(h: usize, w: usize) -> DepthMap {
        DepthMap {
            values: vec![0.0; h * w],
            mask: vec![false; h * w],
            h,
            w,
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if self.mask[i * self.w + j] {
            Some(self.values[i * self.w + j])
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Raw (value, valid) planes for the depth encoder.
    pub fn planes(&self) -> (Vec<f64>, Vec<f64>) {
        let valid = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        (self.values.clone(), valid)
    }
}

/// Project a cloud, keeping only visible points as (u, v, depth).
pub fn project_points(points: &PointCloud, cam: &CameraModel) -> Vec<(f64, f64, f64)> {
    points
        .iter()
        .filter_map(|p| cam.project(&Vector3::new(p[0], p[1], p[2])))
        .collect()
}

/// Z-buffer the projections into a sparse depth map: each projection
/// writes its floor pixel; collisions keep the smaller depth.
pub fn rasterize_sparse_depth(
    projections: &[(f64, f64, f64)],
    image_size: (usize, usize),
) -> DepthMap {
    let (h, w) = image_size;
    let mut map = DepthMap::empty(h, w);
    for &(u, v, d) in projections {
        let (j, i) = (u.floor() as usize, v.floor() as usize);
        if i >= h || j >= w || d <= 0.0 {
            continue;
        }
        let idx = i * w + j;
        if !map.mask[idx] || d < map.values[idx] {
            map.values[idx] = d;
            map.mask[idx] = true;
        }
    }
    map
}

/// Uniform metric depth bins; the lift uses bin midpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBins {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl DepthBins {
    pub fn desk_default() -> DepthBins {
        DepthBins {
            min: 1.0,
            max: 26.6,
            count: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.min <= 0.0 || self.min >= self.max {
            return Err(Error::Config(format!(
                "invalid depth bins: {} bins over [{}, {}]",
                self.count, self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.count as f64
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * self.width()
    }

    /// Bin containing a metric depth, if within range.
    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        if depth < self.min || depth >= self.max {
            return None;
        }
        Some(((depth - self.min) / self.width()) as usize)
    }
}

/// Lift per-pixel features through a depth distribution and splat them
/// into the 3-D volume (sum pooling). Linear in `feat`, differentiable in
/// both inputs; feature mass in range is conserved.
pub fn lift_splat(
    feat: &Tensor,
    depth_dist: &Tensor,
    cam: &CameraModel,
    bins: &DepthBins,
    grid: &GridConfig,
    vol: &VolumeConfig,
) -> Result<Tensor> {
    if feat.rank() != 3 || depth_dist.rank() != 3 {
        return Err(Error::dim(
            "lift_splat",
            format!(
                "expected feat[C×H_f×W_f] and depth_dist[D×H_f×W_f], got {:?}, {:?}",
                feat.shape(),
                depth_dist.shape()
            ),
        ));
    }
    let (c, hf, wf) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let d = depth_dist.shape()[0];
    if depth_dist.shape()[1..] != [hf, wf] {
        return Err(Error::dim(
            "lift_splat",
            format!(
                "depth_dist spatial shape {:?} != feature shape {:?}",
                &depth_dist.shape()[1..],
                &feat.shape()[1..]
            ),
        ));
    }
    if d != bins.count {
        return Err(Error::dim(
            "lift_splat",
            format!("depth_dist has {d} bins, config wants {}", bins.count),
        ));
    }
    let n_pix = hf * wf;
    {
        // per-pixel normalization contract
        let dv = depth_dist.values();
        for p in 0..n_pix {
            let sum: f64 = (0..d).map(|k| dv[k * n_pix + p]).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(
                    "lift_splat",
                    format!("depth distribution at pixel {p} sums to {sum}, expected 1"),
                ));
            }
        }
    }

    // Geometry is fixed per (camera, grid): map every (bin, pixel) to its
    // volume voxel once, then build the inverse (voxel → contributors)
    // table that makes the splat a deterministic per-voxel gather.
    let (h_img, w_img) = cam.image_size;
    let (su, sv) = (w_img as f64 / wf as f64, h_img as f64 / hf as f64);
    let (nx, ny, nz) = vol.dims(grid);
    let n_vox = nx * ny * nz;
    let mut target: Vec<Option<usize>> = Vec::with_capacity(d * n_pix);
    for k in 0..d {
        let depth = bins.midpoint(k);
        for i in 0..hf {
            for j in 0..wf {
                let u = (j as f64 + 0.5) * su;
                let v = (i as f64 + 0.5) * sv;
                let p = cam.unproject(u, v, depth);
                target.push(
                    vol.voxel_index(grid, &[p.x, p.y, p.z])
                        .map(|(ix, iy, iz)| (iz * ny + iy) * nx + ix),
                );
            }
        }
    }
    let mut contributors: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_vox];
    for (flat, tgt) in target.iter().enumerate() {
        if let Some(vox) = tgt {
            contributors[*vox].push((flat / n_pix, flat % n_pix));
        }
    }

    let feat_ref = feat.values();
    let dist_ref = depth_dist.values();
    let (fv, pv): (&[f64], &[f64]) = (&feat_ref, &dist_ref);
    let contrib_ref: &[Vec<(usize, usize)>] = &contributors;
    let mut out = vec![0.0; c * n_vox];
    par::for_each_chunk_mut(&mut out, n_vox, |ch, plane| {
        for (vox, out) in plane.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(k, p) in &contrib_ref[vox] {
                acc += pv[k * n_pix + p] * fv[ch * n_pix + p];
            }
            *out = acc;
        }
    });
    drop(feat_ref);
    drop(dist_ref);

    Tensor::from_op(
        "lift_splat",
        vec![feat.clone(), depth_dist.clone()],
        vec![c, nz, ny, nx],
        out,
        Box::new(move |ctx: &VjpCtx| {
            let (feat_ref, dist_ref) = (ctx.parents[0].values(), ctx.parents[1].values());
            let (fv, pv): (&[f64], &[f64]) = (&feat_ref, &dist_ref);
            let g = ctx.out_grad;
            // both gradients are gathers over the (bin, pixel) → voxel map
            let mut dfeat = vec![0.0; c * n_pix];
            par::for_each_chunk_mut(&mut dfeat, n_pix, |ch, plane| {
                for (p, out) in plane.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..d {
                        if let Some(vox) = target[k * n_pix + p] {
                            acc += pv[k * n_pix + p] * g[ch * n_vox + vox];
                        }
                    }
                    *out = acc;
                }
            });
            let mut ddist = vec![0.0; d * n_pix];
            par::for_each_chunk_mut(&mut ddist, n_pix, |k, plane| {
                for (p, out) in plane.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    if let Some(vox) = target[k * n_pix + p] {
                        for ch in 0..c {
                            acc += fv[ch * n_pix + p] * g[ch * n_vox + vox];
                        }
                    }
                    *out = acc;
                }
            });
            vec![Some(dfeat), Some(ddist)]
        }),
    )
}

/// Resample the previous frame's BEV grid into the current ego frame
/// using the planar (x, y, yaw) component of the relative pose. Bilinear
/// sampling keeps the warp differentiable; out-of-grid samples are zero.
pub fn warp_bev(prev: &BevGrid, pose_prev: &EgoPose, pose_cur: &EgoPose) -> Result<BevGrid> {
    let c = prev.channels();
    let (h, w) = (prev.h(), prev.w());

    // current ego point → world → previous ego frame
    let rel_rot = pose_prev.rotation.transpose() * pose_cur.rotation;
    let rel_t = pose_prev.rotation.transpose() * (pose_cur.translation - pose_prev.translation);
    let yaw = rel_rot[(1, 0)].atan2(rel_rot[(0, 0)]);
    let (s, co) = yaw.sin_cos();
    let (tx, ty) = (rel_t.x, rel_t.y);
    // Sampling a grid into its own frame is the identity map; build unit
    // taps directly so no rounding enters and the copy is bit-exact.
    let same_frame = pose_prev.rotation == pose_cur.rotation
        && pose_prev.translation == pose_cur.translation;

    // Precompute bilinear taps per output cell: up to 4 (source index,
    // weight) pairs.
    let (x_min, y_min, cell) = (prev.x_min, prev.y_min, prev.cell);
    let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(h * w);
    let mut tap_counts: Vec<u8> = Vec::with_capacity(h * w);
    for iy in 0..h {
        for ix in 0..w {
            if same_frame {
                let mut cell_taps = [(0usize, 0.0f64); 4];
                cell_taps[0] = (iy * w + ix, 1.0);
                taps.push(cell_taps);
                tap_counts.push(1);
                continue;
            }
            let x = x_min + (ix as f64 + 0.5) * cell;
            let y = y_min + (iy as f64 + 0.5) * cell;
            let sx = co * x - s * y + tx;
            let sy = s * x + co * y + ty;
            let gx = (sx - x_min) / cell - 0.5;
            let gy = (sy - y_min) / cell - 0.5;
            let (x0, y0) = (gx.floor(), gy.floor());
            let (fx, fy) = (gx - x0, gy - y0);
            let mut cell_taps = [(0usize, 0.0f64); 4];
            let mut n = 0u8;
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let weight = wx * wy;
                    if weight == 0.0 {
                        continue;
                    }
                    let (sxi, syi) = (x0 + dx, y0 + dy);
                    if sxi < 0.0 || syi < 0.0 || sxi >= w as f64 || syi >= h as f64 {
                        continue;
                    }
                    cell_taps[n as usize] = (syi as usize * w + sxi as usize, weight);
                    n += 1;
                }
            }
            taps.push(cell_taps);
            tap_counts.push(n);
        }
    }

    let prev_ref = prev.values.values();
    let pvals: &[f64] = &prev_ref;
    let taps_ref: &[[(usize, f64); 4]] = &taps;
    let counts_ref: &[u8] = &tap_counts;
    let mut out = vec![0.0; c * h * w];
    par::for_each_chunk_mut(&mut out, h * w, |ch, plane| {
        let base = ch * h * w;
        for (cell_idx, out) in plane.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..counts_ref[cell_idx] as usize {
                let (src, weight) = taps_ref[cell_idx][t];
                acc += weight * pvals[base + src];
            }
            *out = acc;
        }
    });
    drop(prev_ref);

    let n_cells = h * w;
    let values = Tensor::from_op(
        "warp_bev",
        vec![prev.values.clone()],
        vec![c, h, w],
        out,
        Box::new(move |ctx: &VjpCtx| {
            let g = ctx.out_grad;
            let mut dprev = vec![0.0; c * n_cells];
            for ch in 0..c {
                let base = ch * n_cells;
                for cell_idx in 0..n_cells {
                    let go = g[base + cell_idx];
                    if go == 0.0 {
                        continue;
                    }
                    for t in 0..tap_counts[cell_idx] as usize {
                        let (src, weight) = taps[cell_idx][t];
                        dprev[base + src] += weight * go;
                    }
                }
            }
            vec![Some(dprev)]
        }),
    )?;
    prev.with_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_camera() -> CameraModel {
        // camera at the ego origin looking along +x: x_cam = −y_ego,
        // y_cam = −z_ego, z_cam = x_ego
        let rotation = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        CameraModel::new(50.0, 50.0, 48.0, 32.0, rotation, Vector3::zeros(), (64, 96)).unwrap()
    }

    #[test]
    fn principal_point_projection() {
        let cam = forward_camera();
        let (u, v, d) = cam.project(&Vector3::new(5.0, 0.0, 0.0)).unwrap();
        assert!((u - 48.0).abs() < 1e-12);
        assert!((v - 32.0).abs() < 1e-12);
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_excluded() {
        let cam = forward_camera();
        assert!(cam.project(&Vector3::new(-1.0, 0.0, 0.0)).is_none());
        assert!(cam.project(&Vector3::new(0.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn project_unproject_roundtrip() {
        let cam = forward_camera();
        let mut worst: f64 = 0.0;
        for i in 0..200 {
            let t = i as f64;
            let p = Vector3::new(
                2.0 + (t * 0.37).fract() * 20.0,
                ((t * 0.61).fract() - 0.5) * 6.0,
                ((t * 0.83).fract() - 0.5) * 3.0,
            );
            let Some((u, v, d)) = cam.project(&p) else { continue };
            let back = cam.unproject(u, v, d);
            worst = worst.max((back - p).abs().max());
        }
        assert!(worst < 1e-9, "round-trip error {worst}");
    }

    #[test]
    fn invalid_rotation_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.5;
        assert!(CameraModel::new(50.0, 50.0, 0.0, 0.0, r, Vector3::zeros(), (4, 4)).is_err());
    }

    #[test]
    fn zbuffer_keeps_minimum() {
        let map = rasterize_sparse_depth(&[(3.2, 5.8, 7.0), (3.9, 5.1, 4.0)], (8, 8));
        assert_eq!(map.get(5, 3), Some(4.0));
        assert_eq!(map.valid_count(), 1);

        let empty = rasterize_sparse_depth(&[], (4, 4));
        assert_eq!(empty.valid_count(), 0);
        assert_eq!(empty.get(0, 0), None);
    }

    #[test]
    fn depth_bins_partition_range() {
        let b = DepthBins::desk_default();
        b.validate().unwrap();
        assert!((b.width() - 0.8).abs() < 1e-12);
        assert_eq!(b.bin_of(1.0), Some(0));
        assert_eq!(b.bin_of(26.59), Some(31));
        assert_eq!(b.bin_of(0.99), None);
        assert_eq!(b.bin_of(26.6), None);
        assert!((b.midpoint(0) - 1.4).abs() < 1e-12);
    }

    fn identity_bev(c: usize, h: usize, w: usize, values: Vec<f64>) -> BevGrid {
        BevGrid::new(Tensor::new(&[c, h, w], values).unwrap(), -12.8, -12.8, 3.2).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let values: Vec<f64> = (0..2 * 8 * 8).map(|i| (i as f64 * 0.713).sin()).collect();
        let bev = identity_bev(2, 8, 8, values.clone());
        let warped = warp_bev(&bev, &EgoPose::identity(), &EgoPose::identity()).unwrap();
        assert_eq!(warped.values.to_vec(), values);
    }

    #[test]
    fn one_cell_translation_shifts_grid() {
        // ego moved +3.2 m in x between frames: current cell (y, x) reads
        // previous cell (y, x+1)
        let mut values = vec![0.0; 64];
        values[3 * 8 + 4] = 1.0; // y=3, x=4 in the previous frame
        let bev = identity_bev(1, 8, 8, values);
        let prev_pose = EgoPose::identity();
        let cur_pose = EgoPose::planar(3.2, 0.0, 0.0, 1.0);
        let warped = warp_bev(&bev, &prev_pose, &cur_pose).unwrap();
        let out = warped.values.to_vec();
        assert_eq!(out[3 * 8 + 3], 1.0, "feature moves one cell back in x");
        assert_eq!(out.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn warp_gradient_matches_fd() {
        let values: Vec<f64> = (0..32).map(|i| (i as f64 * 0.31).cos()).collect();
        let prev_pose = EgoPose::planar(0.0, 0.0, 0.0, 0.0);
        let cur_pose = EgoPose::planar(1.1, -0.7, 0.2, 1.0);
        let f = |args: &[Tensor]| {
            let bev = BevGrid::new(args[0].clone(), -6.4, -6.4, 3.2)?;
            Ok(warp_bev(&bev, &prev_pose, &cur_pose)?.values.sum_all()?)
        };
        let x = Tensor::new(&[2, 4, 4], values).unwrap();
        let err = crate::tensor::fd::check_gradients(&f, &[x], 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }
}
