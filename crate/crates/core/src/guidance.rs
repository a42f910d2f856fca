//! LiDAR occupancy guidance: lift the LiDAR BEV plane into a 3-D
//! volume, predict per-voxel occupancy, and gate the camera volume with
//! it. The gate is a plain broadcast product — no thresholding — so
//! gating stays linear in the camera features.

use crate::error::{Error, Result};
use crate::grid::{BevGrid, FeatureVolume, GridConfig, OccupancyVolume, PointCloud, VolumeConfig};
use crate::tensor::{ParamInit, Registry, Tensor};

/// Learnable tensors for the guidance path.
#[derive(Clone, Debug)]
pub struct GuidanceParams {
    /// `[C_bev, C_vol·Z]` per-cell column expansion.
    pub lift: Tensor,
    /// `[1, C_vol, 1, 1, 1]` occupancy projection.
    pub occ_head: Tensor,
}

impl GuidanceParams {
    pub fn create(
        reg: &mut Registry,
        prefix: &str,
        c_bev: usize,
        c_vol: usize,
        z_bins: usize,
    ) -> Result<GuidanceParams> {
        let lift = reg.param(
            &format!("{prefix}.lift"),
            &[c_bev, c_vol * z_bins],
            ParamInit::XavierUniform {
                fan_in: c_bev,
                fan_out: c_vol * z_bins,
            },
        )?;
        let occ_head = reg.param(
            &format!("{prefix}.occ"),
            &[1, c_vol, 1, 1, 1],
            ParamInit::XavierUniform {
                fan_in: c_vol,
                fan_out: 1,
            },
        )?;
        Ok(GuidanceParams { lift, occ_head })
    }
}

/// Expand each BEV cell into a feature column: a bias-free linear map
/// `C_bev → C_vol·Z` per cell, reshaped into `[C_vol, Z, H, W]`. Zero
/// cells produce zero columns, and a cell only ever feeds its own column.
pub fn lift_bev_to_3d(
    bev: &BevGrid,
    lift: &Tensor,
    grid: &GridConfig,
    vol: &VolumeConfig,
) -> Result<FeatureVolume> {
    let c_bev = bev.channels();
    if lift.rank() != 2 || lift.shape()[0] != c_bev {
        return Err(Error::dim(
            "lift_bev_to_3d",
            format!(
                "lift weight {:?} does not accept {c_bev} BEV channels",
                lift.shape()
            ),
        ));
    }
    let (h, w) = (bev.h(), bev.w());
    let z = vol.z_bins;
    let expanded = lift.shape()[1];
    if expanded % z != 0 {
        return Err(Error::dim(
            "lift_bev_to_3d",
            format!("lift width {expanded} is not a multiple of {z} z-bins"),
        ));
    }
    let c_vol = expanded / z;

    // [C_bev, H, W] → [H·W, C_bev] · lift → [H·W, C_vol·Z] → [C_vol, Z, H, W]
    let cells = bev
        .values
        .reshape(&[c_bev, h * w])?
        .transpose_last2()?
        .matmul(lift)?;
    // reorder (cell, c, z) → (c, z, cell) with one gather; index math is
    // cheaper to state than a chain of transposes over rank-3 views
    let mut indices = Vec::with_capacity(c_vol * z * h * w);
    for c in 0..c_vol {
        for zz in 0..z {
            for cell in 0..h * w {
                indices.push((cell * c_vol + c) * z + zz);
            }
        }
    }
    let values = cells
        .reshape(&[h * w * c_vol * z])?
        .gather(&indices, &[c_vol, z, h, w])?;
    FeatureVolume::new(
        values,
        grid.x_min,
        grid.y_min,
        grid.z_min,
        grid.bev_cell(),
        vol.z_cell(grid),
    )
}

/// 1×1×1 convolution to one channel plus sigmoid: per-voxel occupancy
/// strictly inside (0, 1).
pub fn occupancy_head(vol: &FeatureVolume, occ_head: &Tensor) -> Result<OccupancyVolume> {
    let logits = vol.values.conv3d(occ_head, 1, 0)?;
    OccupancyVolume::new(logits.sigmoid()?)
}

/// Eq-style broadcast gate: `out[c,z,h,w] = feat[c,z,h,w] · occ[0,z,h,w]`.
pub fn apply_occupancy_gate(feat: &FeatureVolume, occ: &OccupancyVolume) -> Result<FeatureVolume> {
    if feat.values.shape()[1..] != occ.values.shape()[1..] {
        return Err(Error::dim(
            "apply_occupancy_gate",
            format!(
                "volume {:?} and occupancy {:?} disagree spatially",
                feat.values.shape(),
                occ.values.shape()
            ),
        ));
    }
    feat.with_values(feat.values.mul_bcast(&occ.values)?)
}

/// Point-presence ground truth at volume resolution: 1 where a voxel
/// contains at least one in-range point.
pub fn occupancy_ground_truth(
    points: &PointCloud,
    grid: &GridConfig,
    vol: &VolumeConfig,
) -> Vec<f64> {
    let (nx, ny, nz) = vol.dims(grid);
    let mut gt = vec![0.0; nz * ny * nx];
    for p in points {
        if let Some((ix, iy, iz)) = vol.voxel_index(grid, &[p[0], p[1], p[2]]) {
            gt[(iz * ny + iy) * nx + ix] = 1.0;
        }
    }
    gt
}

/// Weighted binary cross-entropy against point presence. The positive
/// class is upweighted by #neg/#pos (clamped to [1, 100]) because
/// occupied voxels are rare.
pub fn occupancy_loss(
    occ: &OccupancyVolume,
    points: &PointCloud,
    grid: &GridConfig,
    vol: &VolumeConfig,
) -> Result<Tensor> {
    let gt = occupancy_ground_truth(points, grid, vol);
    let n = gt.len();
    if occ.values.len() != n {
        return Err(Error::dim(
            "occupancy_loss",
            format!(
                "occupancy volume {:?} does not match {} ground-truth voxels",
                occ.values.shape(),
                n
            ),
        ));
    }
    let pos = gt.iter().filter(|&&v| v == 1.0).count();
    let neg = n - pos;
    let pos_weight = if pos == 0 {
        1.0
    } else {
        (neg as f64 / pos as f64).clamp(1.0, 100.0)
    };

    let flat = occ.values.reshape(&[n])?;
    let target = Tensor::new(&[n], gt)?;
    let ones = Tensor::full(&[n], 1.0)?;
    // −[w⁺·t·ln p + (1−t)·ln(1−p)], averaged over voxels
    let pos_term = target.mul(&flat.ln()?)?.scale(pos_weight)?;
    let neg_term = ones.sub(&target)?.mul(&ones.sub(&flat)?.ln()?)?;
    pos_term.add(&neg_term)?.sum_all()?.scale(-1.0 / n as f64)
}
