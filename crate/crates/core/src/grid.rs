//! Metric grid layout shared by every spatial module.
//!
//! One [`GridConfig`] fixes the metric box and the stride-1 voxel size;
//! everything else is derived from it: the multi-scale sparse grids
//! (ceil-divided per stride), the BEV grid at the union stride, and the
//! camera/occupancy volume (same x–y footprint as the BEV, with its own
//! number of z bins).
//!
//! Axis convention: coordinates are (x, y, z); dense tensors index as
//! `[C, Z, H, W]` with H ≡ y rows and W ≡ x columns.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride at which the multi-scale LiDAR features are unified into a BEV
/// grid; also the total downsampling factor of the camera backbone.
pub const UNION_STRIDE: usize = 8;

/// A point cloud row: x, y, z (meters, ego frame) and intensity.
pub type PointCloud = Vec<[f64; 4]>;

/// Metric bounding box and stride-1 voxel size of the perception space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Meters per stride-1 voxel along (x, y, z); x and y must be equal
    /// (BEV cells are square).
    pub voxel: (f64, f64, f64),
}

impl GridConfig {
    /// Desk-scale default: 64×64×16 voxels of 0.4 m over ±12.8 m × [−1, 5.4] m.
    pub fn desk_default() -> GridConfig {
        GridConfig {
            x_min: -12.8,
            x_max: 12.8,
            y_min: -12.8,
            y_max: 12.8,
            z_min: -1.0,
            z_max: 5.4,
            voxel: (0.4, 0.4, 0.4),
        }
    }

    /// The full-scale configuration from the reference setup
    /// ((0.075, 0.075, 0.2) m voxels over ±54 m). Available for
    /// completeness; far too large for the test suite.
    pub fn full_scale() -> GridConfig {
        GridConfig {
            x_min: -54.0,
            x_max: 54.0,
            y_min: -54.0,
            y_max: 54.0,
            z_min: -5.0,
            z_max: 3.0,
            voxel: (0.075, 0.075, 0.2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dx, dy, dz) = self.voxel;
        if dx <= 0.0 || dy <= 0.0 || dz <= 0.0 {
            return Err(Error::Config(format!(
                "voxel size must be positive, got {:?}",
                self.voxel
            )));
        }
        if (dx - dy).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "BEV cells must be square: voxel dx {dx} != dy {dy}"
            )));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max || self.z_min >= self.z_max {
            return Err(Error::Config("grid range min must be below max".into()));
        }
        let (x, y, _z) = self.dims();
        // The downsampling chain reaches stride 32; x and y must survive
        // it. The z extent is exempt — it is deliberately shallow and the
        // deeper scales keep at least one z cell via ceil division.
        if x < 32 || y < 32 {
            return Err(Error::Config(format!(
                "grid of {x}×{y} cells in x×y is smaller than the deepest stride (32)"
            )));
        }
        Ok(())
    }

    /// Stride-1 cell counts (X, Y, Z).
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            cells(self.x_min, self.x_max, self.voxel.0),
            cells(self.y_min, self.y_max, self.voxel.1),
            cells(self.z_min, self.z_max, self.voxel.2),
        )
    }

    /// Cell counts at a coarser stride (ceil division per axis).
    pub fn dims_at_stride(&self, stride: usize) -> (usize, usize, usize) {
        let (x, y, z) = self.dims();
        (x.div_ceil(stride), y.div_ceil(stride), z.div_ceil(stride))
    }

    /// BEV cell counts (W=x, H=y) at the union stride.
    pub fn bev_dims(&self) -> (usize, usize) {
        let (x, y, _) = self.dims_at_stride(UNION_STRIDE);
        (x, y)
    }

    /// Meters per BEV cell.
    pub fn bev_cell(&self) -> f64 {
        self.voxel.0 * UNION_STRIDE as f64
    }

    /// Stride-1 voxel containing a metric point, if inside the grid.
    pub fn voxel_index(&self, p: &[f64]) -> Option<(usize, usize, usize)> {
        let (nx, ny, nz) = self.dims();
        let ix = quantize(p[0], self.x_min, self.voxel.0, nx)?;
        let iy = quantize(p[1], self.y_min, self.voxel.1, ny)?;
        let iz = quantize(p[2], self.z_min, self.voxel.2, nz)?;
        Some((ix, iy, iz))
    }

    /// Metric center of a stride-1 voxel.
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> (f64, f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.voxel.0,
            self.y_min + (iy as f64 + 0.5) * self.voxel.1,
            self.z_min + (iz as f64 + 0.5) * self.voxel.2,
        )
    }
}

fn cells(min: f64, max: f64, step: f64) -> usize {
    ((max - min) / step).round().max(1.0) as usize
}

fn quantize(v: f64, min: f64, step: f64, n: usize) -> Option<usize> {
    let i = ((v - min) / step).floor();
    if i < 0.0 || i >= n as f64 {
        None
    } else {
        Some(i as usize)
    }
}

/// Resolution of the camera feature / occupancy volume: the BEV footprint
/// with `z_bins` vertical cells over the grid's z range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeConfig {
    pub z_bins: usize,
}

impl VolumeConfig {
    pub fn desk_default() -> VolumeConfig {
        VolumeConfig { z_bins: 8 }
    }

    /// Volume cell counts (X, Y, Z).
    pub fn dims(&self, grid: &GridConfig) -> (usize, usize, usize) {
        let (x, y) = grid.bev_dims();
        (x, y, self.z_bins)
    }

    /// Meters per volume cell along z.
    pub fn z_cell(&self, grid: &GridConfig) -> f64 {
        (grid.z_max - grid.z_min) / self.z_bins as f64
    }

    /// Volume voxel containing a metric point, if inside the volume.
    pub fn voxel_index(&self, grid: &GridConfig, p: &[f64]) -> Option<(usize, usize, usize)> {
        let (nx, ny, nz) = self.dims(grid);
        let ix = quantize(p[0], grid.x_min, grid.bev_cell(), nx)?;
        let iy = quantize(p[1], grid.y_min, grid.bev_cell(), ny)?;
        let iz = quantize(p[2], grid.z_min, self.z_cell(grid), nz)?;
        Some((ix, iy, iz))
    }
}

/// A 2-D top-down feature grid: `values[C, H, W]` with square cells.
#[derive(Clone, Debug)]
pub struct BevGrid {
    pub values: Tensor,
    pub x_min: f64,
    pub y_min: f64,
    /// Meters per cell.
    pub cell: f64,
}

impl BevGrid {
    pub fn new(values: Tensor, x_min: f64, y_min: f64, cell: f64) -> Result<BevGrid> {
        if values.rank() != 3 {
            return Err(Error::dim(
                "bev_grid",
                format!("expected values[C×H×W], got {:?}", values.shape()),
            ));
        }
        if cell <= 0.0 {
            return Err(Error::contract("bev_grid", "cell size must be positive"));
        }
        Ok(BevGrid {
            values,
            x_min,
            y_min,
            cell,
        })
    }

    /// Zero grid matching a config's BEV layout.
    pub fn zeros(grid: &GridConfig, channels: usize) -> Result<BevGrid> {
        let (w, h) = grid.bev_dims();
        BevGrid::new(
            Tensor::zeros(&[channels, h, w])?,
            grid.x_min,
            grid.y_min,
            grid.bev_cell(),
        )
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[2]
    }

    /// Metric center of cell (row, col) = (y index, x index).
    pub fn cell_center(&self, iy: usize, ix: usize) -> (f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.cell,
            self.y_min + (iy as f64 + 0.5) * self.cell,
        )
    }

    /// Same extent, different values (shape must match).
    pub fn with_values(&self, values: Tensor) -> Result<BevGrid> {
        if values.shape()[1..] != self.values.shape()[1..] {
            return Err(Error::dim(
                "bev_grid",
                format!(
                    "replacement spatial shape {:?} != {:?}",
                    &values.shape()[1..],
                    &self.values.shape()[1..]
                ),
            ));
        }
        BevGrid::new(values, self.x_min, self.y_min, self.cell)
    }
}

/// A 3-D feature volume: `values[C, Z, H, W]` over the BEV footprint.
#[derive(Clone, Debug)]
pub struct FeatureVolume {
    pub values: Tensor,
    pub x_min: f64,
    pub y_min: f64,
    pub z_min: f64,
    /// Meters per cell in x and y.
    pub cell_xy: f64,
    /// Meters per cell in z.
    pub cell_z: f64,
}

impl FeatureVolume {
    pub fn new(
        values: Tensor,
        x_min: f64,
        y_min: f64,
        z_min: f64,
        cell_xy: f64,
        cell_z: f64,
    ) -> Result<FeatureVolume> {
        if values.rank() != 4 {
            return Err(Error::dim(
                "feature_volume",
                format!("expected values[C×Z×H×W], got {:?}", values.shape()),
            ));
        }
        Ok(FeatureVolume {
            values,
            x_min,
            y_min,
            z_min,
            cell_xy,
            cell_z,
        })
    }

    pub fn zeros(grid: &GridConfig, vol: &VolumeConfig, channels: usize) -> Result<FeatureVolume> {
        let (x, y, z) = vol.dims(grid);
        FeatureVolume::new(
            Tensor::zeros(&[channels, z, y, x])?,
            grid.x_min,
            grid.y_min,
            grid.z_min,
            grid.bev_cell(),
            vol.z_cell(grid),
        )
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn z(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn h(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn with_values(&self, values: Tensor) -> Result<FeatureVolume> {
        if values.shape()[1..] != self.values.shape()[1..] {
            return Err(Error::dim(
                "feature_volume",
                format!(
                    "replacement spatial shape {:?} != {:?}",
                    &values.shape()[1..],
                    &self.values.shape()[1..]
                ),
            ));
        }
        FeatureVolume::new(
            values,
            self.x_min,
            self.y_min,
            self.z_min,
            self.cell_xy,
            self.cell_z,
        )
    }
}

/// Per-voxel occupancy probabilities, `values[1, Z, H, W]`, strictly
/// inside (0, 1).
#[derive(Clone, Debug)]
pub struct OccupancyVolume {
    pub values: Tensor,
}

impl OccupancyVolume {
    pub fn new(values: Tensor) -> Result<OccupancyVolume> {
        if values.rank() != 4 || values.shape()[0] != 1 {
            return Err(Error::dim(
                "occupancy_volume",
                format!("expected values[1×Z×H×W], got {:?}", values.shape()),
            ));
        }
        if values.values().iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(Error::contract(
                "occupancy_volume",
                "entries must lie strictly inside (0, 1)",
            ));
        }
        Ok(OccupancyVolume { values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_layout() {
        let g = GridConfig::desk_default();
        g.validate().unwrap();
        assert_eq!(g.dims(), (64, 64, 16));
        assert_eq!(g.dims_at_stride(8), (8, 8, 2));
        assert_eq!(g.dims_at_stride(32), (2, 2, 1));
        assert_eq!(g.bev_dims(), (8, 8));
        assert!((g.bev_cell() - 3.2).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut g = GridConfig::desk_default();
        g.voxel = (0.4, 0.5, 0.4);
        assert!(g.validate().is_err(), "non-square BEV cells");

        let mut g = GridConfig::desk_default();
        g.x_max = g.x_min + 4.0; // only 10 cells in x
        assert!(g.validate().is_err(), "too small for stride 32");

        let mut g = GridConfig::desk_default();
        g.z_min = 10.0;
        assert!(g.validate().is_err(), "inverted range");
    }

    #[test]
    fn voxel_index_quantization() {
        let g = GridConfig::desk_default();
        assert_eq!(g.voxel_index(&[-12.8, -12.8, -1.0, 0.0]), Some((0, 0, 0)));
        assert_eq!(g.voxel_index(&[0.0, 0.0, 0.0, 0.0]), Some((32, 32, 2)));
        assert_eq!(g.voxel_index(&[12.81, 0.0, 0.0, 0.0]), None);
        assert_eq!(g.voxel_index(&[0.0, 0.0, 5.41, 0.0]), None);

        // centers round-trip to their own cell
        let (cx, cy, cz) = g.voxel_center(10, 20, 5);
        assert_eq!(g.voxel_index(&[cx, cy, cz, 0.0]), Some((10, 20, 5)));
    }

    #[test]
    fn volume_layout() {
        let g = GridConfig::desk_default();
        let v = VolumeConfig::desk_default();
        assert_eq!(v.dims(&g), (8, 8, 8));
        assert!((v.z_cell(&g) - 0.8).abs() < 1e-12);
        assert_eq!(v.voxel_index(&g, &[0.0, 0.0, 0.0, 0.0]), Some((4, 4, 1)));
    }

    #[test]
    fn occupancy_volume_enforces_open_interval() {
        let ok = Tensor::full(&[1, 2, 2, 2], 0.5).unwrap();
        assert!(OccupancyVolume::new(ok).is_ok());
        let bad = Tensor::full(&[1, 2, 2, 2], 1.0).unwrap();
        assert!(OccupancyVolume::new(bad).is_err());
    }
}
