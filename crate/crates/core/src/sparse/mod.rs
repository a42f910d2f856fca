//! Sparse voxel sets: voxelization, sparse 3-D convolution, the
//! multi-scale downsampling chain, scale union, and height compression
//! down to a BEV grid.
//!
//! A [`SparseVoxelSet`] stores only occupied cells: integer coordinates
//! (in grid units at the set's stride) plus one feature row per cell.
//! Coordinates are kept in ascending (x, y, z) order everywhere, and all
//! reductions iterate in that canonical order, so every op here is
//! bit-deterministic regardless of input ordering or thread count.

mod bev;
mod conv;

pub use bev::{align_and_union, sparse_height_compression, HeightCompressionConfig};
pub use conv::{downsample_chain, sparse_conv3d, ChainConfig, ChainParams};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridConfig, PointCloud};
use crate::tensor::Tensor;

/// Channels produced by [`voxelize`]: x, y, z, intensity, and the three
/// offsets of the point mean from the voxel center.
pub const VOXEL_FEATURES: usize = 7;

/// Occupied cells of a 3-D grid at some power-of-two stride.
#[derive(Clone, Debug)]
pub struct SparseVoxelSet {
    coords: Vec<[u32; 3]>,
    feats: Tensor,
    stride: u32,
    /// (X, Y, Z) cell extent of the underlying stride-1 grid.
    grid_shape: (usize, usize, usize),
}

impl SparseVoxelSet {
    pub fn new(
        coords: Vec<[u32; 3]>,
        feats: Tensor,
        stride: u32,
        grid_shape: (usize, usize, usize),
    ) -> Result<SparseVoxelSet> {
        if !stride.is_power_of_two() {
            return Err(Error::contract("sparse_voxel_set", "stride must be a power of two"));
        }
        if feats.rank() != 2 || feats.shape()[0] != coords.len() {
            return Err(Error::dim(
                "sparse_voxel_set",
                format!(
                    "feature shape {:?} does not match {} coordinates",
                    feats.shape(),
                    coords.len()
                ),
            ));
        }
        let dims = dims_at(grid_shape, stride);
        let mut prev: Option<[u32; 3]> = None;
        for &c in &coords {
            if let Some(p) = prev {
                if c <= p {
                    return Err(Error::contract(
                        "sparse_voxel_set",
                        "coordinates must be strictly ascending (unique, sorted)",
                    ));
                }
            }
            if c[0] as usize >= dims.0 || c[1] as usize >= dims.1 || c[2] as usize >= dims.2 {
                return Err(Error::contract(
                    "sparse_voxel_set",
                    format!("coordinate {c:?} outside {dims:?} at stride {stride}"),
                ));
            }
            prev = Some(c);
        }
        Ok(SparseVoxelSet {
            coords,
            feats,
            stride,
            grid_shape,
        })
    }

    /// Empty set with the given channel width.
    pub fn empty(channels: usize, stride: u32, grid_shape: (usize, usize, usize)) -> SparseVoxelSet {
        SparseVoxelSet {
            coords: Vec::new(),
            feats: Tensor::new(&[0, channels], Vec::new()).expect("empty tensor"),
            stride,
            grid_shape,
        }
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn feats(&self) -> &Tensor {
        &self.feats
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        self.grid_shape
    }

    pub fn channels(&self) -> usize {
        self.feats.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Cell counts per axis at this set's stride.
    pub fn dims(&self) -> (usize, usize, usize) {
        dims_at(self.grid_shape, self.stride)
    }

    /// Same coordinates and metadata, new feature rows.
    pub fn with_feats(&self, feats: Tensor) -> Result<SparseVoxelSet> {
        SparseVoxelSet::new(self.coords.clone(), feats, self.stride, self.grid_shape)
    }

    /// Materialize as a dense `[C, Z, Y, X]` tensor (empty cells zero).
    /// This is the reference representation the sparse ops are tested
    /// against; it is not differentiable.
    pub fn densify(&self) -> Tensor {
        let (nx, ny, nz) = self.dims();
        let c = self.channels();
        let mut dense = vec![0.0; c * nz * ny * nx];
        let fv = self.feats.values();
        for (row, &[x, y, z]) in self.coords.iter().enumerate() {
            for ch in 0..c {
                let at = ((ch * nz + z as usize) * ny + y as usize) * nx + x as usize;
                dense[at] = fv[row * c + ch];
            }
        }
        Tensor::new(&[c, nz, ny, nx], dense).expect("dense layout")
    }

    /// Row index of a coordinate, if occupied.
    pub fn row_of(&self, coord: [u32; 3]) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }
}

pub(crate) fn dims_at(grid_shape: (usize, usize, usize), stride: u32) -> (usize, usize, usize) {
    let s = stride as usize;
    (
        grid_shape.0.div_ceil(s),
        grid_shape.1.div_ceil(s),
        grid_shape.2.div_ceil(s),
    )
}

/// Metric quantization parameters for [`voxelize`].
#[derive(Clone, Debug)]
pub struct VoxelizationConfig {
    pub voxel_size: (f64, f64, f64),
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub max_points_per_voxel: usize,
}

impl VoxelizationConfig {
    pub fn from_grid(grid: &GridConfig, max_points_per_voxel: usize) -> VoxelizationConfig {
        VoxelizationConfig {
            voxel_size: grid.voxel,
            range_min: [grid.x_min, grid.y_min, grid.z_min],
            range_max: [grid.x_max, grid.y_max, grid.z_max],
            max_points_per_voxel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dx, dy, dz) = self.voxel_size;
        if dx <= 0.0 || dy <= 0.0 || dz <= 0.0 {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        for a in 0..3 {
            if self.range_min[a] >= self.range_max[a] {
                return Err(Error::Config(format!(
                    "voxelization range is empty on axis {a}"
                )));
            }
        }
        if self.max_points_per_voxel == 0 {
            return Err(Error::Config("max_points_per_voxel must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        let n = |a: usize, step: f64| ((self.range_max[a] - self.range_min[a]) / step).ceil() as usize;
        (
            n(0, self.voxel_size.0),
            n(1, self.voxel_size.1),
            n(2, self.voxel_size.2),
        )
    }

    fn quantize(&self, p: &[f64; 4]) -> Option<[u32; 3]> {
        let shape = self.grid_shape();
        let dims = [shape.0, shape.1, shape.2];
        let steps = [self.voxel_size.0, self.voxel_size.1, self.voxel_size.2];
        let mut out = [0u32; 3];
        for a in 0..3 {
            if p[a] < self.range_min[a] || p[a] >= self.range_max[a] {
                return None;
            }
            let i = ((p[a] - self.range_min[a]) / steps[a]).floor() as usize;
            if i >= dims[a] {
                return None;
            }
            out[a] = i as u32;
        }
        Some(out)
    }

    fn voxel_center(&self, c: [u32; 3]) -> [f64; 3] {
        let steps = [self.voxel_size.0, self.voxel_size.1, self.voxel_size.2];
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = self.range_min[a] + (c[a] as f64 + 0.5) * steps[a];
        }
        out
    }
}

/// Quantize a point cloud. Each occupied voxel's feature row is the mean
/// over its first `max_points_per_voxel` points (cloud order) of
/// (x, y, z, intensity, offset-from-voxel-center); later points and
/// out-of-range points are dropped.
pub fn voxelize(points: &PointCloud, cfg: &VoxelizationConfig) -> Result<SparseVoxelSet> {
    cfg.validate().map_err(|e| match e {
        Error::Config(msg) => Error::contract("voxelize", msg),
        other => other,
    })?;
    let mut acc: BTreeMap<[u32; 3], ([f64; VOXEL_FEATURES], usize)> = BTreeMap::new();
    for p in points {
        let Some(coord) = cfg.quantize(p) else { continue };
        let (sums, count) = acc.entry(coord).or_insert(([0.0; VOXEL_FEATURES], 0));
        if *count >= cfg.max_points_per_voxel {
            continue;
        }
        let center = cfg.voxel_center(coord);
        sums[0] += p[0];
        sums[1] += p[1];
        sums[2] += p[2];
        sums[3] += p[3];
        sums[4] += p[0] - center[0];
        sums[5] += p[1] - center[1];
        sums[6] += p[2] - center[2];
        *count += 1;
    }
    let mut coords = Vec::with_capacity(acc.len());
    let mut feats = Vec::with_capacity(acc.len() * VOXEL_FEATURES);
    for (coord, (sums, count)) in acc {
        coords.push(coord);
        feats.extend(sums.iter().map(|s| s / count as f64));
    }
    let n = coords.len();
    SparseVoxelSet::new(
        coords,
        Tensor::new(&[n, VOXEL_FEATURES], feats)?,
        1,
        cfg.grid_shape(),
    )
}

const SPARSE_MAGIC: &[u8; 4] = b"BFSV";

/// Write a set in the `BFSV` format: magic, stride, grid shape, channel
/// count, voxel count, coordinates, then feature rows (all little-endian).
pub fn save_sparse(set: &SparseVoxelSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<File>, bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path.display().to_string(), e));
    put(&mut w, SPARSE_MAGIC)?;
    put(&mut w, &set.stride.to_le_bytes())?;
    for extent in [set.grid_shape.0, set.grid_shape.1, set.grid_shape.2] {
        put(&mut w, &(extent as u64).to_le_bytes())?;
    }
    put(&mut w, &(set.channels() as u32).to_le_bytes())?;
    put(&mut w, &(set.len() as u32).to_le_bytes())?;
    for c in &set.coords {
        for axis in c {
            put(&mut w, &axis.to_le_bytes())?;
        }
    }
    for v in set.feats.values().iter() {
        put(&mut w, &v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_sparse(path: &Path) -> Result<SparseVoxelSet> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    fn take<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(buf)
    }
    let magic: [u8; 4] = take(&mut r, path)?;
    if &magic != SPARSE_MAGIC {
        return Err(Error::Format {
            what: "sparse voxel file",
            details: format!("bad magic {magic:?}"),
        });
    }
    let stride = u32::from_le_bytes(take(&mut r, path)?);
    let mut shape = [0usize; 3];
    for extent in &mut shape {
        let v = u64::from_le_bytes(take(&mut r, path)?);
        *extent = usize::try_from(v).map_err(|_| Error::Format {
            what: "sparse voxel file",
            details: format!("grid extent {v} too large"),
        })?;
    }
    let channels = u32::from_le_bytes(take(&mut r, path)?) as usize;
    let count = u32::from_le_bytes(take(&mut r, path)?) as usize;
    let mut coords = Vec::with_capacity(count);
    for _ in 0..count {
        let x = u32::from_le_bytes(take(&mut r, path)?);
        let y = u32::from_le_bytes(take(&mut r, path)?);
        let z = u32::from_le_bytes(take(&mut r, path)?);
        coords.push([x, y, z]);
    }
    let mut feats = Vec::with_capacity(count * channels);
    for _ in 0..count * channels {
        let v = f64::from_le_bytes(take(&mut r, path)?);
        if !v.is_finite() {
            return Err(Error::Format {
                what: "sparse voxel file",
                details: "non-finite feature value".into(),
            });
        }
        feats.push(v);
    }
    SparseVoxelSet::new(
        coords,
        Tensor::new(&[count, channels], feats)?,
        stride,
        (shape[0], shape[1], shape[2]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn desk_cfg() -> VoxelizationConfig {
        VoxelizationConfig::from_grid(&GridConfig::desk_default(), 8)
    }

    #[test]
    fn empty_cloud_gives_empty_set() {
        let set = voxelize(&Vec::new(), &desk_cfg()).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.channels(), VOXEL_FEATURES);
        assert_eq!(set.grid_shape(), (64, 64, 16));
    }

    #[test]
    fn center_point_has_zero_offsets() {
        let cfg = desk_cfg();
        // center of voxel (32, 32, 2): the desk grid starts at (−12.8, −12.8, −1.0)
        let p = [0.2, 0.2, 0.0, 0.5];
        let set = voxelize(&vec![p], &cfg).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.coords()[0], [32, 32, 2]);
        let f = set.feats().to_vec();
        assert_eq!(&f[..4], &[0.2, 0.2, 0.0, 0.5]);
        for offset in &f[4..] {
            assert!(offset.abs() < 1e-12, "offsets {f:?}");
        }
    }

    #[test]
    fn voxel_count_matches_quantization_oracle() {
        let cfg = desk_cfg();
        let mut points = Vec::new();
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            points.push([
                next() * 30.0 - 15.0,
                next() * 30.0 - 15.0,
                next() * 8.0 - 2.0,
                next(),
            ]);
        }
        let set = voxelize(&points, &cfg).unwrap();
        let oracle: HashSet<[u32; 3]> = points
            .iter()
            .filter_map(|p| cfg.quantize(p))
            .collect();
        assert_eq!(set.len(), oracle.len());
        assert!(set.coords().iter().all(|c| oracle.contains(c)));
    }

    #[test]
    fn max_points_truncates_first_come() {
        let mut cfg = desk_cfg();
        cfg.max_points_per_voxel = 2;
        // three points in one voxel; only the first two count
        let points = vec![
            [0.21, 0.2, 0.0, 1.0],
            [0.23, 0.2, 0.0, 3.0],
            [0.39, 0.2, 0.0, 100.0],
        ];
        let set = voxelize(&points, &cfg).unwrap();
        assert_eq!(set.len(), 1);
        let f = set.feats().to_vec();
        assert!((f[0] - 0.22).abs() < 1e-12);
        assert!((f[3] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_points_dropped() {
        let set = voxelize(&vec![[99.0, 0.0, 0.0, 0.0], [0.0, 0.0, 40.0, 0.0]], &desk_cfg()).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn construction_rejects_bad_sets() {
        let feats = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        // duplicate coordinate
        assert!(SparseVoxelSet::new(vec![[1, 1, 1], [1, 1, 1]], feats.clone(), 1, (4, 4, 4)).is_err());
        // unsorted
        assert!(SparseVoxelSet::new(vec![[2, 0, 0], [1, 0, 0]], feats.clone(), 1, (4, 4, 4)).is_err());
        // out of bounds at stride 2: dims are ceil(4/2) = 2
        assert!(SparseVoxelSet::new(vec![[0, 0, 0], [2, 0, 0]], feats.clone(), 2, (4, 4, 4)).is_err());
        // row mismatch
        assert!(SparseVoxelSet::new(vec![[0, 0, 0]], feats, 1, (4, 4, 4)).is_err());
    }

    #[test]
    fn sparse_file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("bfsv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("set.bfsv");
        let set = SparseVoxelSet::new(
            vec![[0, 1, 2], [3, 2, 1]],
            Tensor::new(&[2, 3], vec![1.0, -2.5, 3e-7, 0.0, -0.0, 4.25]).unwrap(),
            2,
            (8, 8, 8),
        )
        .unwrap();
        save_sparse(&set, &path).unwrap();
        let back = load_sparse(&path).unwrap();
        assert_eq!(back.coords(), set.coords());
        assert_eq!(back.stride(), 2);
        assert_eq!(back.grid_shape(), (8, 8, 8));
        assert_eq!(back.feats().to_vec(), set.feats().to_vec());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn densify_places_features() {
        let set = SparseVoxelSet::new(
            vec![[1, 0, 0], [3, 2, 1]],
            Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
            1,
            (4, 3, 2),
        )
        .unwrap();
        let dense = set.densify();
        assert_eq!(dense.shape(), &[2, 2, 3, 4]);
        let v = dense.to_vec();
        // [c, z, y, x] with dims (x=4, y=3, z=2)
        assert_eq!(v[(0 * 2 + 0) * 12 + 0 * 4 + 1], 5.0);
        assert_eq!(v[(1 * 2 + 0) * 12 + 0 * 4 + 1], 6.0);
        assert_eq!(v[(0 * 2 + 1) * 12 + 2 * 4 + 3], 7.0);
        assert_eq!(v[(1 * 2 + 1) * 12 + 2 * 4 + 3], 8.0);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 4);
    }
}
