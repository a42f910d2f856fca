//! Multi-scale union and height compression: the step that flattens the
//! sparse LiDAR pyramid into a dense BEV feature grid.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{BevGrid, GridConfig, UNION_STRIDE};
use crate::par;
use crate::sparse::{dims_at, SparseVoxelSet};
use crate::tensor::{Tensor, VjpCtx};

/// Merge the stride-8/16/32 stages onto the stride-8 grid. Positions
/// scale by 2 and 4 (exact integers, all three axes); colliding
/// coordinates sum their features. Scaled coordinates that would leave
/// the stride-8 grid are clamped to its edge.
pub fn align_and_union(
    f4: &SparseVoxelSet,
    f5: &SparseVoxelSet,
    f6: &SparseVoxelSet,
) -> Result<SparseVoxelSet> {
    let base = UNION_STRIDE as u32;
    let strides = [f4.stride(), f5.stride(), f6.stride()];
    if strides != [base, base * 2, base * 4] {
        return Err(Error::contract(
            "align_and_union",
            format!("expected strides [8, 16, 32], got {strides:?}"),
        ));
    }
    let channels = f4.channels();
    if f5.channels() != channels || f6.channels() != channels {
        return Err(Error::dim(
            "align_and_union",
            format!(
                "channel widths differ: {} / {} / {}",
                channels,
                f5.channels(),
                f6.channels()
            ),
        ));
    }
    let grid_shape = f4.grid_shape();
    if f5.grid_shape() != grid_shape || f6.grid_shape() != grid_shape {
        return Err(Error::contract("align_and_union", "inputs cover different grids"));
    }

    let dims = dims_at(grid_shape, base);
    let limit = [dims.0 as u32 - 1, dims.1 as u32 - 1, dims.2 as u32 - 1];
    let sources = [f4, f5, f6];
    let mut merged: BTreeMap<[u32; 3], Vec<(usize, u32)>> = BTreeMap::new();
    for (src, set) in sources.iter().enumerate() {
        let factor = 1u32 << src;
        for (row, c) in set.coords().iter().enumerate() {
            let scaled = [
                (c[0] * factor).min(limit[0]),
                (c[1] * factor).min(limit[1]),
                (c[2] * factor).min(limit[2]),
            ];
            merged.entry(scaled).or_default().push((src, row as u32));
        }
    }

    let out_coords: Vec<[u32; 3]> = merged.keys().copied().collect();
    let n_out = out_coords.len();
    if n_out == 0 {
        return Ok(SparseVoxelSet::empty(channels, base, grid_shape));
    }
    let contributors: Vec<Vec<(usize, u32)>> = merged.into_values().collect();
    // row → union row, per source, for the gradient gathers
    let mut out_row_of: [Vec<u32>; 3] = [
        vec![0; f4.len()],
        vec![0; f5.len()],
        vec![0; f6.len()],
    ];
    for (out_row, contrib) in contributors.iter().enumerate() {
        for &(src, row) in contrib {
            out_row_of[src][row as usize] = out_row as u32;
        }
    }

    let refs = [f4.feats().values(), f5.feats().values(), f6.feats().values()];
    let views: [&[f64]; 3] = [&refs[0], &refs[1], &refs[2]];
    let contrib_ref: &[Vec<(usize, u32)>] = &contributors;
    let mut out = vec![0.0; n_out * channels];
    par::for_each_chunk_mut(&mut out, channels, |out_row, dst| {
        for &(src, row) in &contrib_ref[out_row] {
            let f = &views[src][row as usize * channels..][..channels];
            for (c, acc) in dst.iter_mut().enumerate() {
                *acc += f[c];
            }
        }
    });
    drop(refs);

    let values = Tensor::from_op(
        "align_and_union",
        vec![f4.feats().clone(), f5.feats().clone(), f6.feats().clone()],
        vec![n_out, channels],
        out,
        Box::new(move |ctx: &VjpCtx| {
            let g = ctx.out_grad;
            out_row_of
                .iter()
                .map(|map| {
                    let mut d = vec![0.0; map.len() * channels];
                    par::for_each_chunk_mut(&mut d, channels, |row, dst| {
                        let src = &g[map[row] as usize * channels..][..channels];
                        dst.copy_from_slice(src);
                    });
                    Some(d)
                })
                .collect()
        }),
    )?;
    SparseVoxelSet::new(out_coords, values, base, grid_shape)
}

/// Height-compression geometry: how many vertical bins feed the learned
/// projection. Columns shorter than `z_bins` zero-pad the missing bins;
/// taller ones clamp extra cells into the top bin, so the projection
/// weight shape is independent of the grid.
#[derive(Clone, Copy, Debug)]
pub struct HeightCompressionConfig {
    pub z_bins: usize,
}

impl HeightCompressionConfig {
    pub fn desk_default() -> HeightCompressionConfig {
        HeightCompressionConfig { z_bins: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_bins == 0 {
            return Err(Error::Config("height compression needs at least one z-bin".into()));
        }
        Ok(())
    }

    pub fn bin_of(&self, z: u32) -> usize {
        (z as usize).min(self.z_bins - 1)
    }

    /// Input width of the projection for a set with `channels` features.
    pub fn stacked_width(&self, channels: usize) -> usize {
        self.z_bins * channels
    }
}

/// Collapse a sparse set to a BEV grid: per occupied (x, y) column,
/// concatenate per-z-bin feature sums, then apply the learnable
/// projection `w[z_bins·C × C_bev]`. Unoccupied columns stay exactly
/// zero — which is also why the projection has no bias term.
pub fn sparse_height_compression(
    x: &SparseVoxelSet,
    cfg: &HeightCompressionConfig,
    w: &Tensor,
    grid: &GridConfig,
) -> Result<BevGrid> {
    cfg.validate().map_err(|e| match e {
        Error::Config(msg) => Error::contract("sparse_height_compression", msg),
        other => other,
    })?;
    let channels = x.channels();
    let stacked = cfg.stacked_width(channels);
    if w.rank() != 2 || w.shape()[0] != stacked {
        return Err(Error::dim(
            "sparse_height_compression",
            format!(
                "projection must be [{stacked} × C_bev] for {} z-bins × {channels} channels, got {:?}",
                cfg.z_bins,
                w.shape()
            ),
        ));
    }
    if grid.dims() != x.grid_shape() {
        return Err(Error::contract(
            "sparse_height_compression",
            "grid config does not match the set's grid shape",
        ));
    }
    let c_bev = w.shape()[1];
    let (nx, ny, _) = x.dims();
    let cell = grid.voxel.0 * x.stride() as f64;
    if x.is_empty() {
        let values = Tensor::new(&[c_bev, ny, nx], vec![0.0; c_bev * ny * nx])?;
        return BevGrid::new(values, grid.x_min, grid.y_min, cell);
    }

    // canonical column order: ascending (y, x), matching dense layout
    let mut columns: BTreeMap<[u32; 2], Vec<(u32, usize)>> = BTreeMap::new();
    for (row, c) in x.coords().iter().enumerate() {
        columns
            .entry([c[1], c[0]])
            .or_default()
            .push((row as u32, cfg.bin_of(c[2])));
    }
    let n_cols = columns.len();
    let col_cells: Vec<[u32; 2]> = columns.keys().copied().collect();
    let col_voxels: Vec<Vec<(u32, usize)>> = columns.into_values().collect();
    let mut placement = vec![(0u32, 0usize); x.len()];
    for (col, voxels) in col_voxels.iter().enumerate() {
        for &(row, bin) in voxels {
            placement[row as usize] = (col as u32, bin);
        }
    }

    let feats_ref = x.feats().values();
    let fv: &[f64] = &feats_ref;
    let col_voxels_ref: &[Vec<(u32, usize)>] = &col_voxels;
    let mut stacked_vals = vec![0.0; n_cols * stacked];
    par::for_each_chunk_mut(&mut stacked_vals, stacked, |col, dst| {
        for &(row, bin) in &col_voxels_ref[col] {
            let f = &fv[row as usize * channels..][..channels];
            let slot = &mut dst[bin * channels..][..channels];
            for (c, acc) in slot.iter_mut().enumerate() {
                *acc += f[c];
            }
        }
    });
    drop(feats_ref);

    let n_rows = x.len();
    let stacked_t = Tensor::from_op(
        "height_bins",
        vec![x.feats().clone()],
        vec![n_cols, stacked],
        stacked_vals,
        Box::new(move |ctx: &VjpCtx| {
            let g = ctx.out_grad;
            let mut d = vec![0.0; n_rows * channels];
            par::for_each_chunk_mut(&mut d, channels, |row, dst| {
                let (col, bin) = placement[row];
                let src = &g[col as usize * stacked + bin * channels..][..channels];
                dst.copy_from_slice(src);
            });
            vec![Some(d)]
        }),
    )?;

    let projected = stacked_t.matmul(w)?; // [n_cols, C_bev]

    let cell_of_col: Vec<u32> = col_cells.iter().map(|&[y, x]| y * nx as u32 + x).collect();
    let proj_ref = projected.values();
    let pv: &[f64] = &proj_ref;
    let cell_ref: &[u32] = &cell_of_col;
    let mut bev = vec![0.0; c_bev * ny * nx];
    par::for_each_chunk_mut(&mut bev, ny * nx, |ch, plane| {
        for (col, &cell_idx) in cell_ref.iter().enumerate() {
            plane[cell_idx as usize] = pv[col * c_bev + ch];
        }
    });
    drop(proj_ref);

    let plane = ny * nx;
    let values = Tensor::from_op(
        "bev_scatter",
        vec![projected],
        vec![c_bev, ny, nx],
        bev,
        Box::new(move |ctx: &VjpCtx| {
            let g = ctx.out_grad;
            let mut d = vec![0.0; cell_of_col.len() * c_bev];
            par::for_each_chunk_mut(&mut d, c_bev, |col, dst| {
                let cell_idx = cell_of_col[col] as usize;
                for (ch, acc) in dst.iter_mut().enumerate() {
                    *acc = g[ch * plane + cell_idx];
                }
            });
            vec![Some(d)]
        }),
    )?;
    BevGrid::new(values, grid.x_min, grid.y_min, cell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd;

    fn set_at(
        stride: u32,
        coords: Vec<[u32; 3]>,
        channels: usize,
        grid: (usize, usize, usize),
        salt: f64,
    ) -> SparseVoxelSet {
        let n = coords.len();
        let feats: Vec<f64> = (0..n * channels)
            .map(|i| (i as f64 * salt).sin() + 0.1)
            .collect();
        SparseVoxelSet::new(coords, Tensor::new(&[n, channels], feats).unwrap(), stride, grid).unwrap()
    }

    const GRID: (usize, usize, usize) = (64, 64, 16);

    #[test]
    fn position_scaling_law() {
        let f4 = set_at(8, vec![[0, 0, 0]], 2, GRID, 0.3);
        let f5 = set_at(16, vec![[3, 2, 0]], 2, GRID, 0.5);
        let f6 = set_at(32, vec![[1, 1, 0]], 2, GRID, 0.7);
        let union = align_and_union(&f4, &f5, &f6).unwrap();
        assert_eq!(union.stride(), 8);
        // (3,2,0)·2 = (6,4,0); (1,1,0)·4 = (4,4,0)
        assert_eq!(union.coords(), &[[0, 0, 0], [4, 4, 0], [6, 4, 0]]);
    }

    #[test]
    fn colliding_positions_sum_features() {
        let f4 = set_at(8, vec![[4, 4, 0]], 1, GRID, 0.3);
        let f5 = set_at(16, vec![[2, 2, 0]], 1, GRID, 0.5);
        let f6 = set_at(32, vec![[1, 1, 0]], 1, GRID, 0.7);
        let union = align_and_union(&f4, &f5, &f6).unwrap();
        assert_eq!(union.len(), 1);
        let expected = f4.feats().to_vec()[0] + f5.feats().to_vec()[0] + f6.feats().to_vec()[0];
        assert!((union.feats().to_vec()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn union_matches_dense_oracle() {
        let f4 = set_at(8, vec![[0, 1, 0], [5, 5, 1], [7, 0, 0]], 3, GRID, 0.31);
        let f5 = set_at(16, vec![[0, 0, 0], [2, 3, 0], [3, 3, 0]], 3, GRID, 0.57);
        let f6 = set_at(32, vec![[0, 0, 0], [1, 0, 0]], 3, GRID, 0.71);
        let union = align_and_union(&f4, &f5, &f6).unwrap();

        // dense oracle: upsample each source into the stride-8 grid by
        // coordinate scaling, then add
        let dims = dims_at(GRID, 8);
        let mut dense = vec![0.0; 3 * dims.2 * dims.1 * dims.0];
        for (src, set) in [&f4, &f5, &f6].iter().enumerate() {
            let factor = 1u32 << src;
            let fv = set.feats().to_vec();
            for (row, c) in set.coords().iter().enumerate() {
                let (x, y, z) = (
                    (c[0] * factor) as usize,
                    (c[1] * factor) as usize,
                    (c[2] * factor) as usize,
                );
                for ch in 0..3 {
                    dense[((ch * dims.2 + z) * dims.1 + y) * dims.0 + x] += fv[row * 3 + ch];
                }
            }
        }
        let got = union.densify().to_vec();
        let worst = dense
            .iter()
            .zip(&got)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-9, "max deviation {worst}");
    }

    #[test]
    fn union_rejects_wrong_strides() {
        let f4 = set_at(8, vec![[0, 0, 0]], 1, GRID, 0.3);
        let f5 = set_at(16, vec![[0, 0, 0]], 1, GRID, 0.5);
        assert!(align_and_union(&f4, &f5, &f5).is_err());
        let wide = set_at(32, vec![[0, 0, 0]], 2, GRID, 0.7);
        assert!(align_and_union(&f4, &f5, &wide).is_err());
    }

    #[test]
    fn union_gradients_match_fd() {
        let coords4 = vec![[0, 0, 0], [4, 4, 0]];
        let coords5 = vec![[2, 2, 0]];
        let coords6 = vec![[1, 1, 0]];
        let f = move |args: &[Tensor]| {
            let f4 = SparseVoxelSet::new(coords4.clone(), args[0].clone(), 8, GRID)?;
            let f5 = SparseVoxelSet::new(coords5.clone(), args[1].clone(), 16, GRID)?;
            let f6 = SparseVoxelSet::new(coords6.clone(), args[2].clone(), 32, GRID)?;
            let union = align_and_union(&f4, &f5, &f6)?;
            // square so collisions must mix gradients, not just route them
            union.feats().mul(union.feats())?.sum_all()
        };
        let inputs = [
            Tensor::new(&[2, 2], vec![0.4, -0.2, 0.9, 0.3]).unwrap(),
            Tensor::new(&[1, 2], vec![1.1, 0.5]).unwrap(),
            Tensor::new(&[1, 2], vec![-0.7, 0.2]).unwrap(),
        ];
        let err = fd::check_gradients(&f, &inputs, 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    fn projection(z_bins: usize, channels: usize, c_bev: usize) -> Tensor {
        let rows = z_bins * channels;
        let vals: Vec<f64> = (0..rows * c_bev).map(|i| ((i as f64) * 0.37).cos() * 0.2).collect();
        Tensor::leaf(&[rows, c_bev], vals).unwrap()
    }

    #[test]
    fn empty_set_compresses_to_zero() {
        let grid = GridConfig::desk_default();
        let cfg = HeightCompressionConfig::desk_default();
        let set = SparseVoxelSet::empty(3, 8, grid.dims());
        let w = projection(cfg.z_bins, 3, 5);
        let bev = sparse_height_compression(&set, &cfg, &w, &grid).unwrap();
        assert_eq!(bev.values.shape(), &[5, 8, 8]);
        assert!(bev.values.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_lights_single_cell() {
        let grid = GridConfig::desk_default();
        let cfg = HeightCompressionConfig::desk_default();
        let set = set_at(8, vec![[3, 5, 1]], 2, grid.dims(), 0.9);
        let w = projection(cfg.z_bins, 2, 4);
        let bev = sparse_height_compression(&set, &cfg, &w, &grid).unwrap();
        let v = bev.values.to_vec();
        for ch in 0..4 {
            for cell in 0..64 {
                let expect_nonzero = cell == 5 * 8 + 3;
                assert_eq!(v[ch * 64 + cell] != 0.0, expect_nonzero, "ch {ch} cell {cell}");
            }
        }
    }

    #[test]
    fn compression_matches_dense_oracle() {
        let grid = GridConfig::desk_default();
        let cfg = HeightCompressionConfig::desk_default();
        let coords = vec![[0, 0, 0], [0, 0, 1], [3, 5, 0], [3, 5, 1], [7, 7, 1]];
        let set = set_at(8, coords, 3, grid.dims(), 0.43);
        let w = projection(cfg.z_bins, 3, 4);
        let bev = sparse_height_compression(&set, &cfg, &w, &grid).unwrap();

        // dense oracle: densify, bin columns along z, project
        let dense = set.densify().to_vec(); // [3, 2, 8, 8]
        let wv = w.to_vec();
        let (nz, ny, nx) = (2, 8, 8);
        let mut expected = vec![0.0; 4 * ny * nx];
        for y in 0..ny {
            for x in 0..nx {
                let mut col = vec![0.0; cfg.stacked_width(3)];
                for z in 0..nz {
                    let bin = cfg.bin_of(z as u32);
                    for ch in 0..3 {
                        col[bin * 3 + ch] += dense[((ch * nz + z) * ny + y) * nx + x];
                    }
                }
                for out in 0..4 {
                    let mut acc = 0.0;
                    for (i, &cv) in col.iter().enumerate() {
                        acc += cv * wv[i * 4 + out];
                    }
                    expected[(out * ny + y) * nx + x] = acc;
                }
            }
        }
        let got = bev.values.to_vec();
        let worst = expected
            .iter()
            .zip(&got)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-9, "max deviation {worst}");
    }

    #[test]
    fn compression_gradients_match_fd() {
        let grid = GridConfig::desk_default();
        let cfg = HeightCompressionConfig { z_bins: 2 };
        let coords = vec![[0, 0, 0], [0, 0, 1], [3, 5, 0]];
        let dims = grid.dims();
        let f = move |args: &[Tensor]| {
            let set = SparseVoxelSet::new(coords.clone(), args[0].clone(), 8, dims)?;
            let bev = sparse_height_compression(&set, &cfg, &args[1], &grid)?;
            bev.values.mul(&bev.values)?.sum_all()
        };
        let feats = Tensor::new(&[3, 2], vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.4]).unwrap();
        let w = projection(2, 2, 3);
        let err = fd::check_gradients(&f, &[feats, w], 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }
}
