//! Sparse 3-D convolution and the multi-scale downsampling chain.
//!
//! Convolutions are scheduled through a rulebook: a flat list of
//! (input row, output row, kernel offset) triples built once per call.
//! The forward pass and both gradients are then pure gathers over fixed
//! slices of that list, which makes them safe to parallelize without
//! changing any floating-point summation order.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::par;
use crate::sparse::{SparseVoxelSet, VOXEL_FEATURES};
use crate::tensor::{ParamInit, Registry, Tensor, VjpCtx};

#[derive(Clone, Copy)]
struct Rule {
    in_row: u32,
    out_row: u32,
    off: u16,
}

/// Sparse convolution with kernel `w[k³ × C_in × C_out]` (offset index
/// flattened z-major: `(dz·k + dy)·k + dx`). Submanifold mode keeps the
/// input coordinate set; stride-2 mode outputs the distinct `floor(c/2)`
/// images of the input coordinates. Values at every output site equal a
/// dense convolution (padding `(k−1)/2`) of the densified input.
pub fn sparse_conv3d(
    x: &SparseVoxelSet,
    w: &Tensor,
    stride: usize,
    submanifold: bool,
) -> Result<SparseVoxelSet> {
    if w.rank() != 3 {
        return Err(Error::dim(
            "sparse_conv3d",
            format!("kernel must be [k³, C_in, C_out], got {:?}", w.shape()),
        ));
    }
    let k = (0..=13).find(|&k| k * k * k == w.shape()[0]).ok_or_else(|| {
        Error::dim(
            "sparse_conv3d",
            format!("kernel rows {} are not a cube", w.shape()[0]),
        )
    })?;
    if k % 2 == 0 {
        return Err(Error::contract("sparse_conv3d", "kernel size must be odd"));
    }
    let (c_in, c_out) = (w.shape()[1], w.shape()[2]);
    if c_in != x.channels() {
        return Err(Error::dim(
            "sparse_conv3d",
            format!("kernel expects {c_in} channels, input has {}", x.channels()),
        ));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::contract("sparse_conv3d", "stride must be 1 or 2"));
    }
    if stride == 2 && submanifold {
        return Err(Error::contract(
            "sparse_conv3d",
            "submanifold convolution cannot be strided",
        ));
    }
    let out_stride = x.stride() * stride as u32;
    if x.is_empty() {
        return Ok(SparseVoxelSet::empty(c_out, out_stride, x.grid_shape()));
    }

    let in_dims = x.dims();
    let row_of: HashMap<[u32; 3], u32> = x
        .coords()
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i as u32))
        .collect();
    let out_coords: Vec<[u32; 3]> = if stride == 1 {
        x.coords().to_vec()
    } else {
        let halved: BTreeSet<[u32; 3]> = x
            .coords()
            .iter()
            .map(|c| [c[0] / 2, c[1] / 2, c[2] / 2])
            .collect();
        halved.into_iter().collect()
    };

    let r = (k / 2) as i64;
    let kk = k as i64;
    let bounds = [in_dims.0 as i64, in_dims.1 as i64, in_dims.2 as i64];
    let mut rules: Vec<Rule> = Vec::new();
    let mut out_ranges: Vec<(u32, u32)> = Vec::with_capacity(out_coords.len());
    for (out_row, oc) in out_coords.iter().enumerate() {
        let start = rules.len() as u32;
        for off in 0..(k * k * k) as u16 {
            let (dz, dy, dx) = (
                off as i64 / (kk * kk),
                (off as i64 / kk) % kk,
                off as i64 % kk,
            );
            let pos = [
                oc[0] as i64 * stride as i64 + dx - r,
                oc[1] as i64 * stride as i64 + dy - r,
                oc[2] as i64 * stride as i64 + dz - r,
            ];
            if pos.iter().zip(&bounds).any(|(&p, &b)| p < 0 || p >= b) {
                continue;
            }
            if let Some(&in_row) = row_of.get(&[pos[0] as u32, pos[1] as u32, pos[2] as u32]) {
                rules.push(Rule {
                    in_row,
                    out_row: out_row as u32,
                    off,
                });
            }
        }
        out_ranges.push((start, rules.len() as u32));
    }

    let n_out = out_coords.len();
    let feats_ref = x.feats().values();
    let w_ref = w.values();
    let (fv, wv): (&[f64], &[f64]) = (&feats_ref, &w_ref);
    let (rules_ref, ranges_ref): (&[Rule], &[(u32, u32)]) = (&rules, &out_ranges);
    let mut out = vec![0.0; n_out * c_out];
    par::for_each_chunk_mut(&mut out, c_out, |out_row, row| {
        let (start, end) = ranges_ref[out_row];
        for rule in &rules_ref[start as usize..end as usize] {
            let f = &fv[rule.in_row as usize * c_in..][..c_in];
            let wk = &wv[rule.off as usize * c_in * c_out..][..c_in * c_out];
            for (ci, &fvi) in f.iter().enumerate() {
                if fvi == 0.0 {
                    continue;
                }
                let wrow = &wk[ci * c_out..][..c_out];
                for (co, acc) in row.iter_mut().enumerate() {
                    *acc += fvi * wrow[co];
                }
            }
        }
    });
    drop(feats_ref);
    drop(w_ref);

    // gradient-side views of the rulebook, grouped so each parallel task
    // owns a disjoint output slice and walks its rules in a fixed order
    let mut by_in = rules.clone();
    by_in.sort_by_key(|e| (e.in_row, e.out_row, e.off));
    let n_in = x.len();
    let mut in_ranges = vec![(0u32, 0u32); n_in];
    {
        let mut i = 0;
        for row in 0..n_in as u32 {
            let start = i;
            while i < by_in.len() && by_in[i].in_row == row {
                i += 1;
            }
            in_ranges[row as usize] = (start as u32, i as u32);
        }
    }
    let mut by_off: Vec<Vec<(u32, u32)>> = vec![Vec::new(); k * k * k];
    for e in &rules {
        by_off[e.off as usize].push((e.in_row, e.out_row));
    }

    let values = Tensor::from_op(
        "sparse_conv3d",
        vec![x.feats().clone(), w.clone()],
        vec![n_out, c_out],
        out,
        Box::new(move |ctx: &VjpCtx| {
            let (feats_ref, w_ref) = (ctx.parents[0].values(), ctx.parents[1].values());
            let (fv, wv): (&[f64], &[f64]) = (&feats_ref, &w_ref);
            let g = ctx.out_grad;
            let (by_in_ref, in_ranges_ref): (&[Rule], &[(u32, u32)]) = (&by_in, &in_ranges);
            let mut dfeats = vec![0.0; n_in * c_in];
            par::for_each_chunk_mut(&mut dfeats, c_in, |in_row, row| {
                let (start, end) = in_ranges_ref[in_row];
                for rule in &by_in_ref[start as usize..end as usize] {
                    let go = &g[rule.out_row as usize * c_out..][..c_out];
                    let wk = &wv[rule.off as usize * c_in * c_out..][..c_in * c_out];
                    for (ci, acc) in row.iter_mut().enumerate() {
                        let wrow = &wk[ci * c_out..][..c_out];
                        let mut s = 0.0;
                        for (co, &gv) in go.iter().enumerate() {
                            s += gv * wrow[co];
                        }
                        *acc += s;
                    }
                }
            });
            let by_off_ref: &[Vec<(u32, u32)>] = &by_off;
            let mut dw = vec![0.0; k * k * k * c_in * c_out];
            par::for_each_chunk_mut(&mut dw, c_in * c_out, |off, block| {
                for &(in_row, out_row) in &by_off_ref[off] {
                    let f = &fv[in_row as usize * c_in..][..c_in];
                    let go = &g[out_row as usize * c_out..][..c_out];
                    for (ci, &fvi) in f.iter().enumerate() {
                        if fvi == 0.0 {
                            continue;
                        }
                        let dst = &mut block[ci * c_out..][..c_out];
                        for (co, &gv) in go.iter().enumerate() {
                            dst[co] += fvi * gv;
                        }
                    }
                }
            });
            vec![Some(dfeats), Some(dw)]
        }),
    )?;
    SparseVoxelSet::new(out_coords, values, out_stride, x.grid_shape())
}

/// Channel plan for [`downsample_chain`]: six stages at strides
/// 1, 2, 4, 8, 16, 32.
#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub widths: [usize; 6],
    pub kernel: usize,
}

impl ChainConfig {
    pub fn desk_default() -> ChainConfig {
        ChainConfig {
            widths: [16, 16, 32, 64, 64, 64],
            kernel: 3,
        }
    }

    pub fn validate(&self, grid_shape: (usize, usize, usize)) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!(
                "chain kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("chain widths must be positive".into()));
        }
        // the deepest stage halves five times; x and y must survive that.
        // z is allowed to bottom out at one cell (the default grid is
        // deliberately shallow).
        if grid_shape.0 < 32 || grid_shape.1 < 32 {
            return Err(Error::Config(format!(
                "grid {grid_shape:?} too small for a 6-stage chain (needs ≥32 cells in x and y)"
            )));
        }
        Ok(())
    }
}

/// Learnable kernels for the chain: a stem convolution from the raw
/// voxel features plus five (submanifold, strided) blocks.
#[derive(Clone, Debug)]
pub struct ChainParams {
    pub stem: Tensor,
    pub blocks: Vec<(Tensor, Tensor)>,
    cfg: ChainConfig,
}

impl ChainParams {
    pub fn create(reg: &mut Registry, prefix: &str, cfg: &ChainConfig) -> Result<ChainParams> {
        let k3 = cfg.kernel.pow(3);
        let conv = |reg: &mut Registry, name: String, c_in: usize, c_out: usize| {
            reg.param(
                &name,
                &[k3, c_in, c_out],
                ParamInit::XavierUniform {
                    fan_in: k3 * c_in,
                    fan_out: k3 * c_out,
                },
            )
        };
        let stem = conv(reg, format!("{prefix}.stem"), VOXEL_FEATURES, cfg.widths[0])?;
        let mut blocks = Vec::with_capacity(5);
        for i in 0..5 {
            let sub = conv(
                reg,
                format!("{prefix}.block{}.sub", i + 1),
                cfg.widths[i],
                cfg.widths[i],
            )?;
            let down = conv(
                reg,
                format!("{prefix}.block{}.down", i + 1),
                cfg.widths[i],
                cfg.widths[i + 1],
            )?;
            blocks.push((sub, down));
        }
        Ok(ChainParams {
            stem,
            blocks,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.cfg
    }
}

fn relu_feats(x: SparseVoxelSet) -> Result<SparseVoxelSet> {
    if x.is_empty() {
        return Ok(x);
    }
    let feats = x.feats().relu()?;
    x.with_feats(feats)
}

/// Run the six-stage encoder. Returns one set per stage, strides
/// 1, 2, 4, 8, 16, 32; stage widths follow the config.
pub fn downsample_chain(x: &SparseVoxelSet, params: &ChainParams) -> Result<Vec<SparseVoxelSet>> {
    params.cfg.validate(x.grid_shape())?;
    if x.stride() != 1 {
        return Err(Error::contract("downsample_chain", "input must be at stride 1"));
    }
    let mut stages = Vec::with_capacity(6);
    let f1 = relu_feats(sparse_conv3d(x, &params.stem, 1, true)?)?;
    stages.push(f1);
    for (sub, down) in &params.blocks {
        let cur = stages.last().expect("stem pushed");
        let mid = relu_feats(sparse_conv3d(cur, sub, 1, true)?)?;
        let next = relu_feats(sparse_conv3d(&mid, down, 2, false)?)?;
        stages.push(next);
    }
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd;

    fn toy_set(coords: Vec<[u32; 3]>, channels: usize, grid: (usize, usize, usize)) -> SparseVoxelSet {
        let n = coords.len();
        let feats: Vec<f64> = (0..n * channels)
            .map(|i| ((i * 2654435761) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        SparseVoxelSet::new(coords, Tensor::new(&[n, channels], feats).unwrap(), 1, grid).unwrap()
    }

    fn random_occupancy(side: usize, fill_permille: usize) -> Vec<[u32; 3]> {
        let mut coords = Vec::new();
        let mut state = 0x9e3779b97f4a7c15u64;
        for x in 0..side as u32 {
            for y in 0..side as u32 {
                for z in 0..side as u32 {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    if (state >> 33) % 1000 < fill_permille as u64 {
                        coords.push([x, y, z]);
                    }
                }
            }
        }
        coords
    }

    /// Rearrange `[k³, C_in, C_out]` into the dense layout
    /// `[C_out, C_in, kz, ky, kx]`.
    fn to_dense_kernel(w: &Tensor, k: usize, c_in: usize, c_out: usize) -> Tensor {
        let wv = w.to_vec();
        let mut dense = vec![0.0; c_out * c_in * k * k * k];
        for off in 0..k * k * k {
            for ci in 0..c_in {
                for co in 0..c_out {
                    dense[((co * c_in + ci) * k * k * k) + off] = wv[(off * c_in + ci) * c_out + co];
                }
            }
        }
        Tensor::new(&[c_out, c_in, k, k, k], dense).unwrap()
    }

    fn xavier_kernel(k: usize, c_in: usize, c_out: usize, seed: f64) -> Tensor {
        let n = k * k * k * c_in * c_out;
        let vals: Vec<f64> = (0..n).map(|i| ((i as f64 * seed).sin()) * 0.3).collect();
        Tensor::leaf(&[k * k * k, c_in, c_out], vals).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_features() {
        let set = toy_set(vec![[1, 2, 3], [4, 4, 4]], 2, (8, 8, 8));
        // 1³ kernel with identity channel mixing
        let w = Tensor::leaf(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = sparse_conv3d(&set, &w, 1, true).unwrap();
        assert_eq!(out.coords(), set.coords());
        assert_eq!(out.feats().to_vec(), set.feats().to_vec());
    }

    #[test]
    fn empty_input_empty_output() {
        let set = SparseVoxelSet::empty(2, 1, (8, 8, 8));
        let w = xavier_kernel(3, 2, 4, 0.7);
        let out = sparse_conv3d(&set, &w, 2, false).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.channels(), 4);
        assert_eq!(out.stride(), 2);
    }

    #[test]
    fn submanifold_matches_dense_oracle() {
        let coords = random_occupancy(6, 400);
        let set = toy_set(coords, 3, (6, 6, 6));
        let w = xavier_kernel(3, 3, 2, 1.3);
        let out = sparse_conv3d(&set, &w, 1, true).unwrap();
        assert_eq!(out.coords(), set.coords());

        let dense_out = set
            .densify()
            .conv3d(&to_dense_kernel(&w, 3, 3, 2), 1, 1)
            .unwrap();
        let dv = dense_out.to_vec();
        let ov = out.feats().to_vec();
        let mut worst: f64 = 0.0;
        for (row, &[x, y, z]) in out.coords().iter().enumerate() {
            for c in 0..2 {
                let dense_at = ((c * 6 + z as usize) * 6 + y as usize) * 6 + x as usize;
                worst = worst.max((dv[dense_at] - ov[row * 2 + c]).abs());
            }
        }
        assert!(worst < 1e-9, "max deviation {worst}");
    }

    #[test]
    fn strided_matches_dense_oracle() {
        let coords = random_occupancy(6, 400);
        let set = toy_set(coords.clone(), 3, (6, 6, 6));
        let w = xavier_kernel(3, 3, 2, 2.1);
        let out = sparse_conv3d(&set, &w, 2, false).unwrap();

        let expected: std::collections::BTreeSet<[u32; 3]> =
            coords.iter().map(|c| [c[0] / 2, c[1] / 2, c[2] / 2]).collect();
        assert_eq!(out.coords().to_vec(), expected.into_iter().collect::<Vec<_>>());
        assert_eq!(out.stride(), 2);

        let dense_out = set
            .densify()
            .conv3d(&to_dense_kernel(&w, 3, 3, 2), 2, 1)
            .unwrap();
        assert_eq!(dense_out.shape(), &[2, 3, 3, 3]);
        let dv = dense_out.to_vec();
        let ov = out.feats().to_vec();
        let mut worst: f64 = 0.0;
        for (row, &[x, y, z]) in out.coords().iter().enumerate() {
            for c in 0..2 {
                let dense_at = ((c * 3 + z as usize) * 3 + y as usize) * 3 + x as usize;
                worst = worst.max((dv[dense_at] - ov[row * 2 + c]).abs());
            }
        }
        assert!(worst < 1e-9, "max deviation {worst}");
    }

    #[test]
    fn conv_gradients_match_fd() {
        let coords = vec![[0, 0, 0], [1, 0, 0], [1, 1, 1], [3, 2, 1]];
        let set = toy_set(coords.clone(), 2, (4, 4, 4));
        let w = xavier_kernel(3, 2, 2, 0.9);
        let grid = set.grid_shape();
        let f = move |args: &[Tensor]| {
            let s = SparseVoxelSet::new(coords.clone(), args[0].clone(), 1, grid)?;
            sparse_conv3d(&s, &args[1], 2, false)?.feats().sum_all()
        };
        let err = fd::check_gradients(&f, &[set.feats().detach(), w], 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn rejects_bad_arguments() {
        let set = toy_set(vec![[0, 0, 0]], 2, (4, 4, 4));
        let w = xavier_kernel(3, 2, 2, 0.4);
        assert!(sparse_conv3d(&set, &w, 2, true).is_err());
        assert!(sparse_conv3d(&set, &w, 3, false).is_err());
        let bad_channels = xavier_kernel(3, 5, 2, 0.4);
        assert!(sparse_conv3d(&set, &bad_channels, 1, true).is_err());
        let even = Tensor::leaf(&[8, 2, 2], vec![0.0; 32]).unwrap();
        assert!(sparse_conv3d(&set, &even, 1, true).is_err());
    }

    #[test]
    fn chain_strides_and_widths() {
        let mut reg = Registry::new(7);
        let cfg = ChainConfig::desk_default();
        let params = ChainParams::create(&mut reg, "lidar.chain", &cfg).unwrap();
        let coords = random_occupancy(8, 120)
            .into_iter()
            .map(|c| [c[0] * 7, c[1] * 7, c[2]])
            .collect();
        let set = toy_set(coords, VOXEL_FEATURES, (64, 64, 16));
        let stages = downsample_chain(&set, &params).unwrap();
        assert_eq!(stages.len(), 6);
        let strides: Vec<u32> = stages.iter().map(|s| s.stride()).collect();
        assert_eq!(strides, vec![1, 2, 4, 8, 16, 32]);
        for (stage, width) in stages.iter().zip(cfg.widths) {
            assert_eq!(stage.channels(), width);
        }
        // voxel counts never grow across a strided step
        for pair in stages.windows(2) {
            assert!(pair[1].len() <= pair[0].len());
        }
    }

    #[test]
    fn chain_keeps_origin_image() {
        let mut reg = Registry::new(11);
        let params = ChainParams::create(&mut reg, "lidar.chain", &ChainConfig::desk_default()).unwrap();
        let set = toy_set(vec![[0, 0, 0]], VOXEL_FEATURES, (64, 64, 16));
        let stages = downsample_chain(&set, &params).unwrap();
        for stage in &stages {
            assert!(stage.row_of([0, 0, 0]).is_some());
        }
    }

    #[test]
    fn chain_rejects_small_grid() {
        let cfg = ChainConfig::desk_default();
        assert!(cfg.validate((16, 64, 16)).is_err());
        assert!(cfg.validate((64, 64, 16)).is_ok());
    }
}
