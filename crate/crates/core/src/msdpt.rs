//! Dual-path transformer over the fused feature volume: a local path of
//! windowed self-attention on each height slice, a height-pooled global
//! path through the same attention weights, a learned per-site gate that
//! injects the global map back into every slice, and a multi-scale
//! wrapper that runs the block over a stride-2 conv pyramid.

use crate::error::{Error, Result};
use crate::grid::FeatureVolume;
use crate::tensor::{concat, ParamInit, Registry, Tensor};

/// Single-head windowed attention geometry.
#[derive(Clone, Copy, Debug)]
pub struct WindowConfig {
    pub window: (usize, usize),
}

impl WindowConfig {
    pub fn desk_default() -> WindowConfig {
        WindowConfig { window: (4, 4) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.0 == 0 || self.window.1 == 0 {
            return Err(Error::Config("attention window must be nonzero".into()));
        }
        Ok(())
    }
}

/// Multi-scale wrapper geometry. `gate_per_channel` switches the
/// slice-combination gate from one value per site to one per channel.
#[derive(Clone, Copy, Debug)]
pub struct MsdptConfig {
    pub num_scales: usize,
    pub window: WindowConfig,
    pub gate_per_channel: bool,
}

impl MsdptConfig {
    pub fn desk_default() -> MsdptConfig {
        MsdptConfig {
            num_scales: 3,
            window: WindowConfig::desk_default(),
            gate_per_channel: false,
        }
    }

    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        if !(1..=4).contains(&self.num_scales) {
            return Err(Error::Config(format!(
                "num_scales must be 1..=4, got {}",
                self.num_scales
            )));
        }
        self.window.validate()?;
        let div = 1 << (self.num_scales - 1);
        let (x, y, z) = dims;
        if x % div != 0 || y % div != 0 || z % div != 0 {
            return Err(Error::Config(format!(
                "volume dims {dims:?} must be divisible by {div} for {} scales",
                self.num_scales
            )));
        }
        Ok(())
    }
}

/// Weights of one dual-path block: shared attention projections and the
/// combination gate's two-layer FFN.
#[derive(Clone, Debug)]
pub struct DptWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub gate_hidden: Tensor,
    pub gate_out: Tensor,
}

/// All learnable state of the multi-scale wrapper.
#[derive(Clone, Debug)]
pub struct MsdptParams {
    pub blocks: Vec<DptWeights>,
    pub downsamples: Vec<Tensor>,
    pub blend: Vec<Tensor>,
    cfg: MsdptConfig,
}

impl MsdptParams {
    pub fn create(
        reg: &mut Registry,
        prefix: &str,
        cfg: &MsdptConfig,
        channels: usize,
    ) -> Result<MsdptParams> {
        let square = |reg: &mut Registry, name: String| {
            reg.param(
                &name,
                &[channels, channels],
                ParamInit::XavierUniform {
                    fan_in: channels,
                    fan_out: channels,
                },
            )
        };
        let gate_width = if cfg.gate_per_channel { channels } else { 1 };
        let mut blocks = Vec::with_capacity(cfg.num_scales);
        let mut blend = Vec::with_capacity(cfg.num_scales);
        for s in 0..cfg.num_scales {
            blocks.push(DptWeights {
                wq: square(reg, format!("{prefix}.scale{s}.attn.wq"))?,
                wk: square(reg, format!("{prefix}.scale{s}.attn.wk"))?,
                wv: square(reg, format!("{prefix}.scale{s}.attn.wv"))?,
                gate_hidden: square(reg, format!("{prefix}.scale{s}.gate.hidden"))?,
                gate_out: reg.param(
                    &format!("{prefix}.scale{s}.gate.out"),
                    &[channels, gate_width],
                    ParamInit::XavierUniform {
                        fan_in: channels,
                        fan_out: gate_width,
                    },
                )?,
            });
            // every scale starts with equal say in the blend
            blend.push(reg.param(
                &format!("{prefix}.scale{s}.blend"),
                &[1],
                ParamInit::Constant(1.0 / cfg.num_scales as f64),
            )?);
        }
        let mut downsamples = Vec::with_capacity(cfg.num_scales.saturating_sub(1));
        for s in 1..cfg.num_scales {
            downsamples.push(reg.param(
                &format!("{prefix}.down{s}"),
                &[channels, channels, 3, 3, 3],
                ParamInit::XavierUniform {
                    fan_in: channels * 27,
                    fan_out: channels * 27,
                },
            )?);
        }
        Ok(MsdptParams {
            blocks,
            downsamples,
            blend,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &MsdptConfig {
        &self.cfg
    }
}

fn pad_axis(x: &Tensor, axis: usize, target: usize) -> Result<Tensor> {
    let cur = x.shape()[axis];
    if cur == target {
        return Ok(x.clone());
    }
    let mut pad_shape = x.shape().to_vec();
    pad_shape[axis] = target - cur;
    let pad = Tensor::zeros(&pad_shape)?;
    concat(&[x, &pad], axis)
}

/// Non-overlapping windowed single-head self-attention over a 2-D
/// feature map, with a residual connection. Maps whose sides are not
/// window multiples are zero-padded, attended, then cropped back.
pub fn window_self_attention(
    x: &Tensor,
    weights: &DptWeights,
    cfg: &WindowConfig,
) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::dim(
            "window_self_attention",
            format!("expected [C×H×W], got {:?}", x.shape()),
        ));
    }
    cfg.validate().map_err(|e| match e {
        Error::Config(msg) => Error::contract("window_self_attention", msg),
        other => other,
    })?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (wh, ww) = cfg.window;
    let hp = h.div_ceil(wh) * wh;
    let wp = w.div_ceil(ww) * ww;
    let padded = pad_axis(&pad_axis(x, 1, hp)?, 2, wp)?;

    // tokens: window-major, row-major inside each window, channels last
    let (nh, nw) = (hp / wh, wp / ww);
    let n_windows = nh * nw;
    let t = wh * ww;
    let mut to_tokens = Vec::with_capacity(n_windows * t * c);
    for win in 0..n_windows {
        let (wy, wx) = (win / nw, win % nw);
        for tok in 0..t {
            let (ty, tx) = (tok / ww, tok % ww);
            let (y, xx) = (wy * wh + ty, wx * ww + tx);
            for ch in 0..c {
                to_tokens.push((ch * hp + y) * wp + xx);
            }
        }
    }
    let tokens = padded
        .reshape(&[c * hp * wp])?
        .gather(&to_tokens, &[n_windows * t, c])?;

    let q = tokens.matmul(&weights.wq)?.reshape(&[n_windows, t, c])?;
    let k = tokens.matmul(&weights.wk)?.reshape(&[n_windows, t, c])?;
    let v = tokens.matmul(&weights.wv)?.reshape(&[n_windows, t, c])?;
    let scores = q.bmm(&k.transpose_last2()?)?.scale(1.0 / (c as f64).sqrt())?;
    let attn = scores.softmax(2)?;
    let mixed = attn.bmm(&v)?.reshape(&[n_windows * t, c])?;
    let out_tokens = tokens.add(&mixed)?;

    // scatter tokens back into the padded map, then crop
    let mut from_tokens = vec![0usize; c * hp * wp];
    for (flat_tok, &src) in to_tokens.iter().enumerate() {
        from_tokens[src] = flat_tok;
    }
    out_tokens
        .reshape(&[n_windows * t * c])?
        .gather(&from_tokens, &[c, hp, wp])?
        .slice(1, 0, h)?
        .slice(2, 0, w)
}

/// Run every height slice through the same windowed attention.
pub fn local_path(vol: &Tensor, weights: &DptWeights, cfg: &WindowConfig) -> Result<Tensor> {
    if vol.rank() != 4 {
        return Err(Error::dim(
            "local_path",
            format!("expected [C×Z×H×W], got {:?}", vol.shape()),
        ));
    }
    let (c, z, h, w) = (vol.shape()[0], vol.shape()[1], vol.shape()[2], vol.shape()[3]);
    let mut slices = Vec::with_capacity(z);
    for zi in 0..z {
        let slice = vol.slice(1, zi, 1)?.reshape(&[c, h, w])?;
        let out = window_self_attention(&slice, weights, cfg)?;
        slices.push(out.reshape(&[c, 1, h, w])?);
    }
    let refs: Vec<&Tensor> = slices.iter().collect();
    concat(&refs, 1)
}

/// Height-pool the volume and attend with the *same* weights as the
/// local path.
pub fn global_path(vol: &Tensor, weights: &DptWeights, cfg: &WindowConfig) -> Result<Tensor> {
    if vol.rank() != 4 {
        return Err(Error::dim(
            "global_path",
            format!("expected [C×Z×H×W], got {:?}", vol.shape()),
        ));
    }
    window_self_attention(&vol.mean_axis(1)?, weights, cfg)
}

/// Gated recombination of the two paths:
/// `out = local + σ(FFN(local)) · broadcast_z(global)`. The FFN gate is
/// per-site by default (one value per (z,h,w)) or per-channel when the
/// gate projection is C-wide.
pub fn combine(f_local: &Tensor, f_global: &Tensor, weights: &DptWeights) -> Result<Tensor> {
    if f_local.rank() != 4 || f_global.rank() != 3 {
        return Err(Error::dim(
            "combine",
            format!(
                "expected local[C×Z×H×W] and global[C×H×W], got {:?}, {:?}",
                f_local.shape(),
                f_global.shape()
            ),
        ));
    }
    let (c, z, h, w) = (
        f_local.shape()[0],
        f_local.shape()[1],
        f_local.shape()[2],
        f_local.shape()[3],
    );
    if f_global.shape() != [c, h, w] {
        return Err(Error::dim(
            "combine",
            format!("global {:?} does not match local {:?}", f_global.shape(), f_local.shape()),
        ));
    }
    let gate_width = weights.gate_out.shape()[1];

    // sites as rows: [Z·H·W, C]
    let sites = sites_last(f_local, c, z * h * w)?;
    let gate = sites
        .matmul(&weights.gate_hidden)?
        .relu()?
        .matmul(&weights.gate_out)?
        .sigmoid()?; // [ZHW, gate_width]
    let gate_vol = if gate_width == 1 {
        gate.reshape(&[1, z, h, w])?
    } else {
        // [ZHW, C] → [C, Z, H, W]
        let mut idx = Vec::with_capacity(c * z * h * w);
        for ch in 0..c {
            for site in 0..z * h * w {
                idx.push(site * c + ch);
            }
        }
        gate.reshape(&[z * h * w * c])?.gather(&idx, &[c, z, h, w])?
    };

    let global_b = f_global.reshape(&[c, 1, h, w])?;
    let ones = Tensor::full(&[c, z, h, w], 1.0)?;
    let global_full = ones.mul_bcast(&global_b)?;
    let gated = if gate_width == 1 {
        global_full.mul_bcast(&gate_vol)?
    } else {
        global_full.mul(&gate_vol)?
    };
    f_local.add(&gated)
}

/// Flatten `[C, ...]` to `[sites, C]` rows.
fn sites_last(x: &Tensor, c: usize, sites: usize) -> Result<Tensor> {
    let mut idx = Vec::with_capacity(sites * c);
    for site in 0..sites {
        for ch in 0..c {
            idx.push(ch * sites + site);
        }
    }
    x.reshape(&[c * sites])?.gather(&idx, &[sites, c])
}

/// Trilinear upsampling by an integer factor, built from eight weighted
/// gathers (half-pixel centers, edges clamped).
fn upsample3d(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (c, zs, hs, ws) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (z, h, w) = (zs * factor, hs * factor, ws * factor);
    // per-axis taps: (low index, high index, high weight)
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = (o as f64 + 0.5) / factor as f64 - 0.5;
                let clamped = src.clamp(0.0, (n_in - 1) as f64);
                let i0 = clamped.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, clamped - i0 as f64)
            })
            .collect()
    };
    let (tz, ty, tx) = (taps(zs, z), taps(hs, h), taps(ws, w));

    let mut total: Option<Tensor> = None;
    for corner in 0..8 {
        let (uz, uy, ux) = (corner & 1 != 0, corner & 2 != 0, corner & 4 != 0);
        let mut idx = Vec::with_capacity(c * z * h * w);
        let mut weight = Vec::with_capacity(z * h * w);
        for zi in &tz {
            for yi in &ty {
                for xi in &tx {
                    let wz = if uz { zi.2 } else { 1.0 - zi.2 };
                    let wy = if uy { yi.2 } else { 1.0 - yi.2 };
                    let wx = if ux { xi.2 } else { 1.0 - xi.2 };
                    weight.push(wz * wy * wx);
                }
            }
        }
        for ch in 0..c {
            for zi in &tz {
                for yi in &ty {
                    for xi in &tx {
                        let sz = if uz { zi.1 } else { zi.0 };
                        let sy = if uy { yi.1 } else { yi.0 };
                        let sx = if ux { xi.1 } else { xi.0 };
                        idx.push(((ch * zs + sz) * hs + sy) * ws + sx);
                    }
                }
            }
        }
        let corner_vals = x.reshape(&[c * zs * hs * ws])?.gather(&idx, &[c, z, h, w])?;
        let weight_t = Tensor::new(&[1, z, h, w], weight)?;
        let term = corner_vals.mul_bcast(&weight_t)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("eight corners"))
}

fn dpt_block(vol: &Tensor, weights: &DptWeights, window: &WindowConfig) -> Result<Tensor> {
    let local = local_path(vol, weights, window)?;
    let global = global_path(vol, weights, window)?;
    combine(&local, &global, weights)
}

/// Multi-scale dual-path transform: run the block on a stride-2 conv
/// pyramid, upsample every scale back to full resolution, and blend with
/// learnable scalars. Output resolution equals input resolution.
pub fn msdpt_forward(vol: &FeatureVolume, params: &MsdptParams) -> Result<FeatureVolume> {
    let cfg = &params.cfg;
    let dims = (vol.w(), vol.h(), vol.z());
    cfg.validate(dims)?;
    let mut pyramid = vec![vol.values.clone()];
    for down in &params.downsamples {
        let prev = pyramid.last().expect("level 0 seeded");
        pyramid.push(prev.conv3d(down, 2, 1)?);
    }
    let mut total: Option<Tensor> = None;
    for (s, level) in pyramid.iter().enumerate() {
        let refined = dpt_block(level, &params.blocks[s], &cfg.window)?;
        let restored = upsample3d(&refined, 1 << s)?;
        let alpha = params.blend[s].reshape(&[1, 1, 1, 1])?;
        let term = restored.mul_bcast(&alpha)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    vol.with_values(total.expect("at least one scale"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd;

    fn weights(c: usize, seed: f64, gate_width: usize) -> DptWeights {
        let mk = |shape: &[usize], salt: f64| {
            let n: usize = shape.iter().product();
            Tensor::leaf(
                shape,
                (0..n).map(|i| ((i as f64 + salt) * seed).sin() * 0.5).collect(),
            )
            .unwrap()
        };
        DptWeights {
            wq: mk(&[c, c], 1.0),
            wk: mk(&[c, c], 2.0),
            wv: mk(&[c, c], 3.0),
            gate_hidden: mk(&[c, c], 4.0),
            gate_out: mk(&[c, gate_width], 5.0),
        }
    }

    fn ramp(shape: &[usize], salt: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64) * salt).sin()).collect()).unwrap()
    }

    /// Plain full attention over all H·W tokens, straight from the
    /// definition, with the residual add.
    fn full_attention_oracle(x: &Tensor, w: &DptWeights) -> Vec<f64> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let t = h * wd;
        let xv = x.to_vec();
        let token = |i: usize, ch: usize| xv[ch * t + i];
        let proj = |m: &Tensor, i: usize, co: usize| {
            let mv = m.to_vec();
            (0..c).map(|ci| token(i, ci) * mv[ci * c + co]).sum::<f64>()
        };
        let mut out = vec![0.0; c * t];
        for i in 0..t {
            // scores against every token
            let mut scores: Vec<f64> = (0..t)
                .map(|j| {
                    (0..c)
                        .map(|d| proj(&w.wq, i, d) * proj(&w.wk, j, d))
                        .sum::<f64>()
                        / (c as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter_mut().map(|s| (*s - m).exp()).collect();
            let denom: f64 = exp.iter().sum();
            for ch in 0..c {
                let mixed: f64 = (0..t).map(|j| exp[j] / denom * proj(&w.wv, j, ch)).sum();
                out[ch * t + i] = token(i, ch) + mixed;
            }
        }
        out
    }

    #[test]
    fn four_token_window_matches_hand_unroll() {
        let x = ramp(&[1, 2, 2], 0.9);
        let w = weights(1, 0.7, 1);
        let cfg = WindowConfig { window: (2, 2) };
        let got = window_self_attention(&x, &w, &cfg).unwrap().to_vec();
        let want = full_attention_oracle(&x, &w);
        for (g, o) in got.iter().zip(&want) {
            assert!((g - o).abs() < 1e-12, "got {g}, want {o}");
        }
    }

    #[test]
    fn full_window_equals_global_attention() {
        let x = ramp(&[3, 4, 4], 0.37);
        let w = weights(3, 0.45, 1);
        let cfg = WindowConfig { window: (4, 4) };
        let got = window_self_attention(&x, &w, &cfg).unwrap().to_vec();
        let want = full_attention_oracle(&x, &w);
        let worst = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-9, "max deviation {worst}");
    }

    #[test]
    fn windows_are_independent() {
        let w = weights(2, 0.6, 1);
        let cfg = WindowConfig { window: (2, 2) };
        let a = ramp(&[2, 2, 4], 0.21);
        // swap the two windows (left 2×2 block ↔ right 2×2 block)
        let av = a.to_vec();
        let mut bv = av.clone();
        for ch in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    bv[(ch * 2 + y) * 4 + x] = av[(ch * 2 + y) * 4 + x + 2];
                    bv[(ch * 2 + y) * 4 + x + 2] = av[(ch * 2 + y) * 4 + x];
                }
            }
        }
        let b = Tensor::new(&[2, 2, 4], bv).unwrap();
        let oa = window_self_attention(&a, &w, &cfg).unwrap().to_vec();
        let ob = window_self_attention(&b, &w, &cfg).unwrap().to_vec();
        for ch in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let left = (ch * 2 + y) * 4 + x;
                    let right = left + 2;
                    assert_eq!(oa[left], ob[right]);
                    assert_eq!(oa[right], ob[left]);
                }
            }
        }
    }

    #[test]
    fn local_path_is_sliced_attention() {
        let w = weights(2, 0.8, 1);
        let cfg = WindowConfig { window: (2, 2) };
        let vol = ramp(&[2, 1, 2, 2], 0.5);
        let through_volume = local_path(&vol, &w, &cfg).unwrap().to_vec();
        let single = window_self_attention(&vol.reshape(&[2, 2, 2]).unwrap(), &w, &cfg)
            .unwrap()
            .to_vec();
        assert_eq!(through_volume, single);

        // swapping slices swaps outputs
        let two = ramp(&[2, 2, 2, 2], 0.3);
        let tv = two.to_vec();
        let mut swapped = tv.clone();
        for ch in 0..2 {
            for site in 0..4 {
                swapped[(ch * 2) * 4 + site] = tv[(ch * 2 + 1) * 4 + site];
                swapped[(ch * 2 + 1) * 4 + site] = tv[(ch * 2) * 4 + site];
            }
        }
        let out_a = local_path(&two, &w, &cfg).unwrap().to_vec();
        let out_b = local_path(&Tensor::new(&[2, 2, 2, 2], swapped).unwrap(), &w, &cfg)
            .unwrap()
            .to_vec();
        for ch in 0..2 {
            for site in 0..4 {
                assert_eq!(out_a[(ch * 2) * 4 + site], out_b[(ch * 2 + 1) * 4 + site]);
                assert_eq!(out_a[(ch * 2 + 1) * 4 + site], out_b[(ch * 2) * 4 + site]);
            }
        }
    }

    #[test]
    fn global_path_shares_weights() {
        let w = weights(2, 0.55, 1);
        let cfg = WindowConfig { window: (2, 2) };
        // constant along Z: pooled input equals any slice
        let slice = ramp(&[2, 2, 2], 0.77);
        let sv = slice.to_vec();
        let mut stacked = Vec::new();
        for ch in 0..2 {
            for _z in 0..3 {
                stacked.extend_from_slice(&sv[ch * 4..(ch + 1) * 4]);
            }
        }
        let vol = Tensor::new(&[2, 3, 2, 2], stacked).unwrap();
        let global = global_path(&vol, &w, &cfg).unwrap().to_vec();
        let direct = window_self_attention(&slice, &w, &cfg).unwrap().to_vec();
        let worst = global
            .iter()
            .zip(&direct)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-12, "max deviation {worst}");

        // perturbing the shared weights moves both paths
        let mut w2 = w.clone();
        w2.wv = w.wv.add_scalar(0.05).unwrap();
        let l1 = local_path(&vol, &w, &cfg).unwrap().to_vec();
        let l2 = local_path(&vol, &w2, &cfg).unwrap().to_vec();
        let g2 = global_path(&vol, &w2, &cfg).unwrap().to_vec();
        assert!(l1.iter().zip(&l2).any(|(a, b)| a != b));
        assert!(global.iter().zip(&g2).any(|(a, b)| a != b));
    }

    #[test]
    fn combine_identity_at_zero_global() {
        let w = weights(3, 0.4, 1);
        let local = ramp(&[3, 2, 2, 2], 0.61);
        let global = Tensor::zeros(&[3, 2, 2]).unwrap();
        let out = combine(&local, &global, &w).unwrap();
        assert_eq!(out.to_vec(), local.to_vec());
    }

    #[test]
    fn combine_matches_loop_oracle_and_bound() {
        for gate_width in [1usize, 3] {
            let w = weights(3, 0.52, gate_width);
            let local = ramp(&[3, 2, 2, 2], 0.43);
            let global = ramp(&[3, 2, 2], 0.29);
            let out = combine(&local, &global, &w).unwrap().to_vec();

            let lv = local.to_vec();
            let gv = global.to_vec();
            let h1 = w.gate_hidden.to_vec();
            let h2 = w.gate_out.to_vec();
            let (c, z, sites2d) = (3, 2, 4);
            let mut worst: f64 = 0.0;
            for zi in 0..z {
                for s in 0..sites2d {
                    // gate FFN at this site
                    let feat: Vec<f64> = (0..c).map(|ch| lv[(ch * z + zi) * sites2d + s]).collect();
                    let hidden: Vec<f64> = (0..c)
                        .map(|o| (0..c).map(|i| feat[i] * h1[i * c + o]).sum::<f64>().max(0.0))
                        .collect();
                    let gates: Vec<f64> = (0..gate_width)
                        .map(|o| {
                            let pre: f64 = (0..c).map(|i| hidden[i] * h2[i * gate_width + o]).sum();
                            1.0 / (1.0 + (-pre).exp())
                        })
                        .collect();
                    for ch in 0..c {
                        let gate = gates[if gate_width == 1 { 0 } else { ch }];
                        let want = lv[(ch * z + zi) * sites2d + s] + gate * gv[ch * sites2d + s];
                        let got = out[(ch * z + zi) * sites2d + s];
                        worst = worst.max((want - got).abs());
                        // σ ∈ (0,1) bounds the injected term
                        assert!(
                            (got - lv[(ch * z + zi) * sites2d + s]).abs()
                                <= gv[ch * sites2d + s].abs() + 1e-15
                        );
                    }
                }
            }
            assert!(worst < 1e-12, "max deviation {worst}");
        }
    }

    fn volume_of(t: Tensor) -> FeatureVolume {
        FeatureVolume::new(t, -6.4, -6.4, -1.0, 3.2, 1.6).unwrap()
    }

    #[test]
    fn single_scale_is_one_block() {
        let mut reg = Registry::new(21);
        let cfg = MsdptConfig {
            num_scales: 1,
            window: WindowConfig { window: (2, 2) },
            gate_per_channel: false,
        };
        let params = MsdptParams::create(&mut reg, "dpt", &cfg, 2).unwrap();
        let vol = volume_of(ramp(&[2, 2, 4, 4], 0.33));
        let out = msdpt_forward(&vol, &params).unwrap();
        assert_eq!(out.values.shape(), vol.values.shape());

        let direct = dpt_block(&vol.values, &params.blocks[0], &cfg.window).unwrap();
        let blended = direct
            .mul_bcast(&params.blend[0].reshape(&[1, 1, 1, 1]).unwrap())
            .unwrap();
        assert_eq!(out.values.to_vec(), blended.to_vec());
    }

    #[test]
    fn multi_scale_keeps_shape_and_rejects_bad_dims() {
        let mut reg = Registry::new(23);
        let cfg = MsdptConfig {
            num_scales: 2,
            window: WindowConfig { window: (2, 2) },
            gate_per_channel: false,
        };
        let params = MsdptParams::create(&mut reg, "dpt", &cfg, 2).unwrap();
        let vol = volume_of(ramp(&[2, 4, 8, 8], 0.27));
        let out = msdpt_forward(&vol, &params).unwrap();
        assert_eq!(out.values.shape(), &[2, 4, 8, 8]);

        let odd = volume_of(ramp(&[2, 3, 6, 6], 0.27));
        assert!(matches!(msdpt_forward(&odd, &params), Err(Error::Config(_))));
    }

    #[test]
    fn upsample_preserves_constants_and_mass_shape() {
        let x = Tensor::new(&[1, 2, 2, 2], vec![3.5; 8]).unwrap();
        let up = upsample3d(&x, 2).unwrap();
        assert_eq!(up.shape(), &[1, 4, 4, 4]);
        assert!(up.to_vec().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn msdpt_gradients_match_fd() {
        let mut reg = Registry::new(29);
        let cfg = MsdptConfig {
            num_scales: 2,
            window: WindowConfig { window: (2, 2) },
            gate_per_channel: false,
        };
        let params = MsdptParams::create(&mut reg, "dpt", &cfg, 2).unwrap();
        let f = move |args: &[Tensor]| {
            let vol = volume_of(args[0].clone());
            let mut p = params.clone();
            p.blend = vec![args[1].clone(), args[2].clone()];
            let out = msdpt_forward(&vol, &p)?;
            out.values.mul(&out.values)?.sum_all()
        };
        let vol = ramp(&[2, 2, 4, 4], 0.19);
        let b0 = Tensor::new(&[1], vec![0.6]).unwrap();
        let b1 = Tensor::new(&[1], vec![0.4]).unwrap();
        let err = fd::check_gradients(&f, &[vol, b0, b1], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
