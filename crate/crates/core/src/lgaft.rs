//! Adaptive fusion of the LiDAR and camera BEV maps: both modalities are
//! projected to a shared width, a sigmoid gate weighs them per cell, and a
//! single-head cross-attention (LiDAR-weighted query, camera key/value)
//! produces the fused map. The non-adaptive baselines used for strategy
//! ablations (add / concat / fixed-gate) live here too.

use crate::error::{Error, Result};
use crate::grid::BevGrid;
use crate::tensor::{concat, ParamInit, Registry, Tensor};

const LN_EPS: f64 = 1e-5;

/// Fusion-attention geometry. `c_prime` is the shared per-modality width,
/// `c_out` the fused output width. `token_cap` bounds H·W because the
/// attention matrix is quadratic in it.
#[derive(Clone, Copy, Debug)]
pub struct LgaftConfig {
    pub c_prime: usize,
    pub c_out: usize,
    pub token_cap: usize,
    pub residual: bool,
}

impl LgaftConfig {
    pub fn desk_default() -> LgaftConfig {
        LgaftConfig {
            c_prime: 32,
            c_out: 32,
            token_cap: 4096,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_prime == 0 || self.c_out == 0 {
            return Err(Error::Config("fusion widths must be nonzero".into()));
        }
        if self.token_cap == 0 {
            return Err(Error::Config("token cap must be nonzero".into()));
        }
        Ok(())
    }
}

/// Per-cell modality gate, strictly inside (0,1).
#[derive(Clone, Debug)]
pub struct FusionWeights {
    values: Tensor,
}

impl FusionWeights {
    pub fn new(values: Tensor) -> Result<FusionWeights> {
        if values.rank() != 3 {
            return Err(Error::dim(
                "fusion_weights",
                format!("expected [C×H×W], got {:?}", values.shape()),
            ));
        }
        if values.to_vec().iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(Error::contract(
                "fusion_weights",
                "gate values must lie strictly in (0,1)",
            ));
        }
        Ok(FusionWeights { values })
    }

    /// Constant gate (used by the non-adaptive baseline).
    pub fn constant(v: f64, shape: &[usize; 3]) -> Result<FusionWeights> {
        FusionWeights::new(Tensor::full(shape, v)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Lidar,
    Camera,
}

/// All learnable state of the fusion stage, including the baseline
/// projections so a run's initialization is identical across strategies.
#[derive(Clone, Debug)]
pub struct LgaftParams {
    pub expand_lidar: (Tensor, Tensor),
    pub expand_camera: (Tensor, Tensor),
    pub gate: (Tensor, Tensor),
    pub pos: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub mlp: (Tensor, Tensor),
    pub residual_proj: Tensor,
    pub add_proj: (Tensor, Tensor),
    pub concat_proj: Tensor,
    cfg: LgaftConfig,
}

impl LgaftParams {
    pub fn create(
        reg: &mut Registry,
        prefix: &str,
        c_lidar: usize,
        c_camera: usize,
        bev_dims: (usize, usize),
        cfg: &LgaftConfig,
    ) -> Result<LgaftParams> {
        cfg.validate()?;
        let (cp, co) = (cfg.c_prime, cfg.c_out);
        let (h, w) = bev_dims;
        let conv1 = |reg: &mut Registry, name: String, c_in: usize, c_out: usize| {
            reg.param(
                &name,
                &[c_out, c_in, 1, 1],
                ParamInit::XavierUniform {
                    fan_in: c_in,
                    fan_out: c_out,
                },
            )
        };
        let bias = |reg: &mut Registry, name: String, c: usize| {
            reg.param(&name, &[c], ParamInit::Constant(0.0))
        };
        let dense = |reg: &mut Registry, name: String, rows: usize, cols: usize| {
            reg.param(
                &name,
                &[rows, cols],
                ParamInit::XavierUniform {
                    fan_in: rows,
                    fan_out: cols,
                },
            )
        };
        Ok(LgaftParams {
            expand_lidar: (
                conv1(reg, format!("{prefix}.expand.lidar.w"), c_lidar, cp)?,
                bias(reg, format!("{prefix}.expand.lidar.b"), cp)?,
            ),
            expand_camera: (
                conv1(reg, format!("{prefix}.expand.camera.w"), c_camera, cp)?,
                bias(reg, format!("{prefix}.expand.camera.b"), cp)?,
            ),
            gate: (
                conv1(reg, format!("{prefix}.gate.w"), 2 * cp, cp)?,
                bias(reg, format!("{prefix}.gate.b"), cp)?,
            ),
            pos: reg.param(&format!("{prefix}.pos"), &[cp, h, w], ParamInit::Constant(0.0))?,
            wq: dense(reg, format!("{prefix}.attn.wq"), 2 * cp, co)?,
            wk: dense(reg, format!("{prefix}.attn.wk"), cp, co)?,
            wv: dense(reg, format!("{prefix}.attn.wv"), cp, co)?,
            mlp: (
                dense(reg, format!("{prefix}.mlp.w1"), co, co)?,
                dense(reg, format!("{prefix}.mlp.w2"), co, co)?,
            ),
            residual_proj: dense(reg, format!("{prefix}.residual"), cp, co)?,
            add_proj: (
                conv1(reg, format!("{prefix}.add.lidar"), c_lidar, co)?,
                conv1(reg, format!("{prefix}.add.camera"), c_camera, co)?,
            ),
            concat_proj: conv1(reg, format!("{prefix}.concat"), c_lidar + c_camera, co)?,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &LgaftConfig {
        &self.cfg
    }
}

fn conv1x1(x: &BevGrid, w: &Tensor, b: Option<&Tensor>) -> Result<BevGrid> {
    let mut out = x.values.conv2d(w, 1, 0)?;
    if let Some(b) = b {
        let c = b.shape()[0];
        out = out.add_bcast(&b.reshape(&[c, 1, 1])?)?;
    }
    x.with_values(out)
}

/// Project one modality's BEV map to the shared fusion width.
pub fn expand_channels(x: &BevGrid, which: Modality, params: &LgaftParams) -> Result<BevGrid> {
    let (w, b) = match which {
        Modality::Lidar => &params.expand_lidar,
        Modality::Camera => &params.expand_camera,
    };
    conv1x1(x, w, Some(b))
}

/// Per-cell sigmoid gate over the concatenated expanded modalities.
pub fn adaptive_weights(
    f_lb: &BevGrid,
    f_cb: &BevGrid,
    params: &LgaftParams,
) -> Result<FusionWeights> {
    if f_lb.values.shape() != f_cb.values.shape() {
        return Err(Error::dim(
            "adaptive_weights",
            format!(
                "modality shapes differ: {:?} vs {:?}",
                f_lb.values.shape(),
                f_cb.values.shape()
            ),
        ));
    }
    let stacked = concat(&[&f_lb.values, &f_cb.values], 0)?;
    let (w, b) = &params.gate;
    let c = b.shape()[0];
    let pre = stacked.conv2d(w, 1, 0)?.add_bcast(&b.reshape(&[c, 1, 1])?)?;
    FusionWeights::new(pre.sigmoid()?)
}

/// `[C,H,W]` → token rows `[H·W, C]`.
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let t = h * w;
    let mut idx = Vec::with_capacity(t * c);
    for site in 0..t {
        for ch in 0..c {
            idx.push(ch * t + site);
        }
    }
    x.reshape(&[c * t])?.gather(&idx, &[t, c])
}

/// Token rows `[H·W, C]` → `[C,H,W]`.
fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let mut idx = Vec::with_capacity(c * t);
    for ch in 0..c {
        for site in 0..t {
            idx.push(site * c + ch);
        }
    }
    x.reshape(&[t * c])?.gather(&idx, &[c, h, w])
}

/// Gated single-head cross-attention fusion. The query mixes the gated
/// LiDAR map with the gated, position-embedded camera map; keys and
/// values come from the camera side; the attended result is
/// layer-normed, passed through a two-layer MLP, and (by default)
/// offset by a projection of the LiDAR map.
pub fn lgaft_fuse(
    f_lb: &BevGrid,
    f_cb: &BevGrid,
    wf: &FusionWeights,
    pos: &Tensor,
    params: &LgaftParams,
) -> Result<BevGrid> {
    let shape = f_lb.values.shape().to_vec();
    if f_cb.values.shape() != shape || wf.values.shape() != shape || pos.shape() != shape {
        return Err(Error::dim(
            "lgaft_fuse",
            format!(
                "inputs must share [C′×H×W]: lidar {:?}, camera {:?}, gate {:?}, pos {:?}",
                shape,
                f_cb.values.shape(),
                wf.values.shape(),
                pos.shape()
            ),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    let tokens = h * w;
    if tokens > params.cfg.token_cap {
        return Err(Error::Config(format!(
            "{tokens} BEV tokens exceed the attention cap {}",
            params.cfg.token_cap
        )));
    }
    let c_out = params.cfg.c_out;

    let cam = f_cb.values.add(pos)?;
    let gated_cam = wf.values.mul(&cam)?;
    let inv_gate = wf.values.scale(-1.0)?.add_scalar(1.0)?;
    let gated_lidar = inv_gate.mul(&f_lb.values)?;

    let q_in = to_tokens(&concat(&[&gated_lidar, &gated_cam], 0)?)?;
    let q = q_in.matmul(&params.wq)?;
    let k = to_tokens(&gated_cam)?.matmul(&params.wk)?;
    let v = to_tokens(&cam)?.matmul(&params.wv)?;

    let scores = q
        .matmul(&k.transpose_last2()?)?
        .scale(1.0 / (c_out as f64).sqrt())?;
    let attended = scores.softmax(1)?.matmul(&v)?;
    let mut out = attended
        .layer_norm(1, LN_EPS)?
        .matmul(&params.mlp.0)?
        .relu()?
        .matmul(&params.mlp.1)?;
    if params.cfg.residual {
        let res = to_tokens(&f_lb.values)?.matmul(&params.residual_proj)?;
        out = out.add(&res)?;
    }
    f_lb.with_values(from_tokens(&out, h, w)?)
}

/// Non-adaptive fusion strategies for ablations. `add` sums per-modality
/// projections, `concat` projects the channel concatenation, `lgft` runs
/// the attention fusion with the gate frozen at one half.
pub fn baseline_fuse(
    f_lb: &BevGrid,
    f_cb: &BevGrid,
    strategy: &str,
    params: &LgaftParams,
) -> Result<BevGrid> {
    if f_lb.values.shape()[1..] != f_cb.values.shape()[1..] {
        return Err(Error::dim(
            "baseline_fuse",
            format!(
                "spatial shapes differ: {:?} vs {:?}",
                f_lb.values.shape(),
                f_cb.values.shape()
            ),
        ));
    }
    match strategy {
        "add" => {
            let l = conv1x1(f_lb, &params.add_proj.0, None)?;
            let c = conv1x1(f_cb, &params.add_proj.1, None)?;
            l.with_values(l.values.add(&c.values)?)
        }
        "concat" => {
            let stacked = concat(&[&f_lb.values, &f_cb.values], 0)?;
            f_lb.with_values(stacked.conv2d(&params.concat_proj, 1, 0)?)
        }
        "lgft" => {
            let l = expand_channels(f_lb, Modality::Lidar, params)?;
            let c = expand_channels(f_cb, Modality::Camera, params)?;
            let shape = l.values.shape();
            let wf = FusionWeights::constant(0.5, &[shape[0], shape[1], shape[2]])?;
            lgaft_fuse(&l, &c, &wf, &params.pos, params)
        }
        other => Err(Error::Config(format!(
            "unknown fusion strategy '{other}' (expected add, concat, or lgft)"
        ))),
    }
}
