//! Run configuration: one flat TOML file controls data generation, model
//! widths, module toggles, the optimizer, and loss weights.
//!
//! Every key has a default (the desk-scale run); unknown keys are
//! rejected so typos fail loudly instead of silently using a default.
//! The canonical serialization is hashed into run reports so two runs
//! can be compared by config identity alone.

use serde::{Deserialize, Serialize};

use crate::camera::CameraConfig;
use crate::error::{Error, Result};
use crate::geometry::DepthBins;
use crate::grid::{GridConfig, VolumeConfig};
use crate::lgaft::LgaftConfig;
use crate::msdpt::{MsdptConfig, WindowConfig};
use crate::scenegen::SceneConfig;
use crate::sparse::{ChainConfig, HeightCompressionConfig};
use crate::tensor::sha256_hex;

/// Fusion strategies accepted by `lgaft_strategy`.
pub const STRATEGIES: [&str; 4] = ["add", "concat", "lgft", "lgaft"];

/// Training stages accepted by `stage`.
pub const STAGES: [&str; 3] = ["joint", "lidar", "fusion"];

/// Everything a run needs, as plain key=value pairs.
///
/// Field order is the canonical serialization order; `config_hash`
/// depends on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    // ---- data -------------------------------------------------------
    /// Master seed: parameter init, scene generation, and shuffling all
    /// derive from it. Default 42.
    pub seed: u64,
    /// Number of generated scenes per run. Default 4.
    pub scenes: usize,
    /// Frames per scene. Default 5.
    pub frames: usize,
    /// Minimum boxes per scene. Default 2.
    pub min_boxes: usize,
    /// Maximum boxes per scene. Default 6.
    pub max_boxes: usize,
    /// Rendered image height in pixels; must divide by 8. Default 64.
    pub image_h: usize,
    /// Rendered image width in pixels; must divide by 8. Default 96.
    pub image_w: usize,
    /// Image channels fed to the backbone: 3 (RGB) or 1 (grayscale,
    /// averaged from the render). Default 3.
    pub image_channels: usize,
    /// LiDAR azimuth ray count per sweep. Default 16.
    pub lidar_azimuth: usize,
    /// LiDAR elevation ray count per sweep. Default 64.
    pub lidar_elevation: usize,

    // ---- grid / voxels ----------------------------------------------
    /// Half-extent of the grid in x and y, meters. Default 12.8.
    pub extent: f64,
    /// Lower z bound of the grid, meters. Default -1.0.
    pub z_min: f64,
    /// Upper z bound of the grid, meters. Default 5.4.
    pub z_max: f64,
    /// Cubic voxel edge at stride 1, meters. Default 0.4.
    pub voxel: f64,
    /// Z bins of the camera feature volume. Default 8.
    pub volume_z_bins: usize,
    /// Z bins of the LiDAR height compression. Default 4.
    pub height_bins: usize,

    // ---- model widths -----------------------------------------------
    /// Channel widths of the six sparse chain stages.
    /// Default [16, 16, 32, 64, 64, 64].
    pub chain_widths: Vec<usize>,
    /// Sparse conv kernel edge (odd). Default 3.
    pub chain_kernel: usize,
    /// Image backbone stage widths. Default [8, 16, 32].
    pub camera_widths: Vec<usize>,
    /// Depth encoder stage widths. Default [4, 8, 8].
    pub depth_widths: Vec<usize>,
    /// Depth-aware camera feature width (volume channels). Default 32.
    pub mix_channels: usize,
    /// Depth bin count for the lift. Default 32.
    pub depth_bins: usize,
    /// Nearest depth bin edge, meters. Default 1.0.
    pub depth_min: f64,
    /// Farthest depth bin edge, meters. Default 26.6.
    pub depth_max: f64,
    /// Channels of the lifted LiDAR guidance volume. Default 16.
    pub vol_channels: usize,
    /// BEV feature channels for both modalities. Default 32.
    pub bev_channels: usize,
    /// Expanded channel width C' inside adaptive fusion. Default 32.
    pub expand_channels: usize,
    /// Fused BEV channels C. Default 32.
    pub fused_channels: usize,
    /// Hidden width of the detection head encoder. Default 32.
    pub head_hidden: usize,
    /// Number of detection classes. Default 1.
    pub num_classes: usize,

    // ---- module toggles ---------------------------------------------
    /// Feed sparse LiDAR depth into the camera stream. When false the
    /// depth planes are all-invalid, so the depth encoder contributes
    /// exactly zero. Default true.
    pub sdg: bool,
    /// Gate the camera volume with LiDAR occupancy. When false the
    /// gated volume is the ungated one, bit for bit. Default true.
    pub log: bool,
    /// Run dual-path windowed attention on the camera volume. When
    /// false the volume passes through unchanged. Default true.
    pub msdpt: bool,
    /// Attention pyramid depth (1..=4). Default 3.
    pub msdpt_scales: usize,
    /// Square attention window edge in BEV cells. Default 4.
    pub window: usize,
    /// Per-channel (true) or per-site (false) attention gate. Default false.
    pub gate_per_channel: bool,
    /// BEV fusion strategy: "add", "concat", "lgft", or "lgaft".
    /// Default "lgaft".
    pub lgaft_strategy: String,
    /// Residual path from the LiDAR BEV features inside fusion.
    /// Default true.
    pub lgaft_residual: bool,
    /// Hard cap on attention tokens (H·W). Default 4096.
    pub token_cap: usize,
    /// Fuse the warped previous BEV frame. When false the head consumes
    /// the fused frame directly. Default true.
    pub temporal: bool,
    /// Frames of BEV history kept for warping. Default 1.
    pub temporal_window: usize,

    // ---- optimizer ---------------------------------------------------
    /// Adam learning rate. Default 1e-3.
    pub lr: f64,
    /// Training steps (one frame per step). Default 500.
    pub steps: usize,
    /// Which parameters train: "joint" (all), "lidar" (LiDAR stream +
    /// head), or "fusion" (everything except the LiDAR stream).
    /// Default "joint".
    pub stage: String,

    // ---- loss weights -------------------------------------------------
    /// Detection loss weight. Default 1.0.
    pub w_detection: f64,
    /// Depth supervision weight. Default 0.1.
    pub w_depth: f64,
    /// Occupancy supervision weight. Default 0.1.
    pub w_occupancy: f64,

    // ---- decoding / evaluation ----------------------------------------
    /// Heatmap score threshold for decoded boxes. Default 0.25.
    pub score_thresh: f64,
    /// Maximum decoded boxes per frame. Default 16.
    pub max_dets: usize,
    /// Rotated BEV IoU threshold for AP matching. Default 0.5.
    pub iou_thresh: f64,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig::desk_default()
    }
}

impl PipelineConfig {
    /// The desk-scale run: every suite default in one place.
    pub fn desk_default() -> PipelineConfig {
        PipelineConfig {
            seed: 42,
            scenes: 4,
            frames: 5,
            min_boxes: 2,
            max_boxes: 6,
            image_h: 64,
            image_w: 96,
            image_channels: 3,
            lidar_azimuth: 16,
            lidar_elevation: 64,
            extent: 12.8,
            z_min: -1.0,
            z_max: 5.4,
            voxel: 0.4,
            volume_z_bins: 8,
            height_bins: 4,
            chain_widths: vec![16, 16, 32, 64, 64, 64],
            chain_kernel: 3,
            camera_widths: vec![8, 16, 32],
            depth_widths: vec![4, 8, 8],
            mix_channels: 32,
            depth_bins: 32,
            depth_min: 1.0,
            depth_max: 26.6,
            vol_channels: 16,
            bev_channels: 32,
            expand_channels: 32,
            fused_channels: 32,
            head_hidden: 32,
            num_classes: 1,
            sdg: true,
            log: true,
            msdpt: true,
            msdpt_scales: 3,
            window: 4,
            gate_per_channel: false,
            lgaft_strategy: "lgaft".into(),
            lgaft_residual: true,
            token_cap: 4096,
            temporal: true,
            temporal_window: 1,
            lr: 1e-3,
            steps: 500,
            stage: "joint".into(),
            w_detection: 1.0,
            w_depth: 0.1,
            w_occupancy: 0.1,
            score_thresh: 0.25,
            max_dets: 16,
            iou_thresh: 0.5,
        }
    }

    /// Gradient-check preset: every width shrunk until the whole model
    /// holds under 200 scalars, so central differences over all of them
    /// stay fast. Attention pyramid off (its own finite-difference test
    /// lives with the module).
    pub fn micro() -> PipelineConfig {
        PipelineConfig {
            scenes: 1,
            frames: 1,
            min_boxes: 2,
            max_boxes: 2,
            image_h: 16,
            image_w: 24,
            image_channels: 1,
            lidar_azimuth: 8,
            lidar_elevation: 16,
            extent: 6.4,
            z_min: 0.0,
            z_max: 6.4,
            volume_z_bins: 1,
            height_bins: 1,
            chain_widths: vec![2, 2, 1, 1, 1, 1],
            chain_kernel: 1,
            camera_widths: vec![1, 1, 1],
            depth_widths: vec![1, 1, 1],
            mix_channels: 1,
            depth_bins: 2,
            depth_max: 6.6,
            vol_channels: 1,
            bev_channels: 1,
            expand_channels: 1,
            fused_channels: 2,
            head_hidden: 1,
            msdpt: false,
            temporal: false,
            ..PipelineConfig::desk_default()
        }
    }

    /// Parse a TOML document, filling missing keys from the defaults.
    pub fn from_toml_str(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a config file.
    pub fn load(path: &std::path::Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        PipelineConfig::from_toml_str(&text)
    }

    /// Canonical serialization: every key, in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        self.scene_config(0).validate()?;
        self.chain_config()?.validate(self.grid().dims())?;
        self.height_config().validate()?;
        self.camera_config().validate((self.image_h, self.image_w))?;
        self.lgaft_config().validate()?;
        if self.msdpt {
            let (nx, ny, nz) = self.volume_config().dims(&self.grid());
            self.msdpt_config().validate((nx, ny, nz))?;
        }
        if self.volume_z_bins == 0 {
            return Err(Error::Config("volume_z_bins must be positive".into()));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Config(format!(
                "image_channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if !STRATEGIES.contains(&self.lgaft_strategy.as_str()) {
            return Err(Error::Config(format!(
                "lgaft_strategy must be one of {STRATEGIES:?}, got {:?}",
                self.lgaft_strategy
            )));
        }
        if !STAGES.contains(&self.stage.as_str()) {
            return Err(Error::Config(format!(
                "stage must be one of {STAGES:?}, got {:?}",
                self.stage
            )));
        }
        if self.scenes == 0 || self.frames == 0 {
            return Err(Error::Config("need at least one scene and frame".into()));
        }
        if self.min_boxes == 0 || self.min_boxes > self.max_boxes {
            return Err(Error::Config(format!(
                "box count range [{}, {}] is empty or starts at zero",
                self.min_boxes, self.max_boxes
            )));
        }
        if self.temporal_window == 0 {
            return Err(Error::Config("temporal_window must be positive".into()));
        }
        if !(self.lr > 0.0) || self.steps == 0 {
            return Err(Error::Config(format!(
                "optimizer needs lr > 0 and steps > 0, got lr = {}, steps = {}",
                self.lr, self.steps
            )));
        }
        for (name, w) in [
            ("w_detection", self.w_detection),
            ("w_depth", self.w_depth),
            ("w_occupancy", self.w_occupancy),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.iou_thresh) {
            return Err(Error::Config(
                "score_thresh and iou_thresh must lie in [0, 1]".into(),
            ));
        }
        if self.max_dets == 0 {
            return Err(Error::Config("max_dets must be positive".into()));
        }
        Ok(())
    }

    // ---- derived sub-configurations ------------------------------------

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            x_min: -self.extent,
            x_max: self.extent,
            y_min: -self.extent,
            y_max: self.extent,
            z_min: self.z_min,
            z_max: self.z_max,
            voxel: (self.voxel, self.voxel, self.voxel),
        }
    }

    pub fn volume_config(&self) -> VolumeConfig {
        VolumeConfig {
            z_bins: self.volume_z_bins,
        }
    }

    pub fn height_config(&self) -> HeightCompressionConfig {
        HeightCompressionConfig {
            z_bins: self.height_bins,
        }
    }

    pub fn chain_config(&self) -> Result<ChainConfig> {
        let widths: [usize; 6] = self.chain_widths.as_slice().try_into().map_err(|_| {
            Error::Config(format!(
                "chain_widths needs exactly 6 entries, got {}",
                self.chain_widths.len()
            ))
        })?;
        Ok(ChainConfig {
            widths,
            kernel: self.chain_kernel,
        })
    }

    pub fn camera_config(&self) -> CameraConfig {
        let take3 = |v: &[usize]| -> [usize; 3] {
            let mut out = [1; 3];
            for (o, w) in out.iter_mut().zip(v) {
                *o = *w;
            }
            out
        };
        CameraConfig {
            in_channels: self.image_channels,
            stage_widths: take3(&self.camera_widths),
            depth_widths: take3(&self.depth_widths),
            mix_channels: self.mix_channels,
            bins: DepthBins {
                min: self.depth_min,
                max: self.depth_max,
                count: self.depth_bins,
            },
        }
    }

    pub fn msdpt_config(&self) -> MsdptConfig {
        MsdptConfig {
            num_scales: self.msdpt_scales,
            window: WindowConfig {
                window: (self.window, self.window),
            },
            gate_per_channel: self.gate_per_channel,
        }
    }

    pub fn lgaft_config(&self) -> LgaftConfig {
        LgaftConfig {
            c_prime: self.expand_channels,
            c_out: self.fused_channels,
            token_cap: self.token_cap,
            residual: self.lgaft_residual,
        }
    }

    /// Scene recipe for scene index `i`; each scene draws its own seed
    /// from the master seed so scenes differ but stay reproducible.
    pub fn scene_config(&self, i: u64) -> SceneConfig {
        SceneConfig {
            seed: self
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i.wrapping_mul(0xBF58_476D_1CE4_E5B9)),
            n_frames: self.frames,
            n_boxes: (self.min_boxes, self.max_boxes),
            azimuth_rays: self.lidar_azimuth,
            elevation_rays: self.lidar_elevation,
            image_size: (self.image_h, self.image_w),
            ..SceneConfig::desk_default()
        }
    }
}
