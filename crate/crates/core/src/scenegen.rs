//! Deterministic synthetic scene generator: boxes on a ground plane, a
//! moving ego, LiDAR returns from ray casting with counter-seeded range
//! noise, and shaded-depth camera renders. One seed fixes every byte of
//! the output.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detect::{normalize_yaw, Box3D, BoxRecord};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, EgoPose};
use crate::grid::PointCloud;
use crate::tensor::{load_tensor, save_tensor, Tensor};

/// LiDAR mount height above the ground plane (ego frame is grounded).
const LIDAR_HEIGHT: f64 = 1.6;
/// Elevation sweep in radians, lowest to highest ray.
const ELEVATION_SPAN: (f64, f64) = (-0.42, 0.035);
/// Boxes keep this center distance from each other; it exceeds the
/// largest possible footprint half-diagonal sum, so separation alone
/// guarantees non-overlap, and it exceeds one BEV cell diagonal so two
/// centers never share a target cell.
const MIN_BOX_SEPARATION: f64 = 5.5;
/// Boxes stay out of this half-width corridor around the ego path.
const EGO_CORRIDOR: f64 = 3.0;
/// Placement field half-extent in meters.
const FIELD_HALF: f64 = 11.0;
/// Per-surface reflectance: LiDAR intensity and RGB albedo.
const GROUND_INTENSITY: f64 = 0.3;
const BOX_INTENSITY: f64 = 0.8;
const GROUND_ALBEDO: [f64; 3] = [0.25, 0.25, 0.28];
const BOX_ALBEDO: [f64; 3] = [0.85, 0.35, 0.25];

/// Everything that determines a scene. Identical configs generate
/// bit-identical scenes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_frames: usize,
    /// Inclusive box-count range.
    pub n_boxes: (usize, usize),
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    /// Meters per second; frames are `frame_dt` apart.
    pub ego_speed: f64,
    /// Radians per second; zero drives a straight path, nonzero an arc.
    pub ego_yaw_rate: f64,
    pub frame_dt: f64,
    pub azimuth_rays: usize,
    pub elevation_rays: usize,
    /// Gaussian range noise σ in meters.
    pub range_noise: f64,
    pub max_range: f64,
    /// (H, W) pixels per camera image.
    pub image_size: (usize, usize),
}

impl SceneConfig {
    pub fn desk_default() -> SceneConfig {
        SceneConfig {
            seed: 0,
            n_frames: 5,
            n_boxes: (2, 6),
            length_range: (3.6, 4.8),
            width_range: (1.6, 2.1),
            height_range: (1.4, 1.8),
            ego_speed: 2.0,
            ego_yaw_rate: 0.0,
            frame_dt: 0.5,
            azimuth_rays: 16,
            elevation_rays: 64,
            range_noise: 0.02,
            max_range: 30.0,
            image_size: (64, 96),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("n_boxes", self.n_boxes.0 as f64, self.n_boxes.1 as f64),
            ("length", self.length_range.0, self.length_range.1),
            ("width", self.width_range.0, self.width_range.1),
            ("height", self.height_range.0, self.height_range.1),
        ];
        for (name, lo, hi) in ranges {
            if lo > hi || lo < 0.0 {
                return Err(Error::Config(format!("degenerate {name} range [{lo}, {hi}]")));
            }
        }
        if self.length_range.0 <= 0.0 || self.width_range.0 <= 0.0 || self.height_range.0 <= 0.0 {
            return Err(Error::Config("box sizes must be positive".into()));
        }
        if self.n_frames == 0 {
            return Err(Error::Config("a scene needs at least one frame".into()));
        }
        if self.azimuth_rays == 0 || self.elevation_rays == 0 {
            return Err(Error::Config("ray counts must be nonzero".into()));
        }
        if self.range_noise < 0.0 || self.max_range <= 0.0 {
            return Err(Error::Config("noise must be ≥ 0 and max range positive".into()));
        }
        if self.frame_dt <= 0.0 || self.ego_speed < 0.0 {
            return Err(Error::Config("frame spacing must be positive".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config("image size must be nonzero".into()));
        }
        Ok(())
    }
}

/// One timestep of sensor data, everything in the ego frame at that
/// instant.
#[derive(Clone, Debug)]
pub struct Frame {
    pub frame_id: u64,
    pub points: PointCloud,
    /// `[N_c, 3, H, W]` shaded renders.
    pub images: Tensor,
    pub cameras: Vec<CameraModel>,
    pub ego: EgoPose,
    pub gt_boxes: Vec<Box3D>,
}

/// What a ray hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Ground,
    Box(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct RayHit {
    pub point: Vector3<f64>,
    pub range: f64,
    pub surface: Surface,
}

/// Nearest positive-range intersection of a ray with the box set and the
/// ground plane `z = ground_z`. Direction need not be normalized; range
/// is metric.
pub fn ray_cast(
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    boxes: &[Box3D],
    ground_z: f64,
) -> Option<RayHit> {
    let dir = direction.normalize();
    let mut best: Option<RayHit> = None;
    let mut consider = |range: f64, surface: Surface| {
        if range > 1e-9 && best.map_or(true, |b| range < b.range) {
            best = Some(RayHit {
                point: origin + dir * range,
                range,
                surface,
            });
        }
    };
    if dir.z < -1e-12 {
        consider((ground_z - origin.z) / dir.z, Surface::Ground);
    }
    for (i, b) in boxes.iter().enumerate() {
        if let Some(t) = ray_box(origin, &dir, b) {
            consider(t, Surface::Box(i));
        }
    }
    best
}

/// Slab test in the box's local frame; returns the entry range.
fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &Box3D) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let rel = Vector3::new(
        origin.x - b.center.0,
        origin.y - b.center.1,
        origin.z - b.center.2,
    );
    let o = [
        c * rel.x + s * rel.y,
        -s * rel.x + c * rel.y,
        rel.z,
    ];
    let d = [
        c * dir.x + s * dir.y,
        -s * dir.x + c * dir.y,
        dir.z,
    ];
    let half = [b.size.0 / 2.0, b.size.1 / 2.0, b.size.2 / 2.0];
    let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t0 = (-half[a] - o[a]) / d[a];
        let t1 = (half[a] - o[a]) / d[a];
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        tmin = tmin.max(lo);
        tmax = tmax.min(hi);
        if tmin > tmax {
            return None;
        }
    }
    (tmin > 1e-9).then_some(tmin)
}

/// Counter-seeded unit gaussian: pure function of (seed, frame, ray), so
/// noise is independent of evaluation order and platform.
fn ray_noise(seed: u64, frame: u64, ray: u64) -> f64 {
    let mix = seed
        ^ (frame + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (ray + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    rng.sample(StandardNormal)
}

/// Ego pose at frame `i`: straight line along +x, or a constant-rate arc.
fn ego_pose_at(cfg: &SceneConfig, i: usize) -> EgoPose {
    let t = i as f64 * cfg.frame_dt;
    if cfg.ego_yaw_rate.abs() < 1e-12 {
        EgoPose::planar(cfg.ego_speed * t, 0.0, 0.0, t)
    } else {
        let yaw = cfg.ego_yaw_rate * t;
        let radius = cfg.ego_speed / cfg.ego_yaw_rate;
        EgoPose::planar(radius * yaw.sin(), radius * (1.0 - yaw.cos()), yaw, t)
    }
}

/// The two desk cameras: front-left and front-right, 90° horizontal FOV,
/// optical axes ±30° off the ego heading.
fn desk_cameras(image_size: (usize, usize)) -> Result<Vec<CameraModel>> {
    let (h, w) = image_size;
    let fx = w as f64 / 2.0; // 90° horizontal FOV
    let make = |yaw: f64, y_off: f64| {
        let (s, c) = yaw.sin_cos();
        // rows: camera right, camera down, camera forward (ego→cam)
        let rot = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let pos = Vector3::new(0.8, y_off, 1.4);
        CameraModel::new(
            fx,
            fx,
            w as f64 / 2.0,
            h as f64 / 2.0,
            rot,
            -rot * pos,
            image_size,
        )
    };
    Ok(vec![
        make(std::f64::consts::FRAC_PI_6, 0.3)?,
        make(-std::f64::consts::FRAC_PI_6, -0.3)?,
    ])
}

fn place_boxes(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let n = rng.random_range(cfg.n_boxes.0..=cfg.n_boxes.1);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _attempt in 0..1000 {
            let x = rng.random_range(-FIELD_HALF..FIELD_HALF);
            let y = rng.random_range(-FIELD_HALF..FIELD_HALF);
            if y.abs() < EGO_CORRIDOR {
                continue;
            }
            if boxes.iter().any(|b| {
                let (dx, dy) = (b.center.0 - x, b.center.1 - y);
                (dx * dx + dy * dy).sqrt() < MIN_BOX_SEPARATION
            }) {
                continue;
            }
            let l = rng.random_range(cfg.length_range.0..=cfg.length_range.1);
            let w = rng.random_range(cfg.width_range.0..=cfg.width_range.1);
            let h = rng.random_range(cfg.height_range.0..=cfg.height_range.1);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            boxes.push(Box3D::new((x, y, h / 2.0), (l, w, h), yaw, 0, 1.0)?);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place box {} of {n} without overlap after 1000 attempts",
                boxes.len() + 1
            )));
        }
    }
    Ok(boxes)
}

fn world_to_ego_box(b: &Box3D, pose: &EgoPose) -> Result<Box3D> {
    let rel = pose.rotation.transpose()
        * (Vector3::new(b.center.0, b.center.1, b.center.2) - pose.translation);
    let ego_yaw = pose.rotation[(1, 0)].atan2(pose.rotation[(0, 0)]);
    Box3D::new(
        (rel.x, rel.y, rel.z),
        b.size,
        normalize_yaw(b.yaw - ego_yaw),
        b.class_id,
        b.score,
    )
}

fn lidar_sweep(cfg: &SceneConfig, frame_id: u64, boxes: &[Box3D]) -> PointCloud {
    let origin = Vector3::new(0.0, 0.0, LIDAR_HEIGHT);
    let mut points = Vec::new();
    for ia in 0..cfg.azimuth_rays {
        let azimuth = 2.0 * std::f64::consts::PI * ia as f64 / cfg.azimuth_rays as f64;
        for ie in 0..cfg.elevation_rays {
            let frac = if cfg.elevation_rays == 1 {
                0.5
            } else {
                ie as f64 / (cfg.elevation_rays - 1) as f64
            };
            let elevation = ELEVATION_SPAN.0 + frac * (ELEVATION_SPAN.1 - ELEVATION_SPAN.0);
            let (se, ce) = elevation.sin_cos();
            let (sa, ca) = azimuth.sin_cos();
            let dir = Vector3::new(ce * ca, ce * sa, se);
            let Some(hit) = ray_cast(&origin, &dir, boxes, 0.0) else {
                continue;
            };
            if hit.range > cfg.max_range {
                continue;
            }
            let ray = (ia * cfg.elevation_rays + ie) as u64;
            let range = hit.range + cfg.range_noise * ray_noise(cfg.seed, frame_id, ray);
            if range <= 0.0 {
                continue;
            }
            let p = origin + dir * range;
            let intensity = match hit.surface {
                Surface::Ground => GROUND_INTENSITY,
                Surface::Box(_) => BOX_INTENSITY,
            };
            points.push([p.x, p.y, p.z, intensity]);
        }
    }
    points
}

fn render_images(cfg: &SceneConfig, cameras: &[CameraModel], boxes: &[Box3D]) -> Result<Tensor> {
    let (h, w) = cfg.image_size;
    let mut values = vec![0.0; cameras.len() * 3 * h * w];
    for (ic, cam) in cameras.iter().enumerate() {
        let origin = cam.camera_to_ego(&Vector3::zeros());
        for i in 0..h {
            for j in 0..w {
                let through = cam.unproject(j as f64 + 0.5, i as f64 + 0.5, 1.0);
                let dir = through - origin;
                let Some(hit) = ray_cast(&origin, &dir, boxes, 0.0) else {
                    continue;
                };
                let depth = cam.ego_to_camera(&hit.point).z;
                if depth <= 0.0 || depth > cfg.max_range {
                    continue;
                }
                let albedo = match hit.surface {
                    Surface::Ground => GROUND_ALBEDO,
                    Surface::Box(_) => BOX_ALBEDO,
                };
                for ch in 0..3 {
                    values[((ic * 3 + ch) * h + i) * w + j] = albedo[ch] / (1.0 + depth);
                }
            }
        }
    }
    Tensor::new(&[cameras.len(), 3, h, w], values)
}

/// Generate a full scene: static world boxes, a moving ego, and per-frame
/// LiDAR returns, camera renders, and ego-frame ground truth.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Vec<Frame>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world_boxes = place_boxes(cfg, &mut rng)?;
    let cameras = desk_cameras(cfg.image_size)?;

    let mut frames = Vec::with_capacity(cfg.n_frames);
    for i in 0..cfg.n_frames {
        let ego = ego_pose_at(cfg, i);
        let gt_boxes: Vec<Box3D> = world_boxes
            .iter()
            .map(|b| world_to_ego_box(b, &ego))
            .collect::<Result<_>>()?;
        let points = lidar_sweep(cfg, i as u64, &gt_boxes);
        let images = render_images(cfg, &cameras, &gt_boxes)?;
        frames.push(Frame {
            frame_id: i as u64,
            points,
            images,
            cameras: cameras.clone(),
            ego,
            gt_boxes,
        });
    }
    Ok(frames)
}

#[derive(Serialize, Deserialize)]
struct PoseDoc {
    rotation: [f64; 9],
    translation: [f64; 3],
    timestamp: f64,
}

impl PoseDoc {
    fn from_pose(p: &EgoPose) -> PoseDoc {
        PoseDoc {
            rotation: flatten_rotation(&p.rotation),
            translation: [p.translation.x, p.translation.y, p.translation.z],
            timestamp: p.timestamp,
        }
    }

    fn to_pose(&self) -> Result<EgoPose> {
        EgoPose::new(
            unflatten_rotation(&self.rotation),
            Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
            self.timestamp,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct CameraDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    image_size: (usize, usize),
}

impl CameraDoc {
    fn from_camera(c: &CameraModel) -> CameraDoc {
        CameraDoc {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: flatten_rotation(&c.rotation),
            translation: [c.translation.x, c.translation.y, c.translation.z],
            image_size: c.image_size,
        }
    }

    fn to_camera(&self) -> Result<CameraModel> {
        CameraModel::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            unflatten_rotation(&self.rotation),
            Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
            self.image_size,
        )
    }
}

fn flatten_rotation(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

fn unflatten_rotation(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}

#[derive(Serialize, Deserialize)]
struct FrameDoc {
    frame_id: u64,
    n_points: usize,
    ego: PoseDoc,
    cameras: Vec<CameraDoc>,
    boxes: Vec<BoxRecord>,
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    config: SceneConfig,
    frames: Vec<FrameDoc>,
}

/// Write a scene directory: `scene.json` plus per-frame point/image
/// tensors (see `docs/formats.md`).
pub fn save_scene(dir: &Path, cfg: &SceneConfig, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let doc = SceneDoc {
        config: cfg.clone(),
        frames: frames
            .iter()
            .map(|f| FrameDoc {
                frame_id: f.frame_id,
                n_points: f.points.len(),
                ego: PoseDoc::from_pose(&f.ego),
                cameras: f.cameras.iter().map(CameraDoc::from_camera).collect(),
                boxes: f
                    .gt_boxes
                    .iter()
                    .map(|b| BoxRecord::from_box(f.frame_id, b))
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::contract("save_scene", e.to_string()))?;
    let json_path = dir.join("scene.json");
    std::fs::write(&json_path, json + "\n")
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;

    for f in frames {
        if !f.points.is_empty() {
            let flat: Vec<f64> = f.points.iter().flatten().copied().collect();
            let t = Tensor::new(&[f.points.len(), 4], flat)?;
            save_tensor(&dir.join(format!("points_{:04}.bft1", f.frame_id)), &t)?;
        }
        save_tensor(&dir.join(format!("images_{:04}.bft1", f.frame_id)), &f.images)?;
    }
    Ok(())
}

/// Read a scene directory back.
pub fn load_scene(dir: &Path) -> Result<(SceneConfig, Vec<Frame>)> {
    let json_path = dir.join("scene.json");
    let text = std::fs::read_to_string(&json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let doc: SceneDoc =
        serde_json::from_str(&text).map_err(|e| Error::contract("load_scene", e.to_string()))?;

    let mut frames = Vec::with_capacity(doc.frames.len());
    for fd in &doc.frames {
        let points = if fd.n_points == 0 {
            Vec::new()
        } else {
            let t = load_tensor(&dir.join(format!("points_{:04}.bft1", fd.frame_id)))?;
            if t.rank() != 2 || t.shape()[1] != 4 || t.shape()[0] != fd.n_points {
                return Err(Error::contract(
                    "load_scene",
                    format!("point tensor shape {:?} does not match header", t.shape()),
                ));
            }
            t.to_vec()
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect()
        };
        let images = load_tensor(&dir.join(format!("images_{:04}.bft1", fd.frame_id)))?;
        frames.push(Frame {
            frame_id: fd.frame_id,
            points,
            images,
            cameras: fd
                .cameras
                .iter()
                .map(CameraDoc::to_camera)
                .collect::<Result<_>>()?,
            ego: fd.ego.to_pose()?,
            gt_boxes: fd
                .boxes
                .iter()
                .map(BoxRecord::to_box)
                .collect::<Result<_>>()?,
        });
    }
    Ok((doc.config, frames))
}
