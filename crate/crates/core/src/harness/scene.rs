//! Deterministic synthetic driving scenes: a constant-turn-rate ego, static
//! landmarks, constant-velocity movers, box-surface lidar returns with
//! Gaussian noise, and a blurred box-occupancy raster standing in for the
//! image branch.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::{read_bevf, write_bevf, FeatureMap, GridConfig};
use crate::geometry::{pose_inverse, PointCloud, Pose};
use crate::pipeline::{BoxParams, GtObject};

use super::HarnessError;

pub const CLASS_LANDMARK: usize = 0;
pub const CLASS_MOVER: usize = 1;
pub const NUM_CLASSES: usize = 2;

/// Scene recipe; every derived quantity is a pure function of this and the
/// grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_static_landmarks: usize,
    pub num_movers: usize,
    /// Uniform speed range for movers, m/s.
    pub mover_speed_range: [f64; 2],
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    pub frame_dt: f64,
    pub num_frames: usize,
    pub lidar_points_per_object: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_static_landmarks: 4,
            num_movers: 4,
            mover_speed_range: [0.8, 2.0],
            ego_speed: 3.0,
            ego_yaw_rate: 0.08,
            frame_dt: 0.25,
            num_frames: 6,
            lidar_points_per_object: 10,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.frame_dt > 0.0) {
            return Err(HarnessError::Config("frame_dt must be > 0".into()));
        }
        if self.num_frames == 0 {
            return Err(HarnessError::Config("num_frames must be >= 1".into()));
        }
        if self.mover_speed_range[0] > self.mover_speed_range[1] {
            return Err(HarnessError::Config("mover_speed_range is inverted".into()));
        }
        Ok(())
    }
}

/// Everything observed at one timestamp, in that frame's ego coordinates,
/// plus the ego-to-world pose and the in-grid ground truth.
#[derive(Debug, Clone)]
pub struct FrameSample {
    pub cloud: PointCloud,
    pub semantic: FeatureMap,
    pub ego: Pose,
    pub gt: Vec<GtObject>,
}

struct SceneObject {
    class_id: usize,
    start: Vector2<f64>,
    vel: Vector2<f64>,
    width: f64,
    length: f64,
    yaw: f64,
    base_intensity: f64,
    points: usize,
}

impl SceneObject {
    fn center_at(&self, t: f64) -> Vector2<f64> {
        self.start + self.vel * t
    }
}

/// Ego-to-world pose on a constant-turn-rate arc starting at the origin
/// facing +x.
pub fn ego_pose_at(cfg: &SceneConfig, frame: usize) -> Pose {
    let t = frame as f64 * cfg.frame_dt;
    let (v, w) = (cfg.ego_speed, cfg.ego_yaw_rate);
    let (x, y) = if w.abs() < 1e-12 {
        (v * t, 0.0)
    } else {
        ((v / w) * (w * t).sin(), (v / w) * (1.0 - (w * t).cos()))
    };
    Pose::from_yaw(w * t, Vector3::new(x, y, 0.0))
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    a
}

fn inside_box(local: Vector2<f64>, length: f64, width: f64) -> bool {
    local.x.abs() <= length / 2.0 && local.y.abs() <= width / 2.0
}

/// Renders per-class box occupancy on the grid (ego coordinates) and blurs
/// it with a normalized 3x3 kernel.
pub fn render_semantic_bev(
    gt: &[GtObject],
    grid: &GridConfig,
    frame_offset: u32,
) -> FeatureMap {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut occ = vec![0.0f64; NUM_CLASSES * rows * cols];
    for obj in gt {
        let (sin_y, cos_y) = obj.box_params.yaw.sin_cos();
        for r in 0..rows {
            for c in 0..cols {
                let [wx, wy] = grid.grid_to_world([c as f64, r as f64]);
                let dx = wx - obj.box_params.x;
                let dy = wy - obj.box_params.y;
                // into the box frame (length along heading)
                let local = Vector2::new(cos_y * dx + sin_y * dy, -sin_y * dx + cos_y * dy);
                if inside_box(local, obj.box_params.l, obj.box_params.w) {
                    occ[(obj.class_id * rows + r) * cols + c] = 1.0;
                }
            }
        }
    }
    // separable [1, 2, 1]/4 blur per axis, zero padded
    let kernel = [0.25, 0.5, 0.25];
    let mut blurred = vec![0.0f64; occ.len()];
    for class in 0..NUM_CLASSES {
        let plane = &occ[class * rows * cols..(class + 1) * rows * cols];
        let mut horiz = vec![0.0f64; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let cc = c as i64 + j as i64 - 1;
                    if cc >= 0 && cc < cols as i64 {
                        acc += k * plane[r * cols + cc as usize];
                    }
                }
                horiz[r * cols + c] = acc;
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let rr = r as i64 + j as i64 - 1;
                    if rr >= 0 && rr < rows as i64 {
                        acc += k * horiz[rr as usize * cols + c];
                    }
                }
                blurred[(class * rows + r) * cols + c] = acc;
            }
        }
    }
    FeatureMap::from_data(grid, NUM_CLASSES, frame_offset, blurred)
        .expect("blurred occupancy is finite")
}

/// Generates the frame sequence for one scene, deterministic in the seed.
///
/// Landmarks are larger and return twice the configured points per object;
/// movers are smaller and sparser, so temporal evidence matters most for
/// them. Ground truth per frame keeps only objects inside the grid extents.
pub fn generate_sequence(
    cfg: &SceneConfig,
    grid: &GridConfig,
) -> Result<Vec<FrameSample>, HarnessError> {
    cfg.validate()?;
    grid.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();

    // objects live around the trajectory midpoint
    let mid = ego_pose_at(cfg, (cfg.num_frames - 1) / 2);
    let spread = 0.7 * (grid.x_max - grid.x_min) / 2.0;
    let mut objects = Vec::new();
    for _ in 0..cfg.num_static_landmarks {
        objects.push(SceneObject {
            class_id: CLASS_LANDMARK,
            start: Vector2::new(
                mid.translation().x + rng.gen_range(-spread..spread),
                mid.translation().y + rng.gen_range(-spread..spread),
            ),
            vel: Vector2::zeros(),
            width: rng.gen_range(1.8..3.0),
            length: rng.gen_range(2.2..4.0),
            yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            base_intensity: 0.75,
            points: cfg.lidar_points_per_object * 2,
        });
    }
    for _ in 0..cfg.num_movers {
        let speed = rng.gen_range(cfg.mover_speed_range[0]..=cfg.mover_speed_range[1]);
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        objects.push(SceneObject {
            class_id: CLASS_MOVER,
            start: Vector2::new(
                mid.translation().x + rng.gen_range(-spread..spread),
                mid.translation().y + rng.gen_range(-spread..spread),
            ),
            vel: Vector2::new(speed * heading.cos(), speed * heading.sin()),
            width: rng.gen_range(1.0..1.8),
            length: rng.gen_range(1.6..2.6),
            yaw: heading,
            base_intensity: 0.35,
            points: cfg.lidar_points_per_object,
        });
    }

    let mut frames = Vec::with_capacity(cfg.num_frames);
    for frame in 0..cfg.num_frames {
        let t = frame as f64 * cfg.frame_dt;
        let ego = ego_pose_at(cfg, frame);
        let world_to_ego = pose_inverse(&ego);
        let ego_yaw = ego.yaw();

        let mut gt = Vec::new();
        let mut points = Vec::new();
        let mut intensities = Vec::new();
        for obj in &objects {
            let center_world = obj.center_at(t);
            let center_ego = world_to_ego.apply(&Vector3::new(
                center_world.x,
                center_world.y,
                0.0,
            ));
            let in_grid = center_ego.x >= grid.x_min
                && center_ego.x < grid.x_max
                && center_ego.y >= grid.y_min
                && center_ego.y < grid.y_max;
            if in_grid {
                gt.push(GtObject {
                    class_id: obj.class_id,
                    box_params: BoxParams {
                        x: center_ego.x,
                        y: center_ego.y,
                        w: obj.width,
                        l: obj.length,
                        yaw: wrap_angle(obj.yaw - ego_yaw),
                    },
                    vel: [obj.vel.x, obj.vel.y],
                });
            }

            // surface returns along the box perimeter, world frame
            let (sin_y, cos_y) = obj.yaw.sin_cos();
            let (hl, hw) = (obj.length / 2.0, obj.width / 2.0);
            let (l, w) = (obj.length, obj.width);
            for _ in 0..obj.points {
                let u = rng.gen_range(0.0..2.0 * (l + w));
                let local = if u < l {
                    Vector2::new(u - hl, -hw)
                } else if u < l + w {
                    Vector2::new(hl, (u - l) - hw)
                } else if u < 2.0 * l + w {
                    Vector2::new(hl - (u - l - w), hw)
                } else {
                    Vector2::new(-hl, hw - (u - 2.0 * l - w))
                };
                let world = Vector2::new(
                    center_world.x + cos_y * local.x - sin_y * local.y,
                    center_world.y + sin_y * local.x + cos_y * local.y,
                );
                let z = rng.gen_range(0.1..1.5);
                let mut jitter = [0.0; 3];
                if cfg.noise_sigma > 0.0 {
                    for j in jitter.iter_mut() {
                        *j = noise.sample(&mut rng);
                    }
                }
                let noisy =
                    Vector3::new(world.x + jitter[0], world.y + jitter[1], z + jitter[2]);
                points.push(world_to_ego.apply(&noisy));
                let intensity =
                    (obj.base_intensity + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
                intensities.push(intensity as f32);
            }
        }

        let semantic = render_semantic_bev(&gt, grid, 0);
        let cloud = PointCloud::new(points, intensities, 0).map_err(HarnessError::Geometry)?;
        frames.push(FrameSample {
            cloud,
            semantic,
            ego,
            gt,
        });
    }
    Ok(frames)
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    config: SceneConfig,
    grid: GridConfig,
}

#[derive(Serialize, Deserialize)]
struct PointsSidecar {
    frame: usize,
    count: usize,
    fields: Vec<String>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct GtLine {
    frame: usize,
    class: usize,
    #[serde(rename = "box")]
    box_params: [f64; 5],
    vel: [f64; 2],
}

/// Persists a sequence as a directory: poses.json, per-frame point blobs
/// with JSON sidecars, per-frame semantic `.bevf` maps, gt.jsonl, and
/// scene.json describing the recipe.
pub fn write_scene_dir(
    dir: &Path,
    cfg: &SceneConfig,
    grid: &GridConfig,
    frames: &[FrameSample],
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let meta = SceneMeta {
        config: cfg.clone(),
        grid: *grid,
    };
    std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta)?)?;

    let poses: Vec<&Pose> = frames.iter().map(|f| &f.ego).collect();
    std::fs::write(dir.join("poses.json"), serde_json::to_string_pretty(&poses)?)?;

    let mut gt_file = BufWriter::new(std::fs::File::create(dir.join("gt.jsonl"))?);
    for (idx, frame) in frames.iter().enumerate() {
        let mut blob = BufWriter::new(std::fs::File::create(
            dir.join(format!("points_{idx:03}.bin")),
        )?);
        for (p, &i) in frame.cloud.points.iter().zip(&frame.cloud.intensities) {
            for v in [p.x as f32, p.y as f32, p.z as f32, i] {
                blob.write_all(&v.to_le_bytes())?;
            }
        }
        blob.flush()?;
        let sidecar = PointsSidecar {
            frame: idx,
            count: frame.cloud.len(),
            fields: ["x", "y", "z", "intensity"].map(String::from).to_vec(),
            dtype: "f32".into(),
        };
        std::fs::write(
            dir.join(format!("points_{idx:03}.json")),
            serde_json::to_string(&sidecar)?,
        )?;
        write_bevf(&frame.semantic, &dir.join(format!("semantic_{idx:03}.bevf")))?;
        for obj in &frame.gt {
            let line = GtLine {
                frame: idx,
                class: obj.class_id,
                box_params: [
                    obj.box_params.x,
                    obj.box_params.y,
                    obj.box_params.w,
                    obj.box_params.l,
                    obj.box_params.yaw,
                ],
                vel: obj.vel,
            };
            writeln!(gt_file, "{}", serde_json::to_string(&line)?)?;
        }
    }
    gt_file.flush()?;
    Ok(())
}

/// Loads a directory written by [`write_scene_dir`].
pub fn read_scene_dir(
    dir: &Path,
) -> Result<(SceneConfig, GridConfig, Vec<FrameSample>), HarnessError> {
    let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("scene.json"))?)?;
    let poses: Vec<Pose> = serde_json::from_str(&std::fs::read_to_string(dir.join("poses.json"))?)?;

    let mut gt_by_frame: Vec<Vec<GtObject>> = vec![Vec::new(); poses.len()];
    for line in std::fs::read_to_string(dir.join("gt.jsonl"))?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GtLine = serde_json::from_str(line)?;
        gt_by_frame[parsed.frame].push(GtObject {
            class_id: parsed.class,
            box_params: BoxParams {
                x: parsed.box_params[0],
                y: parsed.box_params[1],
                w: parsed.box_params[2],
                l: parsed.box_params[3],
                yaw: parsed.box_params[4],
            },
            vel: parsed.vel,
        });
    }

    let mut frames = Vec::with_capacity(poses.len());
    for (idx, ego) in poses.into_iter().enumerate() {
        let sidecar: PointsSidecar = serde_json::from_str(&std::fs::read_to_string(
            dir.join(format!("points_{idx:03}.json")),
        )?)?;
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(format!("points_{idx:03}.bin")))?
            .read_to_end(&mut bytes)?;
        if bytes.len() != sidecar.count * 16 {
            return Err(HarnessError::Config(format!(
                "points_{idx:03}.bin holds {} bytes, sidecar says {} points",
                bytes.len(),
                sidecar.count
            )));
        }
        let mut points = Vec::with_capacity(sidecar.count);
        let mut intensities = Vec::with_capacity(sidecar.count);
        for quad in bytes.chunks_exact(16) {
            let f = |o: usize| {
                f32::from_le_bytes([quad[o], quad[o + 1], quad[o + 2], quad[o + 3]]) as f64
            };
            points.push(Vector3::new(f(0), f(4), f(8)));
            intensities.push(f32::from_le_bytes([quad[12], quad[13], quad[14], quad[15]]));
        }
        let semantic = read_bevf(&dir.join(format!("semantic_{idx:03}.bevf")))?;
        frames.push(FrameSample {
            cloud: PointCloud::new(points, intensities, 0).map_err(HarnessError::Geometry)?,
            semantic,
            ego,
            gt: std::mem::take(&mut gt_by_frame[idx]),
        });
    }
    Ok((meta.config, meta.grid, frames))
}
