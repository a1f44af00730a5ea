//! SE(3) poses and point-level alignment of historical frames into the
//! current frame.

use nalgebra::{Matrix3, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Tolerance for the orthonormality and determinant checks on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal (max |R'R - I| = {max_dev:.3e})")]
    NotOrthonormal { max_dev: f64 },
    #[error("rotation matrix is not a proper rotation (det = {det})")]
    ImproperRotation { det: f64 },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("point/intensity length mismatch ({points} points, {intensities} intensities)")]
    LengthMismatch { points: usize, intensities: usize },
    #[error("intensity {value} outside [0, 1]")]
    IntensityRange { value: f32 },
}

/// A rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from an explicit rotation matrix, rejecting matrices
    /// that are not proper rotations within [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite { what: "pose" });
        }
        let gram = rotation.transpose() * rotation;
        let max_dev = (gram - Matrix3::identity())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if max_dev > ROTATION_TOL {
            return Err(GeometryError::NotOrthonormal { max_dev });
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::ImproperRotation { det });
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Rotation from intrinsic yaw (about z), pitch (about y), roll (about x).
    pub fn from_yaw_pitch_roll(
        yaw: f64,
        pitch: f64,
        roll: f64,
        translation: Vector3<f64>,
    ) -> Self {
        Pose {
            rotation: *nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw).matrix(),
            translation,
        }
    }

    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::from_yaw_pitch_roll(yaw, 0.0, 0.0, translation)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Heading of the rotated x-axis on the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

/// Applies `b` then `a`.
pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn pose_inverse(a: &Pose) -> Pose {
    let rt = a.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * a.translation),
    }
}

/// Transform taking coordinates of the historical frame into the current
/// frame, given the ego-to-world poses of both frames.
pub fn relative_pose(ego_hist: &Pose, ego_cur: &Pose) -> Pose {
    pose_compose(&pose_inverse(ego_cur), ego_hist)
}

/// Points with a scalar intensity each, stamped with the frame they were
/// captured in (0 = current, larger = further in the past).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub intensities: Vec<f32>,
    pub timestamp_index: u32,
}

impl PointCloud {
    pub fn new(
        points: Vec<Vector3<f64>>,
        intensities: Vec<f32>,
        timestamp_index: u32,
    ) -> Result<Self, GeometryError> {
        if points.len() != intensities.len() {
            return Err(GeometryError::LengthMismatch {
                points: points.len(),
                intensities: intensities.len(),
            });
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite {
                what: "point cloud",
            });
        }
        for &i in &intensities {
            if !(0.0..=1.0).contains(&i) {
                return Err(GeometryError::IntensityRange { value: i });
            }
        }
        Ok(PointCloud {
            points,
            intensities,
            timestamp_index,
        })
    }

    pub fn empty(timestamp_index: u32) -> Self {
        PointCloud {
            points: Vec::new(),
            intensities: Vec::new(),
            timestamp_index,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Maps every point through the pose; intensities and timestamp carry over.
pub fn transform_points(pose: &Pose, pts: &PointCloud) -> PointCloud {
    PointCloud {
        points: pts.points.iter().map(|p| pose.apply(p)).collect(),
        intensities: pts.intensities.clone(),
        timestamp_index: pts.timestamp_index,
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = self.rotation[(r, c)];
            }
        }
        PoseRepr {
            rotation,
            translation: [
                self.translation.x,
                self.translation.y,
                self.translation.z,
            ],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(deserializer)?;
        let rotation = Matrix3::from_fn(|r, c| repr.rotation[r * 3 + c]);
        let translation = Vector3::from_column_slice(&repr.translation);
        Pose::new(rotation, translation).map_err(D::Error::custom)
    }
}
