//! Pinhole projection and SE(3) pose chains.
//!
//! Pose `M_t` maps camera coordinates of frame `t` into the frame `t-1`
//! system. The cumulative product `M_1 ... M_t` therefore maps frame-`t`
//! camera coordinates into the world frame, which is the first camera when
//! `M_1` is the identity.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];
pub type Pixel = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub ox: f64,
    pub oy: f64,
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
}

impl CameraIntrinsics {
    /// EgoPAT3D RGB-D recordings, 3840x2160.
    pub const EGOPAT3D: CameraIntrinsics = CameraIntrinsics {
        fx: 1808.203,
        fy: 1807.946,
        ox: 1942.287,
        oy: 1123.822,
        width: 3840.0,
        height: 2160.0,
    };

    /// H2O egocentric camera, 1280x720.
    pub const H2O: CameraIntrinsics = CameraIntrinsics {
        fx: 636.659,
        fy: 636.252,
        ox: 635.284,
        oy: 366.874,
        width: 1280.0,
        height: 720.0,
    };

    pub fn new(fx: f64, fy: f64, ox: f64, oy: f64, width: f64, height: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            ox,
            oy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.fx, self.fy, self.ox, self.oy, self.width, self.height]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || self.fx <= 0.0 || self.fy <= 0.0 || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!("{self:?}")));
        }
        Ok(())
    }

    /// Intrinsics after resizing the image by `factor` (e.g. 0.25).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            ox: self.ox * factor,
            oy: self.oy * factor,
            width: self.width * factor,
            height: self.height * factor,
        }
    }
}

pub fn project(p: Point3, k: &CameraIntrinsics) -> Result<Pixel> {
    let [x, y, z] = p;
    if !(z > 0.0) {
        return Err(Error::BehindCamera(z));
    }
    Ok([k.fx * x / z + k.ox, k.fy * y / z + k.oy])
}

pub fn backproject(uv: Pixel, z: f64, k: &CameraIntrinsics) -> Result<Point3> {
    if !(z > 0.0) {
        return Err(Error::BehindCamera(z));
    }
    Ok([(uv[0] - k.ox) * z / k.fx, (uv[1] - k.oy) * z / k.fy, z])
}

/// Pixel coordinates relative to the frame size, so the frame spans `[0, 1]²`.
pub fn normalize_pixel(uv: Pixel, k: &CameraIntrinsics) -> Pixel {
    [uv[0] / k.width, uv[1] / k.height]
}

/// Rigid transform stored as a homogeneous 4x4 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose(Matrix4<f64>);

const ORTHONORMAL_TOL: f64 = 1e-6;

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    pub fn from_parts(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Pose(m)
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose(format!("bottom row {bottom:?}")));
        }
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let drift = orthonormality_error(&m.fixed_view::<3, 3>(0, 0).into_owned());
        if drift > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (error {drift:e})")));
        }
        Ok(Pose(m))
    }

    pub fn from_row_major(v: &[f64; 16]) -> Result<Self> {
        Self::from_matrix(Matrix4::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Inverse of a rigid transform: `[Rᵀ | -Rᵀt]`.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose(m)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let h = self.0 * Vector4::new(p[0], p[1], p[2], 1.0);
        [h[0], h[1], h[2]]
    }
}

/// Max entry of `|RᵀR - I|`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity())
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Per-frame poses `M_1..M_T` with cached cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseChain {
    poses: Vec<Pose>,
    // cumulative[t] = M_1 ... M_t, cumulative[0] = I
    cumulative: Vec<Pose>,
}

impl PoseChain {
    pub fn new(poses: Vec<Pose>) -> Self {
        let mut cumulative = Vec::with_capacity(poses.len() + 1);
        cumulative.push(Pose::identity());
        for m in &poses {
            let next = cumulative.last().expect("seeded with identity").compose(m);
            cumulative.push(next);
        }
        Self { poses, cumulative }
    }

    pub fn identity(len: usize) -> Self {
        Self::new(vec![Pose::identity(); len])
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// `M_1 ... M_t` for `0 <= t <= T`.
    pub fn cumulative(&self, t: usize) -> Result<&Pose> {
        self.cumulative.get(t).ok_or(Error::PoseIndex {
            step: t,
            len: self.len(),
        })
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::PoseIndex {
                step: t,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// Maps a frame-`t` camera point into world coordinates (`t` is 1-based).
    pub fn local_to_global(&self, p: Point3, t: usize) -> Result<Point3> {
        self.check_step(t)?;
        Ok(self.cumulative[t].apply(p))
    }

    pub fn global_to_local(&self, p: Point3, t: usize) -> Result<Point3> {
        self.check_step(t)?;
        Ok(self.cumulative[t].inverse().apply(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optical_axis_hits_principal_point() {
        let uv = project([0.0, 0.0, 1.0], &CameraIntrinsics::EGOPAT3D).unwrap();
        assert_eq!(uv, [1942.287, 1123.822]);
    }

    #[test]
    fn unit_camera_projection() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(project([1.0, 0.0, 1.0], &k).unwrap(), [1.0, 0.0]);
        assert!(matches!(project([0.0, 0.0, -1.0], &k), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn backproject_principal_point() {
        let k = CameraIntrinsics::H2O;
        assert_eq!(backproject([k.ox, k.oy], 2.0, &k).unwrap(), [0.0, 0.0, 2.0]);
        assert!(backproject([1.0, 1.0], 0.0, &k).is_err());
    }

    #[test]
    fn normalize_pixel_examples() {
        let k = CameraIntrinsics::H2O;
        assert_eq!(normalize_pixel([1280.0, 720.0], &k), [1.0, 1.0]);
        assert_eq!(normalize_pixel([0.0, 0.0], &k), [0.0, 0.0]);
        assert_eq!(normalize_pixel([640.0, 360.0], &k), [0.5, 0.5]);
    }

    #[test]
    fn intrinsics_validation_and_scaling() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1.0, -1.0).is_err());
        let s = CameraIntrinsics::EGOPAT3D.scaled(0.25);
        assert_eq!(s.width, 960.0);
        assert_eq!(s.fx, 1808.203 * 0.25);
    }

    #[test]
    fn identity_chain_is_a_no_op() {
        let chain = PoseChain::identity(4);
        let p = [0.1, -0.2, 0.7];
        assert_eq!(chain.local_to_global(p, 3).unwrap(), p);
        assert_eq!(chain.global_to_local(p, 4).unwrap(), p);
        assert!(chain.local_to_global(p, 0).is_err());
        assert!(chain.local_to_global(p, 5).is_err());
    }

    #[test]
    fn translations_compose() {
        let step = Pose::from_parts(&Rotation3::identity(), Vector3::new(0.0, 0.0, 0.1));
        let chain = PoseChain::new(vec![step, step]);
        let g = chain.local_to_global([0.0; 3], 2).unwrap();
        assert!((g[2] - 0.2).abs() < 1e-15 && g[0] == 0.0 && g[1] == 0.0);
        let l = chain.global_to_local([0.0; 3], 2).unwrap();
        assert!((l[2] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn pose_rejects_bad_matrices() {
        let mut rows = Pose::identity().to_row_major();
        rows[12] = 0.5;
        assert!(Pose::from_row_major(&rows).is_err());
        let mut rows = Pose::identity().to_row_major();
        rows[0] = 1.1;
        assert!(Pose::from_row_major(&rows).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let p = Pose::from_parts(&Rotation3::from_euler_angles(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let back = Pose::from_row_major(&p.to_row_major()).unwrap();
        assert_eq!(p, back);
        assert_eq!(p.to_row_major()[3], 1.0);
    }
}
