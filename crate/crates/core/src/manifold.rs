//! Rigid-pose geometry on SO(3) x R^3.
//!
//! Poses follow geodesic flow trajectories: rotation along the SO(3)
//! geodesic through exp/log maps, translation along the straight line.
//! Tangent vectors for rotations use the body-frame convention
//! `target = base * Exp(hat(u))`, i.e. `u = vee(Log(base^T * target))`,
//! which makes geodesics and velocity targets invariant to a global
//! rotation applied to both endpoints.
//!
//! All trigonometric work happens at f64 internally regardless of the
//! scalar parameter; results are cast back to `S` at the boundary.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::scalar::{s, Scalar};

/// Angle threshold below which exp/log switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;
/// Rotations with `trace <= -1 + CUT_LOCUS_TRACE_MARGIN` are rejected by the
/// log map; the axis is numerically unstable that close to angle pi.
const CUT_LOCUS_TRACE_MARGIN: f64 = 1e-3;
/// Flow targets divide by `1 - t`; times at or above `1 - FLOW_TIME_MARGIN`
/// are rejected.
const FLOW_TIME_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    /// Relative rotation is within `1e-3` of the cut locus (angle pi), where
    /// the log map's axis is ill-conditioned.
    #[error("rotation too close to the cut locus (trace {trace:.6}); log map is ill-conditioned")]
    CutLocus { trace: f64 },
    /// `flow_targets` requires `0 <= t < 1 - 1e-4`.
    #[error("flow time {t} outside [0, 1 - 1e-4)")]
    TimeOutOfRange { t: f64 },
    /// The point sets do not determine a unique rotation.
    #[error("degenerate geometry for rigid fit: {reason}")]
    DegenerateGeometry { reason: &'static str },
}

/// 3x3 rotation matrix, kept orthonormal with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation<S: Scalar>(Matrix3<S>);

impl<S: Scalar> Rotation<S> {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix the caller guarantees to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<S>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<S> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Self) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<S>) -> Vector3<S> {
        self.0 * v
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn angle(&self) -> S {
        let tr = self.widen().trace();
        s(((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos())
    }

    pub fn rot_x(angle: S) -> Self {
        let (sn, cs) = angle.widen().sin_cos();
        Rotation(
            Matrix3::new(1.0, 0.0, 0.0, 0.0, cs, -sn, 0.0, sn, cs).map(S::narrow),
        )
    }

    pub fn rot_y(angle: S) -> Self {
        let (sn, cs) = angle.widen().sin_cos();
        Rotation(
            Matrix3::new(cs, 0.0, sn, 0.0, 1.0, 0.0, -sn, 0.0, cs).map(S::narrow),
        )
    }

    pub fn rot_z(angle: S) -> Self {
        let (sn, cs) = angle.widen().sin_cos();
        Rotation(
            Matrix3::new(cs, -sn, 0.0, sn, cs, 0.0, 0.0, 0.0, 1.0).map(S::narrow),
        )
    }

    /// Row-major flattening, the layout the pose embedding consumes.
    pub fn to_row9(&self) -> [S; 9] {
        let m = &self.0;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    fn widen(&self) -> Matrix3<f64> {
        self.0.map(|x| x.widen())
    }

    fn from_f64_mat(m: Matrix3<f64>) -> Self {
        Rotation(m.map(S::narrow))
    }

    /// Largest absolute deviation from orthonormality, for diagnostics.
    pub fn orthonormality_defect(&self) -> f64 {
        let m = self.widen();
        let d = m.transpose() * m - Matrix3::identity();
        d.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    /// Unit quaternion `(w, x, y, z)` of this rotation.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.widen());
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        [q.w, q.i, q.j, q.k]
    }
}

/// Rigid pose: rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseState<S: Scalar> {
    pub rot: Rotation<S>,
    pub trans: Vector3<S>,
}

impl<S: Scalar> PoseState<S> {
    pub fn identity() -> Self {
        PoseState { rot: Rotation::identity(), trans: Vector3::zeros() }
    }

    pub fn new(rot: Rotation<S>, trans: Vector3<S>) -> Self {
        PoseState { rot, trans }
    }

    /// Applies the pose to a point: `rot * p + trans`.
    pub fn apply(&self, p: &Vector3<S>) -> Vector3<S> {
        self.rot.apply(p) + self.trans
    }

    /// Row-major rotation followed by translation, 12 numbers.
    pub fn to_row12(&self) -> [S; 12] {
        let r = self.rot.to_row9();
        [
            r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8],
            self.trans.x, self.trans.y, self.trans.z,
        ]
    }

    /// Inverse of [`to_row12`]. Rejects non-finite entries and rotation
    /// blocks that are not orthonormal to within `1e-6`.
    pub fn from_row12(row: &[S; 12]) -> Option<Self> {
        if row.iter().any(|x| !x.widen().is_finite()) {
            return None;
        }
        let rot = Rotation(Matrix3::new(
            row[0], row[1], row[2],
            row[3], row[4], row[5],
            row[6], row[7], row[8],
        ));
        if rot.orthonormality_defect() > 1e-6 {
            return None;
        }
        Some(PoseState { rot, trans: Vector3::new(row[9], row[10], row[11]) })
    }
}

/// Instantaneous pose velocity: body-frame rotational part plus translational part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTarget<S: Scalar> {
    pub rot_vel: Vector3<S>,
    pub trans_vel: Vector3<S>,
}

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        // sin(t)/t and (1-cos(t))/t^2 to O(t^4)
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(w);
    Matrix3::identity() + k * a + k * k * b
}

fn log_matrix(r: &Matrix3<f64>) -> Result<Vector3<f64>, ManifoldError> {
    let trace = r.trace();
    if trace <= -1.0 + CUT_LOCUS_TRACE_MARGIN {
        return Err(ManifoldError::CutLocus { trace });
    }
    let cos_theta = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let factor = if theta < SMALL_ANGLE {
        // theta / (2 sin(theta)) to O(theta^4)
        0.5 + theta * theta / 12.0
    } else {
        theta / (2.0 * theta.sin())
    };
    Ok(skew * factor)
}

/// Exponential map at `base`: returns `base * Exp(hat(tangent))`.
pub fn so3_exp<S: Scalar>(tangent: &Vector3<S>, base: &Rotation<S>) -> Rotation<S> {
    let w = tangent.map(|x| x.widen());
    Rotation::from_f64_mat(base.widen() * rodrigues(&w))
}

/// Logarithm map at `base`: the tangent `u` with `target = base * Exp(hat(u))`.
///
/// Fails with [`ManifoldError::CutLocus`] when the relative rotation's trace
/// is within `1e-3` of -1 (angle within ~0.032 rad of pi).
pub fn so3_log<S: Scalar>(
    target: &Rotation<S>,
    base: &Rotation<S>,
) -> Result<Vector3<S>, ManifoldError> {
    let rel = base.widen().transpose() * target.widen();
    Ok(log_matrix(&rel)?.map(S::narrow))
}

/// Point at parameter `t` on the geodesic from `pose0` (t=0) to `pose1` (t=1):
/// rotation along the SO(3) geodesic, translation along the straight line.
pub fn geodesic_interp<S: Scalar>(
    pose0: &PoseState<S>,
    pose1: &PoseState<S>,
    t: S,
) -> Result<PoseState<S>, ManifoldError> {
    let u = so3_log(&pose1.rot, &pose0.rot)?;
    let tf = t.widen();
    let rot = so3_exp(&(u * t), &pose0.rot);
    let trans = pose0.trans.map(|x| s::<S>(x.widen() * (1.0 - tf)))
        + pose1.trans.map(|x| s::<S>(x.widen() * tf));
    Ok(PoseState { rot, trans })
}

/// Velocity targets that carry `pose_t` to `pose1` along the geodesic:
/// `u = log_{r_t}(r_1) / (1 - t)` and `v = (a_1 - a_t) / (1 - t)`.
///
/// Fails with [`ManifoldError::TimeOutOfRange`] unless `0 <= t < 1 - 1e-4`.
pub fn flow_targets<S: Scalar>(
    pose_t: &PoseState<S>,
    pose1: &PoseState<S>,
    t: S,
) -> Result<FlowTarget<S>, ManifoldError> {
    let tf = t.widen();
    if !(0.0..1.0 - FLOW_TIME_MARGIN).contains(&tf) {
        return Err(ManifoldError::TimeOutOfRange { t: tf });
    }
    let inv = 1.0 / (1.0 - tf);
    let u = so3_log(&pose1.rot, &pose_t.rot)?;
    let dv = pose1.trans - pose_t.trans;
    Ok(FlowTarget {
        rot_vel: u.map(|x| s(x.widen() * inv)),
        trans_vel: dv.map(|x| s(x.widen() * inv)),
    })
}

/// One explicit Euler step: rotation via the exponential map, translation linearly.
pub fn euler_step_pose<S: Scalar>(
    pose: &PoseState<S>,
    target: &FlowTarget<S>,
    dt: S,
) -> PoseState<S> {
    PoseState {
        rot: so3_exp(&(target.rot_vel * dt), &pose.rot),
        trans: pose.trans + target.trans_vel * dt,
    }
}

/// Least-squares rigid transform `(R, t)` with `dst ~ R * src + t`, via SVD of
/// the cross-covariance with reflection correction.
///
/// Fails with [`ManifoldError::DegenerateGeometry`] for fewer than 3 points,
/// mismatched lengths, or point sets (near-)collinear enough that the rotation
/// is not unique.
pub fn rigid_fit<S: Scalar>(
    src: &[Vector3<S>],
    dst: &[Vector3<S>],
) -> Result<(Rotation<S>, Vector3<S>), ManifoldError> {
    if src.len() != dst.len() {
        return Err(ManifoldError::DegenerateGeometry { reason: "point count mismatch" });
    }
    if src.len() < 3 {
        return Err(ManifoldError::DegenerateGeometry { reason: "fewer than 3 points" });
    }
    let n = src.len() as f64;
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for (a, b) in src.iter().zip(dst) {
        cs += a.map(|x| x.widen());
        cd += b.map(|x| x.widen());
    }
    cs /= n;
    cd /= n;
    let mut h = Matrix3::<f64>::zeros();
    for (a, b) in src.iter().zip(dst) {
        let pa = a.map(|x| x.widen()) - cs;
        let pb = b.map(|x| x.widen()) - cd;
        h += pb * pa.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(ManifoldError::DegenerateGeometry { reason: "SVD failed" }),
    };
    // Collinear sets leave two singular values ~0 and the in-plane rotation free.
    let sv = svd.singular_values;
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(ManifoldError::DegenerateGeometry { reason: "points are (near-)collinear" });
    }
    let d = (u * v_t).determinant();
    let mut sign = Matrix3::identity();
    sign[(2, 2)] = if d < 0.0 { -1.0 } else { 1.0 };
    let r = u * sign * v_t;
    let t = cd - r * cs;
    Ok((Rotation::from_f64_mat(r), t.map(S::narrow)))
}

/// Haar-uniform random rotation, via a uniform unit quaternion.
pub fn sample_uniform_rotation<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Rotation<S> {
    loop {
        let q: [f64; 4] = [
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
        ];
        let n2 = q.iter().map(|x| x * x).sum::<f64>();
        if n2 < 1e-12 {
            continue;
        }
        let n = n2.sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let m = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        return Rotation::from_f64_mat(m);
    }
}
