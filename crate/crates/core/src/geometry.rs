//! Camera poses, intrinsics, Plücker ray maps and projective relative
//! attention (PRoPE).
//!
//! Conventions: poses are world-to-camera rigid transforms; cameras look down
//! their local `+z` axis with `x` right and `y` down. Intrinsics are expressed
//! in normalized image coordinates where both image axes span `[-1, 1]`.

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Default bound on the condition number of a projection matrix.
pub const DEFAULT_CONDITION_BOUND: f64 = 1e6;

/// World-to-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    m: Matrix4<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            m: Matrix4::identity(),
        }
    }

    pub fn from_rt(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose { m }
    }

    /// Validates rotation orthonormality, handedness and the last row.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        let pose = Pose { m };
        pose.validate(1e-6)?;
        Ok(pose)
    }

    /// Camera placed at `eye` looking at `target`, with `up` pointing roughly
    /// opposite to image `y`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::config("look_at: eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::config("look_at: up is parallel to the view direction"))?;
        let down = forward.cross(&right);
        // rows of R are the camera axes in world coordinates
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Ok(Pose::from_rt(r, -(r * eye)))
    }

    /// Pure translation of the world-to-camera map.
    pub fn translation_only(t: Vector3<f64>) -> Self {
        Pose::from_rt(Matrix3::identity(), t)
    }

    /// Uniformly random rotation with translation drawn from `[-scale, scale]^3`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Self {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let t = Vector3::from_fn(|_, _| rng.gen_range(-scale..=scale));
        Pose::from_rt(q.to_rotation_matrix().into_inner(), t)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.m.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera origin in world coordinates, `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        Pose::from_rt(rt, -(rt * self.translation()))
    }

    /// Matrix product `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose { m: self.m * other.m }
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > tol {
            return Err(Error::Numerical(format!("rotation not orthonormal (err {ortho:e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::Numerical(format!("rotation determinant {det}")));
        }
        let last = self.m.row(3);
        if (last - Vector4::new(0.0, 0.0, 0.0, 1.0).transpose()).abs().max() > tol {
            return Err(Error::Numerical("pose last row is not [0, 0, 0, 1]".into()));
        }
        Ok(())
    }

    /// Row-major 32-bit serialization.
    pub fn to_f32_array(&self) -> [f32; 16] {
        std::array::from_fn(|i| self.m[(i / 4, i % 4)] as f32)
    }

    pub fn from_f32_array(a: &[f32; 16]) -> Self {
        Pose {
            m: Matrix4::from_fn(|r, c| a[r * 4 + c] as f64),
        }
    }

    /// The pose rounded through its 32-bit serialization.
    pub fn quantized(&self) -> Self {
        Pose::from_f32_array(&self.to_f32_array())
    }
}

/// `g_i^{-1} g_j`.
pub fn relative_pose(g_i: &Pose, g_j: &Pose) -> Pose {
    g_i.inverse().compose(g_j)
}

/// Focal lengths and principal point in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// Square pinhole from a horizontal field of view in degrees.
    pub fn from_fov_degrees(fov: f64) -> Result<Self> {
        let f = 1.0 / (fov.to_radians() / 2.0).tan();
        Intrinsics::new(f, f, 0.0, 0.0)
    }

    pub fn unit() -> Self {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(-1.0..=1.0).contains(&self.cx) || !(-1.0..=1.0).contains(&self.cy) {
            return Err(Error::config(format!(
                "principal point ({}, {}) outside [-1, 1]",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Homogeneous embedding `[[fx,0,cx,0],[0,fy,cy,0],[0,0,1,0],[0,0,0,1]]`.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut k = Matrix4::identity();
        k[(0, 0)] = self.fx;
        k[(0, 2)] = self.cx;
        k[(1, 1)] = self.fy;
        k[(1, 2)] = self.cy;
        k
    }

    fn homogeneous_inverse(&self) -> Matrix4<f64> {
        let mut k = Matrix4::identity();
        k[(0, 0)] = 1.0 / self.fx;
        k[(0, 2)] = -self.cx / self.fx;
        k[(1, 1)] = 1.0 / self.fy;
        k[(1, 2)] = -self.cy / self.fy;
        k
    }

    pub fn to_f32_array(&self) -> [f32; 4] {
        [self.fx as f32, self.fy as f32, self.cx as f32, self.cy as f32]
    }

    pub fn from_f32_array(a: &[f32; 4]) -> Self {
        Intrinsics {
            fx: a[0] as f64,
            fy: a[1] as f64,
            cx: a[2] as f64,
            cy: a[3] as f64,
        }
    }

    pub fn quantized(&self) -> Self {
        Intrinsics::from_f32_array(&self.to_f32_array())
    }

    /// Camera-frame direction (unnormalized, `z = 1`) through a normalized
    /// image point.
    pub fn unproject(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }
}

/// Normalized coordinate of the center of pixel `i` out of `n`.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / n as f64 - 1.0
}

/// `P = K_hat * W` together with its inverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionMatrix {
    m: Matrix4<f64>,
    inv: Matrix4<f64>,
}

impl ProjectionMatrix {
    pub fn identity() -> Self {
        ProjectionMatrix {
            m: Matrix4::identity(),
            inv: Matrix4::identity(),
        }
    }

    /// Wraps an arbitrary invertible matrix, rejecting ones whose condition
    /// number exceeds `bound`.
    pub fn from_matrix(m: Matrix4<f64>, bound: f64) -> Result<Self> {
        let cond = condition_number(&m);
        if !cond.is_finite() || cond > bound {
            return Err(Error::Numerical(format!(
                "projection matrix condition number {cond:e} exceeds {bound:e}"
            )));
        }
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::Numerical("projection matrix is singular".into()))?;
        Ok(ProjectionMatrix { m, inv })
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn inverse(&self) -> &Matrix4<f64> {
        &self.inv
    }
}

pub fn condition_number(m: &Matrix4<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn projection_matrix(pose: &Pose, k: &Intrinsics) -> Result<ProjectionMatrix> {
    projection_matrix_bounded(pose, k, DEFAULT_CONDITION_BOUND)
}

pub fn projection_matrix_bounded(pose: &Pose, k: &Intrinsics, bound: f64) -> Result<ProjectionMatrix> {
    k.validate()?;
    let m = k.homogeneous() * pose.matrix();
    let cond = condition_number(&m);
    if !cond.is_finite() || cond > bound {
        return Err(Error::Numerical(format!(
            "projection matrix condition number {cond:e} exceeds {bound:e}"
        )));
    }
    let inv = pose.inverse().matrix() * k.homogeneous_inverse();
    Ok(ProjectionMatrix { m, inv })
}

/// Per-pixel Plücker coordinates `(d, o x d)`, laid out `[H][W][6]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerRayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PluckerRayMap {
    pub fn ray(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * 6;
        &self.data[i..i + 6]
    }
}

/// World-space rays through every pixel center of a camera.
pub fn plucker_ray_map(pose: &Pose, k: &Intrinsics, height: usize, width: usize) -> Result<PluckerRayMap> {
    k.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::config("ray map needs at least one pixel"));
    }
    let rt = pose.rotation().transpose();
    let origin = pose.camera_center();
    let mut data = Vec::with_capacity(height * width * 6);
    for y in 0..height {
        for x in 0..width {
            let d = (rt * k.unproject(pixel_center(x, width), pixel_center(y, height))).normalize();
            let m = origin.cross(&d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    Ok(PluckerRayMap {
        height,
        width,
        data,
    })
}

fn to_row_major<T: Scalar>(m: &Matrix4<f64>) -> [T; 16] {
    std::array::from_fn(|i| T::of(m[(i / 4, i % 4)]))
}

/// Applies `p` to every consecutive 4-channel group of `features [*, n, d]`.
pub fn rho_apply<T: Scalar>(features: &Tensor<T>, p: &Matrix4<f64>) -> Result<Tensor<T>> {
    let d = features.last_dim();
    if !d.is_multiple_of(4) {
        return Err(Error::config(format!("feature width {d} is not a multiple of 4")));
    }
    let mut out = features.clone();
    let m = to_row_major::<T>(p);
    for (src, dst) in features.data().chunks_exact(4).zip(out.data_mut().chunks_exact_mut(4)) {
        for r in 0..4 {
            dst[r] = (0..4).map(|c| m[r * 4 + c] * src[c]).sum();
        }
    }
    Ok(out)
}

/// Per-token camera frames prepared for the factored PRoPE transforms.
#[derive(Clone, Debug)]
pub struct TokenFrames<T> {
    /// `P` for each token.
    pub forward: Arc<[[T; 16]]>,
    /// `P^T` for each token.
    pub transpose: Arc<[[T; 16]]>,
    /// `P^{-1}` for each token.
    pub inverse: Arc<[[T; 16]]>,
}

impl<T: Scalar> TokenFrames<T> {
    pub fn new(per_token: &[ProjectionMatrix]) -> Self {
        TokenFrames {
            forward: per_token.iter().map(|p| to_row_major(p.matrix())).collect(),
            transpose: per_token
                .iter()
                .map(|p| to_row_major(&p.matrix().transpose()))
                .collect(),
            inverse: per_token.iter().map(|p| to_row_major(p.inverse())).collect(),
        }
    }

    /// Frames from raw matrices; a singular matrix is reported with its token index.
    pub fn from_matrices(per_token: &[Matrix4<f64>]) -> Result<Self> {
        let mut frames = Vec::with_capacity(per_token.len());
        for (i, m) in per_token.iter().enumerate() {
            let p = ProjectionMatrix::from_matrix(*m, f64::INFINITY).map_err(|_| {
                Error::Numerical(format!("singular projection matrix at token {i}"))
            })?;
            frames.push(p);
        }
        Ok(Self::new(&frames))
    }

    pub fn identity(tokens: usize) -> Self {
        Self::new(&vec![ProjectionMatrix::identity(); tokens])
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Frames for `[B, n_a + n_b]` tokens from per-batch blocks of `a` (`n_a`
    /// tokens each) followed by `b` (`n_b` tokens each).
    pub fn interleave(a: &Self, n_a: usize, b: &Self, n_b: usize) -> Self {
        let batch = a.len() / n_a;
        assert_eq!(batch * n_a, a.len());
        assert_eq!(batch * n_b, b.len());
        let join = |x: &Arc<[[T; 16]]>, y: &Arc<[[T; 16]]>| -> Arc<[[T; 16]]> {
            (0..batch)
                .flat_map(|i| {
                    x[i * n_a..(i + 1) * n_a]
                        .iter()
                        .chain(&y[i * n_b..(i + 1) * n_b])
                        .copied()
                })
                .collect()
        };
        TokenFrames {
            forward: join(&a.forward, &b.forward),
            transpose: join(&a.transpose, &b.transpose),
            inverse: join(&a.inverse, &b.inverse),
        }
    }

    /// Frames of the tokens at `index`.
    pub fn select(&self, index: &[usize]) -> Self {
        let pick = |x: &Arc<[[T; 16]]>| -> Arc<[[T; 16]]> { index.iter().map(|&i| x[i]).collect() };
        TokenFrames {
            forward: pick(&self.forward),
            transpose: pick(&self.transpose),
            inverse: pick(&self.inverse),
        }
    }
}

/// Factored projective relative attention.
///
/// Queries are mapped by `rho(P_i)^T`, keys and values by `rho(P_j)^{-1}`, and
/// the attended output by `rho(P_i)`, so logits are `q_i^T rho(P_i P_j^{-1}) k_j`
/// and the value path carries `rho(P_i P_j^{-1})`.
pub fn prope_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    q_frames: &TokenFrames<T>,
    kv_frames: &TokenFrames<T>,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(q)[tape.shape(q).len() - 1];
    if heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(4) {
        return Err(Error::config(format!(
            "PRoPE needs a head width divisible by 4 (width {d}, {heads} heads)"
        )));
    }
    let (k, v) = prope_keys_values(tape, k, v, kv_frames)?;
    prope_attention_prepared(tape, q, k, v, q_frames, heads)
}

/// Key/value half of [`prope_attention`]: `P^{-1} k` and `P^{-1} v`. It only
/// depends on the key tokens, so it can be computed once and cached.
pub fn prope_keys_values<T: Scalar>(tape: &mut Tape<T>, k: Var, v: Var, kv_frames: &TokenFrames<T>) -> Result<(Var, Var)> {
    Ok((
        tape.rho(k, kv_frames.inverse.clone())?,
        tape.rho(v, kv_frames.inverse.clone())?,
    ))
}

/// Query half of [`prope_attention`], given transformed keys and values.
pub fn prope_attention_prepared<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    q_frames: &TokenFrames<T>,
    heads: usize,
) -> Result<Var> {
    let q = tape.rho(q, q_frames.transpose.clone())?;
    let o = tape.attention(q, k, v, heads)?;
    tape.rho(o, q_frames.forward.clone())
}

/// Rotation about an axis, for building test and trajectory poses.
pub fn axis_rotation(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs(m: Matrix4<f64>) -> f64 {
        m.abs().max()
    }

    #[test]
    fn relative_pose_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Pose::random(&mut rng, 1.0);
        assert!(max_abs(relative_pose(&g, &g).matrix() - Matrix4::identity()) < 1e-12);
        assert!(max_abs(relative_pose(&Pose::identity(), &g).matrix() - g.matrix()) < 1e-15);
        for _ in 0..20 {
            let (a, b, c) = (
                Pose::random(&mut rng, 1.0),
                Pose::random(&mut rng, 1.0),
                Pose::random(&mut rng, 1.0),
            );
            let r = relative_pose(&a, &b);
            assert!(max_abs(a.compose(&r).matrix() - b.matrix()) < 1e-9);
            r.validate(1e-6).unwrap();
            let chain = relative_pose(&a, &b).compose(&relative_pose(&b, &c));
            assert!(max_abs(chain.matrix() - relative_pose(&a, &c).matrix()) < 1e-9);
        }
    }

    #[test]
    fn invalid_matrices_are_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        assert!(Pose::from_matrix(m).is_err());
        let mut m = Matrix4::identity();
        m[(3, 0)] = 0.5;
        assert!(Pose::from_matrix(m).is_err());
    }

    #[test]
    fn look_at_points_the_optical_axis_at_the_target() {
        let eye = Vector3::new(2.0, -1.0, 3.0);
        let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)).unwrap();
        pose.validate(1e-9).unwrap();
        assert!((pose.camera_center() - eye).norm() < 1e-12);
        let cam = pose.matrix() * Vector4::new(0.0, 0.0, 0.0, 1.0);
        assert!(cam.x.abs() < 1e-12 && cam.y.abs() < 1e-12 && cam.z > 0.0);
    }

    #[test]
    fn plucker_on_axis_rays() {
        let k = Intrinsics::unit();
        let map = plucker_ray_map(&Pose::identity(), &k, 3, 3).unwrap();
        let r = map.ray(1, 1);
        assert!(r[..3].iter().zip([0.0, 0.0, 1.0]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(r[3..].iter().all(|v| v.abs() < 1e-15));

        // camera centered at world (1, 0, 0): t = -R c = (-1, 0, 0)
        let shifted = Pose::translation_only(Vector3::new(-1.0, 0.0, 0.0));
        let map = plucker_ray_map(&shifted, &k, 1, 1).unwrap();
        let o = Vector3::new(1.0, 0.0, 0.0);
        let want_m = o.cross(&Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(want_m, Vector3::new(0.0, -1.0, 0.0));
        let r = map.ray(0, 0);
        assert!((r[2] - 1.0).abs() < 1e-15);
        assert!((Vector3::new(r[3], r[4], r[5]) - want_m).norm() < 1e-15);
    }

    #[test]
    fn plucker_identities_hold_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Intrinsics::new(1.3, 1.1, 0.1, -0.2).unwrap();
        for _ in 0..5 {
            let pose = Pose::random(&mut rng, 2.0);
            let map = plucker_ray_map(&pose, &k, 7, 5).unwrap();
            for ray in map.data.chunks(6) {
                let d = Vector3::new(ray[0], ray[1], ray[2]);
                let m = Vector3::new(ray[3], ray[4], ray[5]);
                assert!((d.norm() - 1.0).abs() < 1e-6);
                assert!(d.dot(&m).abs() < 1e-6);
            }
        }
        assert!(plucker_ray_map(&Pose::identity(), &Intrinsics { fx: 0.0, ..Intrinsics::unit() }, 2, 2).is_err());
    }

    #[test]
    fn projection_matrix_structure() {
        let p = projection_matrix(&Pose::identity(), &Intrinsics::unit()).unwrap();
        assert_eq!(*p.matrix(), Matrix4::identity());

        let k = Intrinsics::new(1.5, 1.2, 0.1, -0.3).unwrap();
        let t = Vector3::new(0.3, -0.2, 0.9);
        let p = projection_matrix(&Pose::translation_only(t), &k).unwrap();
        let kh = k.homogeneous();
        assert_eq!(p.matrix().fixed_view::<3, 3>(0, 0), kh.fixed_view::<3, 3>(0, 0));
        let col = kh * Vector4::new(t.x, t.y, t.z, 1.0);
        assert!((p.matrix().column(3) - col).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = projection_matrix(&Pose::random(&mut rng, 1.0), &k).unwrap();
            assert!(max_abs(p.matrix() * p.inverse() - Matrix4::identity()) < 1e-9);
        }
    }

    #[test]
    fn ill_conditioned_projection_is_rejected() {
        let k = Intrinsics::new(1e-4, 1e3, 0.0, 0.0).unwrap();
        assert!(matches!(
            projection_matrix(&Pose::identity(), &k),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn rho_apply_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::new(&[1, 2, 8], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(rho_apply(&x, &Matrix4::identity()).unwrap(), x);

        let p = projection_matrix(&Pose::random(&mut rng, 1.0), &Intrinsics::unit()).unwrap();
        let y = rho_apply(&x, p.matrix()).unwrap();
        let back = rho_apply(&y, p.inverse()).unwrap();
        assert!(x.max_rel_diff(&back, 1.0) < 1e-6);

        // two explicit 4x4 matrix-vector products per token
        for (tok_in, tok_out) in x.data().chunks(8).zip(y.data().chunks(8)) {
            for g in 0..2 {
                let v = Vector4::from_column_slice(&tok_in[4 * g..4 * g + 4]);
                let want = p.matrix() * v;
                for r in 0..4 {
                    assert!((tok_out[4 * g + r] - want[r]).abs() < 1e-12);
                }
            }
        }
        let bad = Tensor::<f64>::zeros(&[1, 6]);
        assert!(matches!(rho_apply(&bad, &Matrix4::identity()), Err(Error::Config(_))));
    }

    #[test]
    fn singular_frame_reports_token() {
        let mut mats = vec![Matrix4::identity(); 3];
        mats[2] = Matrix4::zeros();
        let err = TokenFrames::<f64>::from_matrices(&mats).unwrap_err();
        assert!(err.to_string().contains("token 2"));
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Per-pair reference: logits `q_i^T rho(P_i P_j^-1) k_j`, values
    /// `rho(P_i P_j^-1) v_j`, single batch element.
    fn brute_force(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, pq: &[ProjectionMatrix], pk: &[ProjectionMatrix], heads: usize) -> Vec<f64> {
        let d = q.last_dim();
        let (nq, nk) = (pq.len(), pk.len());
        let dh = d / heads;
        let mut out = vec![0.0; nq * d];
        for i in 0..nq {
            let rel: Vec<Matrix4<f64>> = (0..nk).map(|j| pq[i].matrix() * pk[j].inverse()).collect();
            let tk: Vec<Vec<f64>> = (0..nk)
                .map(|j| rho_apply(&Tensor::new(&[d], k.data()[j * d..(j + 1) * d].to_vec()).unwrap(), &rel[j]).unwrap().into_data())
                .collect();
            let tv: Vec<Vec<f64>> = (0..nk)
                .map(|j| rho_apply(&Tensor::new(&[d], v.data()[j * d..(j + 1) * d].to_vec()).unwrap(), &rel[j]).unwrap().into_data())
                .collect();
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = (0..nk)
                    .map(|j| {
                        q.data()[i * d..][r.clone()].iter().zip(&tk[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for j in 0..nk {
                    for c in r.clone() {
                        out[i * d + c] += w[j] / z * tv[j][c];
                    }
                }
            }
        }
        out
    }

    fn run_prope(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, pq: &[ProjectionMatrix], pk: &[ProjectionMatrix], heads: usize) -> Tensor<f64> {
        let mut tape = Tape::inference();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let o = prope_attention(&mut tape, qv, kv, vv, &TokenFrames::new(pq), &TokenFrames::new(pk), heads).unwrap();
        tape.value(o).clone()
    }

    fn random_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<ProjectionMatrix> {
        let k = Intrinsics::new(1.2, 0.9, 0.05, -0.1).unwrap();
        (0..n).map(|_| projection_matrix(&Pose::random(rng, 0.5), &k).unwrap()).collect()
    }

    #[test]
    fn factored_prope_matches_pairwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (nq, nk, d) = (3, 4, 8);
        let q = rand_tensor(&mut rng, &[1, nq, d]);
        let k = rand_tensor(&mut rng, &[1, nk, d]);
        let v = rand_tensor(&mut rng, &[1, nk, d]);
        let pq = random_frames(&mut rng, nq);
        let pk = random_frames(&mut rng, nk);
        let fast = run_prope(&q, &k, &v, &pq, &pk, 2);
        let slow = brute_force(&q, &k, &v, &pq, &pk, 2);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_frames_reduce_to_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_tensor(&mut rng, &[2, 3, 8]);
        let k = rand_tensor(&mut rng, &[2, 5, 8]);
        let v = rand_tensor(&mut rng, &[2, 5, 8]);
        let id = |n| vec![ProjectionMatrix::identity(); n];
        let a = run_prope(&q, &k, &v, &id(6), &id(10), 2);
        let mut tape = Tape::inference();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let o = tape.attention(qv, kv, vv, 2).unwrap();
        assert_eq!(&a, tape.value(o));
    }

    #[test]
    fn global_rigid_change_leaves_prope_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kin = Intrinsics::new(1.1, 1.1, 0.0, 0.0).unwrap();
        let poses: Vec<Pose> = (0..5).map(|_| Pose::random(&mut rng, 0.5)).collect();
        let g = Pose::random(&mut rng, 0.5);
        let frames = |ps: &[Pose]| -> Vec<ProjectionMatrix> { ps.iter().map(|p| projection_matrix(p, &kin).unwrap()).collect() };
        let moved: Vec<Pose> = poses.iter().map(|p| p.compose(&g)).collect();
        let q = rand_tensor(&mut rng, &[1, 2, 8]);
        let k = rand_tensor(&mut rng, &[1, 3, 8]);
        let v = rand_tensor(&mut rng, &[1, 3, 8]);
        let a = run_prope(&q, &k, &v, &frames(&poses[..2]), &frames(&poses[2..]), 1);
        let b = run_prope(&q, &k, &v, &frames(&moved[..2]), &frames(&moved[2..]), 1);
        assert!(a.max_rel_diff(&b, 1.0) < 1e-9);
    }

    #[test]
    fn prope_rejects_head_width_not_multiple_of_four() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(&[1, 2, 12]));
        let f = TokenFrames::identity(2);
        assert!(prope_attention(&mut tape, x, x, x, &f, &f, 2).is_err());
    }
}
