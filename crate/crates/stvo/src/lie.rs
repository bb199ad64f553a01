//! SE(3)/SO(3) group operations, the pinhole camera model, reprojection and
//! induced optical flow.
//!
//! Conventions (tested, since different codebases disagree):
//! - Poses are **world-to-camera**: a world point `X` lands in the camera
//!   frame as `g * X = R X + t`.
//! - Tangent vectors are ordered `(translation, rotation)`.
//! - Jacobians use the **left** perturbation `exp(xi) * g`.
//! - Rotations are stored as unit quaternions, canonicalized to `w >= 0` and
//!   renormalized after every composition.

use nalgebra::{Matrix2x6, Matrix3, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this angle (radians), exp/log switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Unit quaternion rotation, canonical `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Build from raw quaternion components; normalizes and canonicalizes.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        assert!(n > 0.0 && n.is_finite(), "quaternion must be nonzero and finite");
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Rotation { w: w * s, x: x * s, y: y * s, z: z * s }
    }

    pub fn quaternion(&self) -> (f64, f64, f64, f64) {
        (self.w, self.x, self.y, self.z)
    }

    /// Exponential map of so(3): axis-angle vector to rotation.
    pub fn exp(omega: Vector3<f64>) -> Self {
        let theta = omega.norm();
        let half = 0.5 * theta;
        // sin(theta/2)/theta, stable near zero
        let k = if theta < SMALL_ANGLE {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        Rotation::from_quaternion(half.cos(), k * omega.x, k * omega.y, k * omega.z)
    }

    /// Logarithm map: rotation to axis-angle vector.
    ///
    /// Fails with `AngleNearPi` within 1e-6 of the branch cut.
    pub fn log(&self) -> Result<Vector3<f64>> {
        let v = Vector3::new(self.x, self.y, self.z);
        let n = v.norm();
        let theta = 2.0 * n.atan2(self.w);
        if theta >= std::f64::consts::PI - 1e-6 {
            return Err(Error::AngleNearPi(theta));
        }
        let k = if n < SMALL_ANGLE {
            // theta/n -> 2/w * (1 - n^2/(3 w^2))
            2.0 / self.w * (1.0 - n * n / (3.0 * self.w * self.w))
        } else {
            theta / n
        };
        Ok(k * v)
    }

    pub fn angle(&self) -> f64 {
        2.0 * Vector3::new(self.x, self.y, self.z).norm().atan2(self.w)
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (other.w, other.x, other.y, other.z);
        Rotation::from_quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn rotate(&self, p: Vector3<f64>) -> Vector3<f64> {
        // q p q* expanded via the cross-product form
        let u = Vector3::new(self.x, self.y, self.z);
        let c = u.cross(&p);
        p + 2.0 * (self.w * c + u.cross(&c))
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let cols = [
            self.rotate(Vector3::x()),
            self.rotate(Vector3::y()),
            self.rotate(Vector3::z()),
        ];
        Matrix3::from_columns(&cols)
    }
}

/// SE(3) rigid transform (world-to-camera).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose { rotation: rinv, translation: -rinv.rotate(self.translation) }
    }

    pub fn transform(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
}

/// se(3) tangent vector, ordered (translation, rotation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tangent {
    pub translation: Vector3<f64>,
    pub rotation: Vector3<f64>,
}

impl Tangent {
    pub fn zero() -> Self {
        Tangent { translation: Vector3::zeros(), rotation: Vector3::zeros() }
    }

    pub fn from_vector(v: Vector6<f64>) -> Self {
        Tangent {
            translation: Vector3::new(v[0], v[1], v[2]),
            rotation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.translation.x,
            self.translation.y,
            self.translation.z,
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3): the V matrix coupling rotation into translation.
fn so3_left_jacobian(omega: Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let s = skew(omega);
    Matrix3::identity() + a * s + b * s * s
}

fn so3_left_jacobian_inverse(omega: Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    let s = skew(omega);
    Matrix3::identity() - 0.5 * s + c * s * s
}

/// SE(3) exponential map.
pub fn exp(xi: &Tangent) -> Pose {
    Pose {
        rotation: Rotation::exp(xi.rotation),
        translation: so3_left_jacobian(xi.rotation) * xi.translation,
    }
}

/// SE(3) logarithm map; inverse of [`exp`] away from the pi branch cut.
pub fn log(g: &Pose) -> Result<Tangent> {
    let omega = g.rotation.log()?;
    let v = so3_left_jacobian_inverse(omega) * g.translation;
    Ok(Tangent { translation: v, rotation: omega })
}

/// Pinhole camera intrinsics at 1/8 input resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::BadDimensions(format!("focal lengths must be positive: {fx}, {fy}")));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(Error::BadDimensions(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Camera { fx, fy, cx, cy, width, height })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Project a camera-frame point to pixel coordinates.
pub fn project(camera: &Camera, point_cam: Vector3<f64>) -> Result<Vector2<f64>> {
    if point_cam.z <= 1e-8 {
        return Err(Error::BehindCamera(point_cam.z));
    }
    Ok(Vector2::new(
        camera.fx * point_cam.x / point_cam.z + camera.cx,
        camera.fy * point_cam.y / point_cam.z + camera.cy,
    ))
}

/// Back-project pixel (u, v) at inverse depth `d` into the camera frame.
pub fn unproject(camera: &Camera, u: f64, v: f64, inv_depth: f64) -> Vector3<f64> {
    Vector3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0) / inv_depth
}

/// H x W raster of positive inverse depths.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl InverseDepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "inverse depth raster has {} entries for {width}x{height}",
                data.len()
            )));
        }
        if !data.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(Error::InvalidDepth("entries must be finite and positive".into()));
        }
        Ok(InverseDepthMap { width, height, data })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        InverseDepthMap::new(width, height, vec![value; width * height])
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Overwrite one entry; the caller is responsible for keeping it positive.
    pub fn set(&mut self, index: usize, value: f64) {
        debug_assert!(value.is_finite() && value > 0.0);
        self.data[index] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel 2D flow (u and v planes).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField { width, height, u: vec![0.0; width * height], v: vec![0.0; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn mean_magnitude(&self, mask: &Mask) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.u.len() {
            if mask.data[i] {
                sum += (self.u[i] * self.u[i] + self.v[i] * self.v[i]).sqrt();
                n += 1;
            }
        }
        if n == 0 { 0.0 } else { sum / n as f64 }
    }
}

/// Per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn all_true(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![true; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

/// Flow induced on frame i's pixels by reprojecting them into frame j through
/// the current poses and inverse depths. Pixels that land behind the camera
/// or out of frame are masked instead of erroring.
pub fn induced_flow(
    g_i: &Pose,
    g_j: &Pose,
    d_i: &InverseDepthMap,
    cam: &Camera,
) -> Result<(FlowField, Mask)> {
    if d_i.width != cam.width || d_i.height != cam.height {
        return Err(Error::ShapeMismatch(format!(
            "depth raster {}x{} vs camera {}x{}",
            d_i.width, d_i.height, cam.width, cam.height
        )));
    }
    let rel = g_j.compose(&g_i.inverse());
    let mut flow = FlowField::zeros(cam.width, cam.height);
    let mut mask = Mask::all_true(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let i = y * cam.width + x;
            let p = rel.transform(unproject(cam, x as f64, y as f64, d_i.at(x, y)));
            match project(cam, p) {
                Ok(q) => {
                    let in_frame = q.x >= 0.0
                        && q.x <= (cam.width - 1) as f64
                        && q.y >= 0.0
                        && q.y <= (cam.height - 1) as f64;
                    if in_frame {
                        flow.u[i] = q.x - x as f64;
                        flow.v[i] = q.y - y as f64;
                    } else {
                        mask.data[i] = false;
                    }
                }
                Err(_) => mask.data[i] = false,
            }
        }
    }
    Ok((flow, mask))
}

/// Analytic Jacobians of the reprojected pixel wrt left-multiplied tangent
/// perturbations of both poses and wrt the pixel's inverse depth.
pub fn reprojection_jacobians(
    g_i: &Pose,
    g_j: &Pose,
    d_i: &InverseDepthMap,
    cam: &Camera,
    px: usize,
    py: usize,
) -> Result<(Matrix2x6<f64>, Matrix2x6<f64>, Vector2<f64>)> {
    let rel = g_j.compose(&g_i.inverse());
    let d = d_i.at(px, py);
    let x_i = unproject(cam, px as f64, py as f64, d);
    let x_j = rel.transform(x_i);
    if x_j.z <= 1e-8 {
        return Err(Error::BehindCamera(x_j.z));
    }
    // d(project)/dX at X_j
    let iz = 1.0 / x_j.z;
    let proj_jac = nalgebra::Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * x_j.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * x_j.y * iz * iz,
    );
    let rot = rel.rotation.to_matrix();

    // Left perturbation of g_j: X_j' = exp(xi) X_j => dX/d(rho) = I, dX/d(phi) = -[X_j]x
    let mut jac_j = Matrix2x6::zeros();
    jac_j.fixed_view_mut::<2, 3>(0, 0).copy_from(&proj_jac);
    jac_j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(proj_jac * (-skew(x_j))));

    // Left perturbation of g_i: X_j' = rel * exp(-xi) X_i
    // => dX/d(rho) = -R, dX/d(phi) = R [X_i]x
    let mut jac_i = Matrix2x6::zeros();
    jac_i.fixed_view_mut::<2, 3>(0, 0).copy_from(&(proj_jac * (-rot)));
    jac_i.fixed_view_mut::<2, 3>(0, 3).copy_from(&(proj_jac * rot * skew(x_i)));

    // dX_i/dd = -ray/d^2 = -X_i/d
    let jac_d = proj_jac * (rot * (-x_i / d));

    Ok((jac_i, jac_j, jac_d))
}
