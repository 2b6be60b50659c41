//! Pinhole cameras, rigid motion, back-projection, inverse warping and
//! surface normals.
//!
//! Pixel `(u, v)` is column `u`, row `v`, with `(0, 0)` at the centre of the
//! top-left pixel. Camera axes: x right, y down, z forward.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SparseMap, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Points at or closer than this depth are not projected.
pub const Z_MIN: f64 = 1e-3;
/// Floor applied to vector lengths before normalizing.
pub const NORM_EPS: f64 = 1e-8;

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Config(format!("invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Principal point at the image centre.
    pub fn centered(width: usize, height: usize, fx: f64, fy: f64) -> Result<Self> {
        Self::new(fx, fy, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    }

    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn inverse(&self) -> Mat3 {
        [
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Ray direction `K^-1 (u, v, 1)` of a pixel, with unit z.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Pixel of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }
}

/// Rigid motion as axis-angle rotation (radians) plus translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

fn mat3_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn transpose3(a: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [a[0][i], a[1][i], a[2][i]])
}

/// Coefficients `(sin t / t, (1 - cos t) / t^2)` with a series near zero.
fn rodrigues_coeffs(theta2: f64) -> (f64, f64) {
    if theta2 < 1e-8 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let t = theta2.sqrt();
        (t.sin() / t, (1.0 - t.cos()) / theta2)
    }
}

/// `exp` of the skew matrix of `w`.
pub fn rotation_matrix(w: [f64; 3]) -> Mat3 {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = rodrigues_coeffs(theta2);
    let k = [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]];
    let k2 = mat3_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Axis-angle vector of a rotation matrix.
pub fn rotation_log(r: &Mat3) -> [f64; 3] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let vee = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if theta < 1e-6 {
        return vee.map(|v| 0.5 * v);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // axis from the largest diagonal entry of (R + I) / 2
        let i = (0..3)
            .max_by(|&a, &b| r[a][a].total_cmp(&r[b][b]))
            .unwrap_or(0);
        let mut axis = [0.0; 3];
        axis[i] = ((r[i][i] + 1.0) / 2.0).max(0.0).sqrt();
        for j in 0..3 {
            if j != i {
                axis[j] = (r[i][j] + r[j][i]) / (4.0 * axis[i]);
            }
        }
        return axis.map(|a| a * theta);
    }
    let s = theta / (2.0 * theta.sin());
    vee.map(|v| v * s)
}

impl Pose {
    pub fn new(axis_angle: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            axis_angle,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn rotation(&self) -> Mat3 {
        rotation_matrix(self.axis_angle)
    }

    /// Homogeneous `[R t; 0 1]`.
    pub fn to_matrix(&self) -> Mat4 {
        let r = self.rotation();
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_rt(r: &Mat3, t: [f64; 3]) -> Self {
        Self::new(rotation_log(r), t)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = mat3_vec(&self.rotation(), p);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose3(&self.rotation());
        let t = mat3_vec(&rt, self.translation).map(|v| -v);
        Self::from_rt(&rt, t)
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        let r = mat3_mul(&self.rotation(), &other.rotation());
        let t = self.apply(other.translation);
        Self::from_rt(&r, t)
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (a, t) = (self.axis_angle, self.translation);
        [a[0], a[1], a[2], t[0], t[1], t[2]]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }
}

/// Rotation (`3 x 3`) and translation (`1 x 3`) of a pose held as a
/// 6-vector `(axis-angle, translation)` on the graph.
pub fn pose_to_rt<T: Scalar>(g: &mut Graph<T>, pose: Var) -> Result<(Var, Var)> {
    let (delta, t) = pose_delta(g, pose)?;
    let eye = g.constant(Tensor::eye(3));
    Ok((g.add(eye, delta)?, t))
}

/// `R - I` and the translation; the first is exactly zero for a zero rotation.
fn pose_delta<T: Scalar>(g: &mut Graph<T>, pose: Var) -> Result<(Var, Var)> {
    if g.value(pose).numel() != 6 {
        return Err(Error::shape("pose", g.shape(pose), &[6]));
    }
    let pose = g.reshape(pose, [6])?;
    let w = g.narrow(pose, 0, 0, 3)?;
    let t = g.narrow(pose, 0, 3, 3)?;
    let t = g.reshape(t, [1, 3])?;
    let w2 = g.square(w);
    let theta2 = g.sum(w2);
    let th2 = g.value(theta2).item()?.to_f64().unwrap_or(0.0);
    let (a, b) = if th2 < 1e-8 {
        (
            g.affine(theta2, lit(-1.0 / 6.0), T::one()),
            g.affine(theta2, lit(-1.0 / 24.0), lit(0.5)),
        )
    } else {
        let theta = g.sqrt(theta2);
        let s = g.sin(theta);
        let c = g.cos(theta);
        let a = g.div(s, theta)?;
        let one_minus = g.affine(c, -T::one(), T::one());
        (a, g.div(one_minus, theta2)?)
    };
    // skew matrix [[0, -z, y], [z, 0, -x], [-y, x, 0]]
    let mut sk = SparseMap::builder(vec![3, 3], 3);
    let entries: [&[(usize, f64)]; 9] = [
        &[],
        &[(2, -1.0)],
        &[(1, 1.0)],
        &[(2, 1.0)],
        &[],
        &[(0, -1.0)],
        &[(1, -1.0)],
        &[(0, 1.0)],
        &[],
    ];
    for row in entries {
        for &(i, s) in row {
            sk.push(i, lit(s));
        }
        sk.end_row();
    }
    let k = g.sparse(w, sk.finish())?;
    let k2 = g.matmul(k, k)?;
    let ak = g.mul(a, k)?;
    let bk2 = g.mul(b, k2)?;
    Ok((g.add(ak, bk2)?, t))
}

/// Unit-depth rays `K^-1 (u, v, 1)` for every pixel, `H x W x 3`.
pub fn ray_grid<T: Scalar>(h: usize, w: usize, k: &Intrinsics) -> Tensor<T> {
    Tensor::from_fn([h, w, 3], |i| {
        let p = i / 3;
        lit(k.ray((p % w) as f64, (p / w) as f64)[i % 3])
    })
}

/// Pixel-centre grid `H x W x 2` of `(u, v)` pairs.
pub fn pixel_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn([h, w, 2], |i| {
        let p = i / 2;
        lit(if i % 2 == 0 { (p % w) as f64 } else { (p / w) as f64 })
    })
}

/// Camera-frame points `H x W x 3` with a mask of pixels whose depth is positive.
#[derive(Clone, Debug)]
pub struct PointCloud<T> {
    pub points: Var,
    pub mask: Tensor<T>,
}

/// `P(u, v) = depth(u, v) K^-1 (u, v, 1)`.
pub fn backproject<T: Scalar>(g: &mut Graph<T>, depth: Var, k: &Intrinsics) -> Result<PointCloud<T>> {
    let s = g.shape(depth).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("backproject", &s, &[2]));
    }
    let (h, w) = (s[0], s[1]);
    let mask = g.value(depth).map(|d| if d > T::zero() { T::one() } else { T::zero() });
    let d = g.reshape(depth, [h, w, 1])?;
    let rays = g.constant(ray_grid(h, w, k));
    let points = g.mul(d, rays)?;
    Ok(PointCloud { points, mask })
}

/// Pixel coordinates of camera-frame points (`H x W x 3`) and the mask of
/// points in front of the camera.
pub fn project<T: Scalar>(g: &mut Graph<T>, points: Var, k: &Intrinsics) -> Result<(Var, Tensor<T>)> {
    let s = g.shape(points).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("project", &s, &[3]));
    }
    let (h, w) = (s[0], s[1]);
    let x = g.narrow(points, 2, 0, 1)?;
    let y = g.narrow(points, 2, 1, 1)?;
    let z = g.narrow(points, 2, 2, 1)?;
    let zmin: T = lit(Z_MIN);
    let valid = Tensor::new([h, w], g.value(z).data().iter().map(|&v| if v > zmin { T::one() } else { T::zero() }).collect())?;
    let zc = g.clamp(z, zmin, T::infinity());
    let xn = g.div(x, zc)?;
    let yn = g.div(y, zc)?;
    let u = g.affine(xn, lit(k.fx), lit(k.cx));
    let v = g.affine(yn, lit(k.fy), lit(k.cy));
    let coords = g.concat(&[u, v], 2)?;
    Ok((coords, valid))
}

/// Applies `p -> R p + t` to an `H x W x 3` point map.
pub fn transform_points<T: Scalar>(g: &mut Graph<T>, points: Var, r: Var, t: Var) -> Result<Var> {
    let s = g.shape(points).to_vec();
    let flat = g.reshape(points, [s[0] * s[1], 3])?;
    let rotated = g.matmul_t(flat, r, false, true)?;
    let moved = g.add(rotated, t)?;
    g.reshape(moved, s)
}

/// Where each target pixel lands in the reference view:
/// `p_r ~ K E D(p_t) K^-1 p_t`. Returns coordinates `H x W x 2` and the mask
/// of pixels with positive depth that stay in front of the reference camera.
///
/// Computed as the source pixel plus a displacement so that the identity
/// motion reproduces the pixel grid exactly.
pub fn warp_coords<T: Scalar>(
    g: &mut Graph<T>,
    depth: Var,
    pose: Var,
    k: &Intrinsics,
) -> Result<(Var, Tensor<T>)> {
    let cloud = backproject(g, depth, k)?;
    let s = g.shape(cloud.points).to_vec();
    let (h, w) = (s[0], s[1]);
    let (delta, t) = pose_delta(g, pose)?;
    // camera-frame displacement G = (R - I) P + t
    let flat = g.reshape(cloud.points, [h * w, 3])?;
    let rotated = g.matmul_t(flat, delta, false, true)?;
    let disp = g.add(rotated, t)?;
    let gx = g.narrow(disp, 1, 0, 1)?;
    let gy = g.narrow(disp, 1, 1, 1)?;
    let gz = g.narrow(disp, 1, 2, 1)?;
    let d = g.reshape(depth, [h * w, 1])?;
    let z = g.add(d, gz)?;
    let zmin: T = lit(Z_MIN);
    let mask = Tensor::new(
        [h, w],
        g.value(z)
            .data()
            .iter()
            .zip(cloud.mask.data())
            .map(|(&v, &m)| if v > zmin { m } else { T::zero() })
            .collect(),
    )?;
    let zc = g.clamp(z, zmin, T::infinity());
    // numerator f G_x - (u - c) G_z, per axis
    let grid = pixel_grid::<T>(h, w);
    let offsets = |axis: usize, c: f64| {
        Tensor::from_fn([h * w, 1], |p| grid.data()[2 * p + axis] - lit::<T>(c))
    };
    let du = g.constant(offsets(0, k.cx));
    let dv = g.constant(offsets(1, k.cy));
    let fxg = g.scale(gx, lit(k.fx));
    let ugz = g.mul(du, gz)?;
    let nu = g.sub(fxg, ugz)?;
    let fyg = g.scale(gy, lit(k.fy));
    let vgz = g.mul(dv, gz)?;
    let nv = g.sub(fyg, vgz)?;
    let num = g.concat(&[nu, nv], 1)?;
    let shift = g.div(num, zc)?;
    let base = g.constant(grid.reshape([h * w, 2])?);
    let coords = g.add(base, shift)?;
    let coords = g.reshape(coords, [h, w, 2])?;
    Ok((coords, mask))
}

/// Neighbour offsets `(dy, dx)` in cyclic order E, NE, N, NW, W, SW, S, SE.
pub const NEIGHBOURS: [(isize, isize); 8] = [
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Unit surface normals `H x W x 3` from a point map.
///
/// Each interior pixel averages the cross products of cyclically adjacent
/// neighbour vectors, normalizes, and orients the result towards the camera.
/// Boundary pixels, pixels with an invalid neighbourhood and degenerate
/// normals are zero and masked out.
pub fn estimate_normals<T: Scalar>(g: &mut Graph<T>, cloud: &PointCloud<T>) -> Result<(Var, Tensor<T>)> {
    let s = g.shape(cloud.points).to_vec();
    if s.len() != 3 || s[2] != 3 || s[0] < 3 || s[1] < 3 {
        return Err(Error::shape("estimate_normals", &s, &[3, 3, 3]));
    }
    let (h, w) = (s[0], s[1]);
    let (hi, wi) = (h - 2, w - 2);
    let shifted = |g: &mut Graph<T>, dy: isize, dx: isize| -> Result<Var> {
        let rows = g.narrow(cloud.points, 0, (1 + dy) as usize, hi)?;
        g.narrow(rows, 1, (1 + dx) as usize, wi)
    };
    let centre = shifted(g, 0, 0)?;
    let mut vecs = Vec::with_capacity(8);
    for (dy, dx) in NEIGHBOURS {
        let nb = shifted(g, dy, dx)?;
        vecs.push(g.sub(nb, centre)?);
    }
    let mut sum = g.cross3(vecs[0], vecs[1])?;
    for i in 1..8 {
        let c = g.cross3(vecs[i], vecs[(i + 1) % 8])?;
        sum = g.add(sum, c)?;
    }
    let mean = g.scale(sum, lit(0.125));
    let len = g.norm_last(mean)?;
    let eps: T = lit(NORM_EPS);
    let len_v = g.value(len).data().to_vec();
    let safe = g.clamp(len, eps, T::infinity());
    let safe = g.reshape(safe, [hi, wi, 1])?;
    let unit = g.div(mean, safe)?;

    // orientation and validity are decided on values only
    let uv = g.value(unit).data().to_vec();
    let cv = g.value(centre).data().to_vec();
    let mut sign = vec![T::one(); hi * wi];
    let mut mask = vec![T::zero(); h * w];
    for y in 0..hi {
        for x in 0..wi {
            let p = y * wi + x;
            let n = &uv[3 * p..3 * p + 3];
            let c = &cv[3 * p..3 * p + 3];
            if n[0] * c[0] + n[1] * c[1] + n[2] * c[2] > T::zero() {
                sign[p] = -T::one();
            }
            let neighbourhood_ok = (0..3).all(|dy| (0..3).all(|dx| cloud.mask.data()[(y + dy) * w + x + dx] > T::zero()));
            if neighbourhood_ok && len_v[p] > eps {
                mask[(y + 1) * w + x + 1] = T::one();
            }
        }
    }
    let sign = g.constant(Tensor::new([hi, wi, 1], sign)?);
    let oriented = g.mul(unit, sign)?;
    let index: Vec<Option<usize>> = (0..h * w * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            let (y, x) = (p / w, p % w);
            (y >= 1 && y <= hi && x >= 1 && x <= wi).then(|| ((y - 1) * wi + x - 1) * 3 + c)
        })
        .collect();
    let full = g.gather(oriented, &index, [h, w, 3])?;
    Ok((full, Tensor::new([h, w], mask)?))
}

/// `1 - cos^2` of the angle between paired vectors over the trailing axis,
/// with the norm product floored at [`NORM_EPS`]; result clamped to `[0, 1]`.
pub fn sine_distance<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s != g.shape(b) || s.is_empty() {
        return Err(Error::shape("sine_distance", &s, g.shape(b)));
    }
    let last = s.len() - 1;
    let ab = g.mul(a, b)?;
    let dot = g.sum_axis(ab, last, false)?;
    let na = g.norm_last(a)?;
    let nb = g.norm_last(b)?;
    let prod = g.mul(na, nb)?;
    let prod = g.clamp(prod, lit(NORM_EPS), T::infinity());
    let cos = g.div(dot, prod)?;
    let cos2 = g.square(cos);
    let sine = g.affine(cos2, -T::one(), T::one());
    Ok(g.clamp(sine, T::zero(), T::one()))
}
