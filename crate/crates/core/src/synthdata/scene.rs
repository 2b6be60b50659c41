use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_matrix, Intrinsics, Pose};
use crate::tensor::Tensor;

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: V3, b: V3, s: f64) -> V3 {
    [a[0] + b[0] * s, a[1] + b[1] * s, a[2] + b[2] * s]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded multi-octave value noise in world coordinates, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    /// Cycles per unit length of the coarsest octave.
    pub frequency: f64,
    pub octaves: u32,
}

impl Texture {
    fn lattice(&self, octave: u32, i: i64, j: i64, k: i64) -> f64 {
        let mut h = splitmix(self.seed ^ (octave as u64).wrapping_mul(0x632b_e59b_d9b4_e019));
        for c in [i, j, k] {
            h = splitmix(h ^ c as u64);
        }
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn octave(&self, octave: u32, p: V3) -> f64 {
        let cell = p.map(f64::floor);
        let fade = [0, 1, 2].map(|a| {
            let t = p[a] - cell[a];
            t * t * (3.0 - 2.0 * t)
        });
        let base = cell.map(|c| c as i64);
        let mut v = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if o[a] == 1 { fade[a] } else { 1.0 - fade[a] };
            }
            v += w * self.lattice(octave, base[0] + o[0] as i64, base[1] + o[1] as i64, base[2] + o[2] as i64);
        }
        v
    }

    pub fn sample(&self, p: V3) -> f64 {
        let (mut total, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, self.frequency);
        for o in 0..self.octaves.max(1) {
            total += amp * self.octave(o, p.map(|c| c * freq));
            norm += amp;
            amp *= 0.75;
            freq *= 2.0;
        }
        // stretch the sum, which concentrates around 0.5, back towards [0, 1]
        (0.5 + 2.2 * (total / norm - 0.5)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Plane through `center` with unit `normal`; bounded to a rectangle
    /// spanned by `axes` when `half` is set.
    Plane {
        center: V3,
        normal: V3,
        half: Option<[f64; 2]>,
    },
    Sphere {
        center: V3,
        radius: f64,
    },
    /// Box rotated by `yaw` about the vertical axis.
    Cuboid {
        center: V3,
        half: V3,
        yaw: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: V3,
    pub texture: Texture,
}

/// Nearest intersection: ray parameter and outward normal.
fn intersect(shape: &Shape, o: V3, d: V3) -> Option<(f64, V3)> {
    const EPS: f64 = 1e-9;
    match shape {
        Shape::Plane { center, normal, half } => {
            let den = dot(*normal, d);
            if den.abs() < EPS {
                return None;
            }
            let s = dot(*normal, sub(*center, o)) / den;
            if s <= EPS {
                return None;
            }
            if let Some(h) = half {
                let (a, b) = plane_axes(*normal);
                let q = sub(add_scaled(o, d, s), *center);
                if dot(q, a).abs() > h[0] || dot(q, b).abs() > h[1] {
                    return None;
                }
            }
            let n = if den > 0.0 { normal.map(|c| -c) } else { *normal };
            Some((s, n))
        }
        Shape::Sphere { center, radius } => {
            let oc = sub(o, *center);
            let (a, b, c) = (dot(d, d), dot(oc, d), dot(oc, oc) - radius * radius);
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let r = disc.sqrt();
            let s = [(-b - r) / a, (-b + r) / a].into_iter().find(|&s| s > EPS)?;
            let p = add_scaled(o, d, s);
            Some((s, normalize(sub(p, *center))))
        }
        Shape::Cuboid { center, half, yaw } => {
            let r = rotation_matrix([0.0, *yaw, 0.0]);
            // world to box frame is R^T
            let to_box = |v: V3| [0, 1, 2].map(|i| r[0][i] * v[0] + r[1][i] * v[1] + r[2][i] * v[2]);
            let (ob, db) = (to_box(sub(o, *center)), to_box(d));
            let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0usize);
            for a in 0..3 {
                if db[a].abs() < EPS {
                    if ob[a].abs() > half[a] {
                        return None;
                    }
                    continue;
                }
                let (mut lo, mut hi) = ((-half[a] - ob[a]) / db[a], (half[a] - ob[a]) / db[a]);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                if lo > t0 {
                    t0 = lo;
                    axis = a;
                }
                t1 = t1.min(hi);
            }
            if t0 > t1 || t0 <= EPS {
                return None;
            }
            let mut nb = [0.0; 3];
            nb[axis] = -db[axis].signum();
            let n = [0, 1, 2].map(|i| r[i][0] * nb[0] + r[i][1] * nb[1] + r[i][2] * nb[2]);
            Some((t0, n))
        }
    }
}

/// Two unit vectors spanning the plane with normal `n`.
fn plane_axes(n: V3) -> (V3, V3) {
    let helper = if n[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let a = normalize(cross(helper, n));
    (a, cross(n, a))
}

/// Primitives in the world frame (the target camera frame: x right, y down,
/// z forward) in front of a textured backdrop at `background_depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub background_depth: f64,
    pub background: Texture,
    /// Unit direction towards the light.
    pub light: V3,
}

/// Rendered view: RGB in `[0, 1]` (`H x W x 3`) and z-depth (`H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Tensor<f32>,
    pub depth: Tensor<f32>,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }
}

const AMBIENT: f64 = 0.35;
/// Colour samples per pixel along each axis.
pub const SUPERSAMPLE: usize = 3;

impl Scene {
    /// Empty scene: the backdrop only.
    pub fn backdrop(depth: f64, seed: u64) -> Self {
        Self {
            primitives: Vec::new(),
            background_depth: depth,
            background: Texture {
                seed,
                frequency: 3.0 / depth,
                octaves: 4,
            },
            light: normalize([-0.4, -1.0, -0.5]),
        }
    }

    pub fn with(mut self, shape: Shape, albedo: V3, texture: Texture) -> Self {
        self.primitives.push(Primitive { shape, albedo, texture });
        self
    }

    /// Random street-like layout: ground plane, a few spheres, boxes and
    /// panels.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut scene = Self::backdrop(rng.random_range(35.0..60.0), rng.random());
        let tex = |rng: &mut R, near: f64| Texture {
            seed: rng.random(),
            frequency: 3.0 / near,
            octaves: 4,
        };
        let albedo = |rng: &mut R| [0, 1, 2].map(|_| rng.random_range(0.55..1.0));
        let ground = rng.random_range(1.2..2.0);
        let t = tex(rng, 4.0);
        let a = albedo(rng);
        scene = scene.with(
            Shape::Plane {
                center: [0.0, ground, 0.0],
                normal: [0.0, -1.0, 0.0],
                half: None,
            },
            a,
            t,
        );
        for _ in 0..rng.random_range(1..=3) {
            let radius: f64 = rng.random_range(0.8..2.0);
            let z = rng.random_range(9.0..25.0);
            let center = [rng.random_range(-0.35 * z..0.35 * z), ground - radius, z];
            let (t, a) = (tex(rng, z - radius), albedo(rng));
            scene = scene.with(Shape::Sphere { center, radius }, a, t);
        }
        for _ in 0..rng.random_range(0..=2) {
            let half = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
            let z = rng.random_range(10.0..28.0);
            let center = [rng.random_range(-0.35 * z..0.35 * z), ground - half[1], z];
            let (t, a) = (tex(rng, z - 2.0 * half[2]), albedo(rng));
            let yaw = rng.random_range(-0.6..0.6);
            scene = scene.with(Shape::Cuboid { center, half, yaw }, a, t);
        }
        if rng.random_bool(0.5) {
            let z = rng.random_range(14.0..30.0);
            let tilt: f64 = rng.random_range(-0.5..0.5);
            let center = [rng.random_range(-0.3 * z..0.3 * z), ground - 2.5, z];
            let normal = [tilt.sin(), 0.0, -tilt.cos()];
            let (t, a) = (tex(rng, z - 3.0), albedo(rng));
            scene = scene.with(
                Shape::Plane {
                    center,
                    normal,
                    half: Some([rng.random_range(1.5..3.0), 2.4]),
                },
                a,
                t,
            );
        }
        scene
    }

    /// Colour and depth seen along the ray of pixel `(u, v)` from a camera
    /// whose camera-to-world motion is `cam`.
    fn shade(&self, cam: &Pose, r: &[[f64; 3]; 3], k: &Intrinsics, u: f64, v: f64) -> (V3, f64) {
        let ray = k.ray(u, v);
        // unit-z camera ray: the ray parameter is the camera-frame depth
        let d = [0, 1, 2].map(|i| r[i][0] * ray[0] + r[i][1] * ray[1] + r[i][2] * ray[2]);
        let o = cam.translation;
        let mut best: Option<(f64, V3, &Primitive)> = None;
        for p in &self.primitives {
            if let Some((s, n)) = intersect(&p.shape, o, d) {
                if best.is_none_or(|b| s < b.0) {
                    best = Some((s, n, p));
                }
            }
        }
        let back = if d[2] > 1e-9 {
            Some((self.background_depth - o[2]) / d[2]).filter(|&s| s > 0.0)
        } else {
            None
        };
        match (best, back) {
            (Some((s, n, p)), b) if b.is_none_or(|b| s < b) => {
                let x = add_scaled(o, d, s);
                let lambert = AMBIENT + (1.0 - AMBIENT) * dot(n, self.light).max(0.0);
                let t = 0.15 + 0.85 * p.texture.sample(x);
                (p.albedo.map(|a| (a * t * lambert).clamp(0.0, 1.0)), s)
            }
            (_, Some(s)) => {
                let x = add_scaled(o, d, s);
                let t = 0.15 + 0.85 * self.background.sample(x);
                let lambert = AMBIENT + (1.0 - AMBIENT) * (-self.light[2]).max(0.0);
                ([0.8, 0.85, 0.95].map(|a| (a * t * lambert).clamp(0.0, 1.0)), s)
            }
            _ => ([AMBIENT; 3], self.background_depth),
        }
    }

    /// Ray-casts one view. Colour averages a `SUPERSAMPLE x SUPERSAMPLE`
    /// grid inside each pixel; depth is taken at the pixel centre.
    pub fn render(&self, cam: &Pose, k: &Intrinsics, height: usize, width: usize) -> Frame {
        let r = cam.rotation();
        let n = SUPERSAMPLE;
        let offsets: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 - 0.5).collect();
        let mut image = Vec::with_capacity(height * width * 3);
        let mut depth = Vec::with_capacity(height * width);
        for v in 0..height {
            for u in 0..width {
                let (u, v) = (u as f64, v as f64);
                let mut acc = [0.0; 3];
                for &dv in &offsets {
                    for &du in &offsets {
                        let (c, _) = self.shade(cam, &r, k, u + du, v + dv);
                        for i in 0..3 {
                            acc[i] += c[i];
                        }
                    }
                }
                image.extend(acc.map(|x| (x / (n * n) as f64) as f32));
                depth.push(self.shade(cam, &r, k, u, v).1 as f32);
            }
        }
        Frame {
            image: Tensor::from_fn([height, width, 3], |i| image[i]),
            depth: Tensor::from_fn([height, width], |i| depth[i]),
        }
    }
}
