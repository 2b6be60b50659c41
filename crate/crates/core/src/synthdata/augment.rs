use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, Sequence};
use crate::geometry::{Intrinsics, Pose};
use crate::tensor::Tensor;

/// Ranges of the photometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Chance that a sequence is jittered at all.
    pub probability: f64,
    pub flip_probability: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.1,
            probability: 0.5,
            flip_probability: 0.5,
        }
    }
}

/// One draw of jitter factors, shared by all frames of a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation in turns.
    pub hue: f64,
}

impl ColorJitter {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }

    /// `None` when this sequence is left untouched.
    pub fn sample<R: Rng + ?Sized>(cfg: &JitterConfig, rng: &mut R) -> Option<Self> {
        if !rng.random_bool(cfg.probability.clamp(0.0, 1.0)) {
            return None;
        }
        let mut factor = |r: f64| 1.0 + rng.random_range(-r..=r);
        let (brightness, contrast, saturation) = (factor(cfg.brightness), factor(cfg.contrast), factor(cfg.saturation));
        Some(Self {
            brightness,
            contrast,
            saturation,
            hue: rng.random_range(-cfg.hue..=cfg.hue),
        })
    }
}

const YIQ: [[f64; 3]; 3] = [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]];

fn gray(p: [f64; 3]) -> f64 {
    YIQ[0][0] * p[0] + YIQ[0][1] * p[1] + YIQ[0][2] * p[2]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn inverse3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    std::array::from_fn(|i| std::array::from_fn(|j| c(j, i) / det))
}

/// Brightness, contrast, saturation, then hue, clamped to `[0, 1]`.
pub fn jitter_image(image: &Tensor<f32>, j: &ColorJitter) -> Tensor<f32> {
    let px: Vec<[f64; 3]> = image
        .data()
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64].map(|v| (v * j.brightness).clamp(0.0, 1.0)))
        .collect();
    let mean = px.iter().map(|&p| gray(p)).sum::<f64>() / px.len().max(1) as f64;
    let (s, c) = ((j.hue * std::f64::consts::TAU).sin(), (j.hue * std::f64::consts::TAU).cos());
    let back = inverse3(&YIQ);
    let out: Vec<f32> = px
        .into_iter()
        .flat_map(|p| {
            let p = p.map(|v| (mean + (v - mean) * j.contrast).clamp(0.0, 1.0));
            let g = gray(p);
            let p = p.map(|v| (g + (v - g) * j.saturation).clamp(0.0, 1.0));
            if j.hue == 0.0 {
                return p.map(|v| v as f32);
            }
            // rotate chroma in YIQ
            let [y, i, q] = mat_vec(&YIQ, p);
            mat_vec(&back, [y, c * i - s * q, s * i + c * q]).map(|v| v.clamp(0.0, 1.0) as f32)
        })
        .collect();
    Tensor::from_fn(image.shape().to_vec(), |i| out[i])
}

fn flip_rows<T: crate::scalar::Scalar>(t: &Tensor<T>, w: usize, c: usize) -> Vec<T> {
    let d = t.data();
    (0..d.len())
        .map(|i| {
            let (pix, ch) = (i / c, i % c);
            let (y, x) = (pix / w, pix % w);
            d[(y * w + (w - 1 - x)) * c + ch]
        })
        .collect()
}

fn flip_frame(f: &Frame) -> Frame {
    let (h, w) = (f.height(), f.width());
    let image = flip_rows(&f.image, w, 3);
    let depth = flip_rows(&f.depth, w, 1);
    Frame {
        image: Tensor::from_fn([h, w, 3], |i| image[i]),
        depth: Tensor::from_fn([h, w], |i| depth[i]),
    }
}

/// Mirrors every frame left to right, with the matching camera and motion.
pub fn flip_sequence(seq: &Sequence) -> Sequence {
    let w = seq.width() as f64;
    let k = Intrinsics {
        cx: w - 1.0 - seq.k.cx,
        ..seq.k
    };
    let mirror = |p: &Pose| {
        let (a, t) = (p.axis_angle, p.translation);
        Pose::new([a[0], -a[1], -a[2]], [-t[0], t[1], t[2]])
    };
    Sequence {
        k,
        poses: [mirror(&seq.poses[0]), mirror(&seq.poses[1])],
        frames: [flip_frame(&seq.frames[0]), flip_frame(&seq.frames[1]), flip_frame(&seq.frames[2])],
    }
}
