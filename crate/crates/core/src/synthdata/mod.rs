//! Procedural scenes, ray-cast views with ground-truth depth and motion,
//! three-frame sequences and their on-disk format.

mod augment;
mod dataset;
mod scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::{warp_coords, Intrinsics, Pose, Z_MIN};
use crate::losses::photometric_l1;
use crate::tensor::Tensor;

pub use augment::{flip_sequence, jitter_image, ColorJitter, JitterConfig};
pub use dataset::{
    from_bytes as dataset_from_bytes, read_dataset, to_bytes as dataset_to_bytes, write_dataset, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use scene::{Frame, Primitive, Scene, Shape, Texture};

/// Fraction of target pixels that must stay visible in each reference.
pub const MIN_VISIBILITY: f64 = 0.7;

/// Frames at times -1, 0, +1; the middle one is the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub k: Intrinsics,
    /// Target-to-reference motion for frames 0 and 2.
    pub poses: [Pose; 2],
    pub frames: [Frame; 3],
}

impl Sequence {
    pub fn target(&self) -> &Frame {
        &self.frames[1]
    }

    pub fn references(&self) -> [&Frame; 2] {
        [&self.frames[0], &self.frames[2]]
    }

    pub fn height(&self) -> usize {
        self.frames[1].height()
    }

    pub fn width(&self) -> usize {
        self.frames[1].width()
    }
}

/// Default camera: principal point at the centre, focal length `0.6 W`.
pub fn default_intrinsics(width: usize, height: usize) -> Result<Intrinsics> {
    let f = 0.6 * width as f64;
    Intrinsics::centered(width, height, f, f)
}

/// Renders the target at the world origin and references one `step` (a
/// camera-to-world motion) behind and ahead.
pub fn make_sequence(scene: &Scene, step: &Pose, k: &Intrinsics, height: usize, width: usize) -> Result<Sequence> {
    let back = step.inverse();
    let frames = [back, Pose::identity(), *step].map(|c| scene.render(&c, k, height, width));
    let seq = Sequence {
        k: *k,
        poses: [*step, back],
        frames,
    };
    for (i, v) in visibility(&seq).into_iter().enumerate() {
        if v < MIN_VISIBILITY {
            return Err(Error::Data(format!(
                "reference {i} keeps {:.1}% of the target visible, below {:.0}%",
                100.0 * v,
                100.0 * MIN_VISIBILITY
            )));
        }
    }
    Ok(seq)
}

/// Fraction of target pixels whose nearest reference pixel lies inside the
/// image and agrees with the reprojected depth to within 5%.
pub fn visibility(seq: &Sequence) -> [f64; 2] {
    let (h, w) = (seq.height(), seq.width());
    let depth = seq.target().depth.data();
    let refs = seq.references();
    [0, 1].map(|r| {
        let pose = &seq.poses[r];
        let rd = refs[r].depth.data();
        let mut seen = 0usize;
        for p in 0..h * w {
            let ray = seq.k.ray((p % w) as f64, (p / w) as f64);
            let z = depth[p] as f64;
            let q = pose.apply(ray.map(|c| c * z));
            if q[2] <= Z_MIN {
                continue;
            }
            let [u, v] = seq.k.project(q);
            let (ui, vi) = (u.round(), v.round());
            if !(ui >= 0.0 && vi >= 0.0 && ui < w as f64 && vi < h as f64) {
                continue;
            }
            let other = rd[vi as usize * w + ui as usize] as f64;
            if (q[2] - other).abs() <= 0.05 * other {
                seen += 1;
            }
        }
        seen as f64 / (h * w) as f64
    })
}

/// Masked photometric L1 between the target and each reference warped with
/// ground-truth depth and motion.
pub fn gt_reconstruction_error(seq: &Sequence) -> Result<[f64; 2]> {
    let mut out = [0.0; 2];
    for (r, frame) in seq.references().into_iter().enumerate() {
        let mut g = Graph::<f64>::new();
        let depth = g.constant(seq.target().depth.cast());
        let pose = g.constant(Tensor::new([6], seq.poses[r].to_array().to_vec())?);
        let (coords, warp_mask) = warp_coords(&mut g, depth, pose, &seq.k)?;
        let src = g.constant(frame.image.cast());
        let (warped, sample_mask) = g.bilinear_sample(src, coords)?;
        let target = g.constant(seq.target().image.cast());
        let l1 = photometric_l1(&mut g, warped, target, None)?;
        let (mut sum, mut n) = (0.0, 0.0);
        for ((&e, &a), &b) in g.value(l1).data().iter().zip(warp_mask.data()).zip(sample_mask.data()) {
            if a * b > 0.0 {
                sum += e;
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(Error::DegenerateBatch(format!("reference {r} shares no pixels with the target")));
        }
        out[r] = sum / n;
    }
    Ok(out)
}

/// Random forward-moving camera step.
pub fn random_step<R: Rng + ?Sized>(rng: &mut R) -> Pose {
    Pose::new(
        [rng.random_range(-0.005..0.005), rng.random_range(-0.015..0.015), 0.0],
        [rng.random_range(-0.08..0.08), rng.random_range(-0.03..0.03), rng.random_range(0.2..0.6)],
    )
}

const ATTEMPTS: u64 = 16;

/// `count` sequences; sequence `i` depends only on `(seed, i)`.
pub fn generate(count: usize, seed: u64, height: usize, width: usize) -> Result<Vec<Sequence>> {
    let k = default_intrinsics(width, height)?;
    (0..count)
        .map(|i| {
            let mut last = None;
            for attempt in 0..ATTEMPTS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((i as u64) << 8) | attempt);
                let scene = Scene::random(&mut rng);
                let step = random_step(&mut rng);
                match make_sequence(&scene, &step, &k, height, width) {
                    Ok(s) => return Ok(s),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.unwrap_or_else(|| Error::Data("no sequence generated".into())))
        })
        .collect()
}

#[cfg(test)]
mod tests;
