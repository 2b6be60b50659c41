//! Central finite-difference checks of every differentiable building block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradient_check, Activation, Graph, Var};
use crate::dlnet::{BlockConfig, DlBlock, Ssmlp, SsmlpConfig};
use crate::error::Result;
use crate::geometry::{backproject, estimate_normals, sine_distance, warp_coords, Intrinsics, Pose};
use crate::linattn::{sdpa, sdpla, AttentionConfig, LinformerBlock};
use crate::losses::{
    final_loss, min_reprojection, naive_smoothness, normal_smoothness, pairwise_loss, photometric_l1, ssim_loss,
    LossConfig, LossInputs, SmoothnessKind,
};
use crate::nn::{Binding, ParamStore};
use crate::synthdata::{default_intrinsics, make_sequence, Scene, Sequence};
use crate::tensor::Tensor;

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Outcome of one check.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub error: f64,
    pub passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts `y` with fixed random weights so every output element matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(g.shape(y).to_vec(), -1.0, 1.0, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn perturb(store: &mut ParamStore<f64>, seed: u64) -> Result<()> {
    let mut r = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let v = store.value(id);
        let noise = Tensor::<f64>::uniform(v.shape().to_vec(), -0.5, 0.5, &mut r);
        let moved = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
        )?;
        store.set(id, moved)?;
    }
    Ok(())
}

struct Suite {
    results: Vec<GradCheck>,
}

impl Suite {
    fn record(&mut self, name: impl Into<String>, error: Result<f64>) -> Result<()> {
        let error = error?;
        self.results.push(GradCheck {
            name: name.into(),
            error,
            passed: error <= GRADCHECK_TOL,
        });
        Ok(())
    }

    /// Checks the input and then every parameter of a module.
    fn module<F>(&mut self, name: &str, store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &Binding, Var) -> Result<Var>,
    {
        let err = gradient_check(
            |g, xv| {
                let p = store.bind_frozen(g);
                f(g, &p, xv)
            },
            x,
            GRADCHECK_STEP,
        );
        self.record(format!("{name}/input"), err)?;
        for id in store.ids() {
            let err = gradient_check(
                |g, v| {
                    let mut p = store.bind_frozen(g);
                    p.replace(id, v);
                    let xv = g.constant(x.clone());
                    f(g, &p, xv)
                },
                store.value(id),
                GRADCHECK_STEP,
            );
            self.record(format!("{name}/{}", store.name(id)), err)?;
        }
        Ok(())
    }
}

fn attention_checks(s: &mut Suite) -> Result<()> {
    let (n, d, kp) = (12, 4, 5);
    let mut r = rng(1);
    let q = Tensor::<f64>::randn([n, d], 1.0, &mut r);
    let k = Tensor::<f64>::randn([n, d], 1.0, &mut r);
    let v = Tensor::<f64>::randn([n, d], 1.0, &mut r);
    let e = Tensor::<f64>::randn([kp, n], 0.5, &mut r);
    let f = Tensor::<f64>::randn([kp, n], 0.5, &mut r);
    let all = [&q, &k, &v];
    for (i, name) in ["query", "key", "value"].iter().enumerate() {
        let err = gradient_check(
            |g, x| {
                let mut vs: Vec<Var> = all.iter().map(|t| g.constant((*t).clone())).collect();
                vs[i] = x;
                let y = sdpa(g, vs[0], vs[1], vs[2])?;
                probe(g, y, 2)
            },
            all[i],
            GRADCHECK_STEP,
        );
        s.record(format!("sdpa/{name}"), err)?;
    }
    let lin = [&q, &k, &v, &e, &f];
    for (i, name) in ["query", "key", "value", "key_projection", "value_projection"].iter().enumerate() {
        let err = gradient_check(
            |g, x| {
                let mut vs: Vec<Var> = lin.iter().map(|t| g.constant((*t).clone())).collect();
                vs[i] = x;
                let y = sdpla(g, vs[0], vs[1], vs[2], vs[3], vs[4])?;
                probe(g, y, 3)
            },
            lin[i],
            GRADCHECK_STEP,
        );
        s.record(format!("sdpla/{name}"), err)?;
    }
    for (one_kv, share) in [(true, true), (false, false)] {
        let cfg = AttentionConfig {
            d_model: 4,
            k_proj: 4,
            heads: 2,
            one_kv_heads: one_kv,
            share_kv: share,
            seq_len: 9,
        };
        let mut store = ParamStore::new();
        let b = LinformerBlock::new(&mut store, "linformer", &cfg, &mut rng(4))?;
        perturb(&mut store, 5)?;
        let x = Tensor::<f64>::randn([9, 4], 1.0, &mut rng(6));
        let tag = if one_kv { "linformer_shared" } else { "linformer_per_head" };
        s.module(tag, &store, &x, |g, p, x| {
            let y = b.forward(g, p, x)?;
            probe(g, y, 7)
        })?;
    }
    Ok(())
}

fn block_checks(s: &mut Suite) -> Result<()> {
    let cfg = SsmlpConfig::new(3, 2, 1, 3, 4, Activation::Gelu);
    let mut store = ParamStore::new();
    let m = Ssmlp::new(&mut store, "ssmlp", &cfg, &mut rng(10))?;
    perturb(&mut store, 11)?;
    let x = Tensor::<f64>::uniform([8, 8, 3], -1.0, 1.0, &mut rng(12));
    s.module("ssmlp", &store, &x, |g, p, x| {
        let y = m.forward(g, p, x)?;
        probe(g, y, 13)
    })?;
    for (stride, d_in, d_out, tag) in [(1, 4, 4, "dlblock_identity"), (2, 3, 4, "dlblock_projected")] {
        let cfg = BlockConfig {
            window: 3,
            stride,
            pad: 1,
            d_in,
            d_out,
            hidden_divisor: 1,
            activation: Activation::Gelu,
            residual: true,
            depth: 1,
            heads: 2,
            k_proj: 8,
            one_kv_heads: true,
            share_kv: true,
        };
        let mut store = ParamStore::new();
        let b = DlBlock::new(&mut store, tag, &cfg, (8, 8), &mut rng(14))?;
        perturb(&mut store, 15)?;
        let x = Tensor::<f64>::uniform([8, 8, d_in], -1.0, 1.0, &mut rng(16));
        s.module(tag, &store, &x, |g, p, x| {
            let y = b.forward(g, p, x)?;
            probe(g, y, 17)
        })?;
    }
    Ok(())
}

fn geometry_checks(s: &mut Suite) -> Result<()> {
    let k = Intrinsics::centered(12, 10, 11.0, 12.0)?;
    let depth = Tensor::<f64>::uniform([10, 12], 2.0, 5.0, &mut rng(20));
    let pose = Tensor::new([6], vec![0.05, -0.08, 0.03, 0.2, -0.1, 0.3])?;
    let err = gradient_check(
        |g, d| {
            let p = g.constant(pose.clone());
            let (c, _) = warp_coords(g, d, p, &k)?;
            probe(g, c, 21)
        },
        &depth,
        GRADCHECK_STEP,
    );
    s.record("warp/depth", err)?;
    for (name, pv) in [("warp/pose", pose.clone()), ("warp/pose_near_zero_rotation", Tensor::new([6], vec![1e-9, -2e-9, 1e-9, 0.1, 0.0, 0.2])?)] {
        let err = gradient_check(
            |g, p| {
                let d = g.constant(depth.clone());
                let (c, _) = warp_coords(g, d, p, &k)?;
                probe(g, c, 22)
            },
            &pv,
            GRADCHECK_STEP,
        );
        s.record(name, err)?;
    }
    let err = gradient_check(
        |g, d| {
            let c = backproject(g, d, &k)?;
            let (n, _) = estimate_normals(g, &c)?;
            probe(g, n, 23)
        },
        &depth,
        GRADCHECK_STEP,
    );
    s.record("normals/depth", err)?;
    let a = Tensor::<f64>::randn([10, 12, 3], 1.0, &mut rng(24));
    let b = Tensor::<f64>::randn([10, 12, 3], 1.0, &mut rng(25));
    let err = gradient_check(
        |g, x| {
            let bv = g.constant(b.clone());
            let y = sine_distance(g, x, bv)?;
            probe(g, y, 26)
        },
        &a,
        GRADCHECK_STEP,
    );
    s.record("sine_distance", err)?;
    Ok(())
}

/// A small rendered textured wall.
fn small_sequence() -> Result<Sequence> {
    let (h, w) = (16, 16);
    let k = default_intrinsics(w, h)?;
    let step = Pose::new([0.004, -0.01, 0.002], [0.05, -0.02, 0.4]);
    make_sequence(&Scene::backdrop(8.0, 31), &step, &k, h, w)
}

fn loss_checks(s: &mut Suite) -> Result<()> {
    let cfg = LossConfig::default();
    let mut r = rng(40);
    let x = Tensor::<f64>::uniform([16, 16, 3], 0.0, 1.0, &mut r);
    let y = Tensor::<f64>::uniform([16, 16, 3], 0.0, 1.0, &mut r);
    let mask = Tensor::from_fn([16, 16], |i| (i % 3 != 0) as u8 as f64);
    let err = gradient_check(
        |g, a| {
            let b = g.constant(y.clone());
            let l = photometric_l1(g, a, b, Some(&mask))?;
            probe(g, l, 41)
        },
        &x,
        GRADCHECK_STEP,
    );
    s.record("photometric_l1", err)?;
    let err = gradient_check(
        |g, a| {
            let b = g.constant(y.clone());
            let l = ssim_loss(g, a, b, &cfg)?;
            probe(g, l, 42)
        },
        &x,
        GRADCHECK_STEP,
    );
    s.record("ssim", err)?;
    let err = gradient_check(
        |g, a| {
            let b = g.constant(y.clone());
            let l = pairwise_loss(g, a, b, None, &cfg)?;
            probe(g, l, 43)
        },
        &x,
        GRADCHECK_STEP,
    );
    s.record("pairwise", err)?;
    let other = Tensor::<f64>::uniform([16, 16], 0.0, 1.0, &mut r);
    let first = Tensor::<f64>::uniform([16, 16], 0.0, 1.0, &mut r);
    let err = gradient_check(
        |g, a| {
            let b = g.constant(other.clone());
            let m = min_reprojection(g, &[a, b])?;
            probe(g, m, 44)
        },
        &first,
        GRADCHECK_STEP,
    );
    s.record("min_reprojection", err)?;

    let seq = small_sequence()?;
    let image: Tensor<f64> = seq.target().image.cast();
    let disp = Tensor::<f64>::uniform([16, 16], 0.05, 0.4, &mut r);
    let err = gradient_check(|g, d| naive_smoothness(g, d, &image), &disp, GRADCHECK_STEP);
    s.record("smoothness_first_order", err)?;
    let err = gradient_check(|g, d| normal_smoothness(g, d, &image, &seq.k, &cfg), &disp, GRADCHECK_STEP);
    s.record("smoothness_normals", err)?;

    for kind in [SmoothnessKind::Threedgs, SmoothnessKind::NaiveC0] {
        let cfg = LossConfig {
            scales: vec![0, 2],
            smoothness: kind,
            ..LossConfig::default()
        };
        final_loss_checks(s, &seq, &cfg, &format!("final_loss_{kind:?}").to_lowercase())?;
    }
    Ok(())
}

/// The loss is only piecewise smooth (absolute values, minima, masks, bilinear
/// cells); offset poses and random disparities give a generic point with no
/// kink within the step.
fn final_loss_checks(s: &mut Suite, seq: &Sequence, cfg: &LossConfig, tag: &str) -> Result<()> {
    let target: Tensor<f64> = seq.target().image.cast();
    let refs: Vec<Tensor<f64>> = seq.references().iter().map(|f| f.image.cast()).collect();
    let mut r = rng(50);
    let (h, w) = (seq.height(), seq.width());
    let disps: Vec<Tensor<f64>> = cfg
        .scales
        .iter()
        .map(|&sc| Tensor::uniform([h >> sc, w >> sc], 0.006, 0.02, &mut r))
        .collect();
    let poses: Vec<Tensor<f64>> = seq
        .poses
        .iter()
        .map(|p| {
            let a = p.to_array();
            Tensor::new([6], a.iter().map(|v| v * 1.1 + 0.0025).collect())
        })
        .collect::<Result<_>>()?;
    // slot i < scales: disparity; then the two poses
    let slots = disps.len() + poses.len();
    for slot in 0..slots {
        let x = if slot < disps.len() { &disps[slot] } else { &poses[slot - disps.len()] };
        let err = gradient_check(
            |g, v| {
                let mut dv: Vec<Var> = disps.iter().map(|t| g.constant(t.clone())).collect();
                let mut pv: Vec<Var> = poses.iter().map(|t| g.constant(t.clone())).collect();
                if slot < dv.len() {
                    dv[slot] = v;
                } else {
                    pv[slot - dv.len()] = v;
                }
                let inp = LossInputs {
                    target: &target,
                    refs: &refs,
                    disparities: &dv,
                    poses: &pv,
                    k: &seq.k,
                };
                Ok(final_loss(g, &inp, cfg)?.0)
            },
            x,
            GRADCHECK_STEP,
        );
        let what = if slot < disps.len() {
            format!("disparity_s{}", cfg.scales[slot])
        } else {
            format!("pose{}", slot - disps.len())
        };
        s.record(format!("{tag}/{what}"), err)?;
    }
    Ok(())
}

/// Runs every check in 64-bit precision.
pub fn gradcheck_suite() -> Result<Vec<GradCheck>> {
    let mut s = Suite { results: Vec::new() };
    attention_checks(&mut s)?;
    block_checks(&mut s)?;
    geometry_checks(&mut s)?;
    loss_checks(&mut s)?;
    Ok(s.results)
}
