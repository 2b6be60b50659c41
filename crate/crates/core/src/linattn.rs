//! Scaled dot-product attention, its low-rank linear variant, multi-head
//! linear attention and the Linformer block.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, LayerNorm, Linear, ParamId, ParamStore, INIT_STD};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Hidden width of the block MLP relative to `d_model`.
pub const MLP_RATIO: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Per-head feature width.
    pub d_model: usize,
    /// Length keys and values are projected to.
    pub k_proj: usize,
    pub heads: usize,
    /// One key/value head set and one projection pair serve every head.
    pub one_kv_heads: bool,
    /// Keys and values share one projection matrix.
    pub share_kv: bool,
    /// Token count; fixed because the projections are `k_proj x seq_len`.
    pub seq_len: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            k_proj: 64,
            heads: 8,
            one_kv_heads: true,
            share_kv: true,
            seq_len: 64,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.k_proj == 0 {
            return Err(Error::Config(format!(
                "attention needs d_model, heads, k_proj >= 1 (got {}, {}, {})",
                self.d_model, self.heads, self.k_proj
            )));
        }
        if self.k_proj > self.seq_len {
            return Err(Error::Config(format!(
                "k_proj {} exceeds seq_len {}",
                self.k_proj, self.seq_len
            )));
        }
        Ok(())
    }

    /// Number of distinct projection pairs.
    fn proj_sets(&self) -> usize {
        if self.one_kv_heads {
            1
        } else {
            self.heads
        }
    }

    /// Closed-form parameter count of [`AttentionWeights`].
    pub fn attention_params(&self) -> usize {
        let (d, h) = (self.d_model, self.heads);
        let kv = if self.one_kv_heads { 2 * d * d } else { 2 * h * d * d };
        let per_proj = if self.share_kv { 1 } else { 2 };
        h * d * d + kv + h * d * d + self.proj_sets() * per_proj * self.k_proj * self.seq_len
    }

    /// Closed-form parameter count of [`LinformerBlock`].
    pub fn block_params(&self) -> usize {
        let d = self.d_model;
        self.attention_params()
            + 2 * LayerNorm::param_count(d)
            + Linear::param_count(d, MLP_RATIO * d, true)
            + Linear::param_count(MLP_RATIO * d, d, true)
    }

    /// Multiply-accumulate count of one block forward.
    pub fn block_macs(&self) -> usize {
        let (n, d, h, k) = (self.seq_len, self.d_model, self.heads, self.k_proj);
        let sets = self.proj_sets();
        let q = n * d * h * d;
        let kv = 2 * n * d * d * sets;
        let proj = if self.share_kv && self.one_kv_heads {
            2 * k * n * d
        } else {
            2 * k * n * d * sets
        };
        let attn = 2 * h * n * k * d;
        let out = n * h * d * d;
        let mlp = 2 * n * d * MLP_RATIO * d;
        q + kv + proj + attn + out + mlp
    }
}

fn check_2d<T: Scalar>(g: &Graph<T>, v: Var, rows: usize, cols: usize, what: &'static str) -> Result<()> {
    if g.shape(v) != [rows, cols] {
        return Err(Error::shape(what, g.shape(v), &[rows, cols]));
    }
    Ok(())
}

/// `softmax(q k^T / sqrt(d)) v` with the full `n x n` attention matrix.
pub fn sdpa<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("sdpa", &s, &[2]));
    }
    check_2d(g, k, s[0], s[1], "sdpa keys")?;
    check_2d(g, v, s[0], s[1], "sdpa values")?;
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, lit(1.0 / (s[1] as f64).sqrt()));
    let attn = g.softmax(scores, 1)?;
    g.matmul(attn, v)
}

/// `softmax(q (e k)^T / sqrt(d)) (f v)`: keys and values are first projected
/// to length `k`, so the attention matrix is `n x k`.
pub fn sdpla<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, e: Var, f: Var) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("sdpla", &s, &[2]));
    }
    let (n, d) = (s[0], s[1]);
    check_2d(g, k, n, d, "sdpla keys")?;
    check_2d(g, v, n, d, "sdpla values")?;
    let kp = g.shape(e).first().copied().unwrap_or(0);
    check_2d(g, e, kp, n, "sdpla key projection")?;
    check_2d(g, f, kp, n, "sdpla value projection")?;
    let keys = g.matmul(e, k)?;
    let values = g.matmul(f, v)?;
    projected_attention(g, q, keys, values, d)
}

/// Attention of queries (`m x d`) against already projected keys and values.
fn projected_attention<T: Scalar>(g: &mut Graph<T>, q: Var, keys: Var, values: Var, d: usize) -> Result<Var> {
    let scores = g.matmul_t(q, keys, false, true)?;
    let scores = g.scale(scores, lit(1.0 / (d as f64).sqrt()));
    let attn = g.softmax(scores, 1)?;
    g.matmul(attn, values)
}

/// Learnable tensors of one multi-head linear attention.
///
/// Query weights of all heads are stored side by side as `d x (h d)`; key and
/// value weights likewise unless one set serves all heads. With `share_kv`
/// the value projections are the key projections.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub e: Vec<ParamId>,
    pub f: Vec<ParamId>,
}

impl AttentionWeights {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.d_model, cfg.heads);
        let kv_cols = if cfg.one_kv_heads { d } else { h * d };
        let wq = store.normal(format!("{name}.wq"), &[d, h * d], INIT_STD, rng);
        let wk = store.normal(format!("{name}.wk"), &[d, kv_cols], INIT_STD, rng);
        let wv = store.normal(format!("{name}.wv"), &[d, kv_cols], INIT_STD, rng);
        let wo = store.normal(format!("{name}.wo"), &[h * d, d], INIT_STD, rng);
        let mut e = Vec::new();
        let mut f = Vec::new();
        for i in 0..cfg.proj_sets() {
            let ei = store.normal(format!("{name}.e{i}"), &[cfg.k_proj, cfg.seq_len], INIT_STD, rng);
            e.push(ei);
            f.push(if cfg.share_kv {
                ei
            } else {
                store.normal(format!("{name}.f{i}"), &[cfg.k_proj, cfg.seq_len], INIT_STD, rng)
            });
        }
        Ok(Self { wq, wk, wv, wo, e, f })
    }
}

/// Multi-head linear attention of `x` (`n x d`), returning `n x d`.
pub fn mhla<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binding,
    x: Var,
    w: &AttentionWeights,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let (n, d, h) = (cfg.seq_len, cfg.d_model, cfg.heads);
    if g.shape(x) != [n, d] {
        return Err(Error::Config(format!(
            "attention configured for {n}x{d} tokens, got {:?}",
            g.shape(x)
        )));
    }
    let q = g.matmul(x, p.var(w.wq))?;
    let k = g.matmul(x, p.var(w.wk))?;
    let v = g.matmul(x, p.var(w.wv))?;
    let heads = if cfg.one_kv_heads {
        let keys = g.matmul(p.var(w.e[0]), k)?;
        let values = g.matmul(p.var(w.f[0]), v)?;
        // rows of (n*h) x d are (token, head) pairs, so the result reshapes
        // straight into the head-concatenated n x (h d) layout
        let q = g.reshape(q, [n * h, d])?;
        let o = projected_attention(g, q, keys, values, d)?;
        g.reshape(o, [n, h * d])?
    } else {
        let mut outs = Vec::with_capacity(h);
        for i in 0..h {
            let qi = g.narrow(q, 1, i * d, d)?;
            let ki = g.narrow(k, 1, i * d, d)?;
            let vi = g.narrow(v, 1, i * d, d)?;
            outs.push(sdpla(g, qi, ki, vi, p.var(w.e[i]), p.var(w.f[i]))?);
        }
        g.concat(&outs, 1)?
    };
    g.matmul(heads, p.var(w.wo))
}

/// Pre-norm transformer block with linear attention:
/// `y = x + mhla(ln(x))`, `out = y + mlp(ln(y))`.
#[derive(Clone, Debug)]
pub struct LinformerBlock {
    pub cfg: AttentionConfig,
    pub ln1: LayerNorm,
    pub attn: AttentionWeights,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LinformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
        let attn = AttentionWeights::new(store, &format!("{name}.attn"), cfg, rng)?;
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), d, MLP_RATIO * d, true, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), MLP_RATIO * d, d, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            ln1,
            attn,
            ln2,
            fc1,
            fc2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = mhla(g, p, h, &self.attn, &self.cfg)?;
        let y = g.add(x, a)?;
        let h = self.ln2.forward(g, p, y)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.unary(UnaryKind::Gelu, h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(y, h)
    }
}

/// One row of the attention scaling benchmark.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub k_proj: usize,
    pub d: usize,
    pub sdpa_median_s: f64,
    pub sdpla_median_s: f64,
    /// Largest value created during one call, in elements.
    pub sdpa_peak: usize,
    pub sdpla_peak: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

const SAMPLE_SECONDS: f64 = 0.05;

/// Times forward passes of [`sdpa`] and [`sdpla`] on random single-precision
/// inputs for each sequence length. Each of the `repeats` samples is the mean
/// over enough calls to last about 50 ms; rows report the median sample.
pub fn benchmark(n_list: &[usize], k_proj: usize, d: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &n in n_list {
        if k_proj > n || n == 0 {
            return Err(Error::Config(format!("k_proj {k_proj} exceeds n {n}")));
        }
        let inputs: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::randn([n, d], 1.0, &mut rng)).collect();
        let e = Tensor::<f32>::randn([k_proj, n], INIT_STD, &mut rng);
        let f = Tensor::<f32>::randn([k_proj, n], INIT_STD, &mut rng);
        let run = |linear: bool| -> Result<(f64, usize)> {
            let mut g = Graph::<f32>::new();
            let q = g.constant(inputs[0].clone());
            let k = g.constant(inputs[1].clone());
            let v = g.constant(inputs[2].clone());
            let (ev, fv) = (g.constant(e.clone()), g.constant(f.clone()));
            let mark = g.len();
            let start = Instant::now();
            if linear {
                sdpla(&mut g, q, k, v, ev, fv)?;
            } else {
                sdpa(&mut g, q, k, v)?;
            }
            Ok((start.elapsed().as_secs_f64(), g.peak_numel_since(mark)))
        };
        // each sample sums enough calls to span SAMPLE_SECONDS
        let calls = |linear: bool| -> Result<usize> {
            let (t, _) = run(linear)?;
            Ok(((SAMPLE_SECONDS / t.max(1e-9)).ceil() as usize).clamp(1, 10_000))
        };
        let (cs, cl) = (calls(false)?, calls(true)?);
        let sample = |linear: bool, count: usize| -> Result<(f64, usize)> {
            let (mut total, mut peak) = (0.0, 0);
            for _ in 0..count {
                let (t, p) = run(linear)?;
                total += t;
                peak = p;
            }
            Ok((total / count as f64, peak))
        };
        let (mut ts, mut tl) = (Vec::new(), Vec::new());
        let (mut ps, mut pl) = (0, 0);
        for _ in 0..repeats {
            let (t, p) = sample(false, cs)?;
            ts.push(t);
            ps = p;
            let (t, p) = sample(true, cl)?;
            tl.push(t);
            pl = p;
        }
        rows.push(BenchRow {
            n,
            k_proj,
            d,
            sdpa_median_s: median(ts),
            sdpla_median_s: median(tl),
            sdpa_peak: ps,
            sdpla_peak: pl,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Row-by-row softmax-weighted sum.
    fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let m = k.shape()[0];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let scores: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..m {
                for c in 0..d {
                    out[i * d + c] += w[j] / z * v.at(&[j, c]);
                }
            }
        }
        out
    }

    fn project(e: &Tensor<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (k, n, d) = (e.shape()[0], e.shape()[1], x.shape()[1]);
        Tensor::from_fn([k, d], |i| (0..n).map(|j| e.at(&[i / d, j]) * x.at(&[j, i % d])).sum())
    }

    fn run_sdpa(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = sdpa(&mut g, q, k, v).unwrap();
        g.value(o).clone()
    }

    fn run_sdpla(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, e: &Tensor<f64>, f: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (e, f) = (g.constant(e.clone()), g.constant(f.clone()));
        let o = sdpla(&mut g, q, k, v, e, f).unwrap();
        g.value(o).clone()
    }

    #[test]
    fn sdpa_single_token_returns_values() {
        let v = Tensor::<f64>::randn([1, 3], 1.0, &mut rng(0));
        let q = Tensor::<f64>::randn([1, 3], 1.0, &mut rng(1));
        assert!(run_sdpa(&q, &q, &v).bit_eq(&v));
        let one = Tensor::<f64>::ones([1, 1]);
        assert!(run_sdpla(&q, &q, &v, &one, &one).bit_eq(&v));
    }

    #[test]
    fn zero_queries_average_values() {
        let mut r = rng(2);
        let k = Tensor::<f64>::randn([5, 3], 1.0, &mut r);
        let v = Tensor::<f64>::randn([5, 3], 1.0, &mut r);
        let out = run_sdpa(&Tensor::zeros([5, 3]), &k, &v);
        for i in 0..5 {
            for c in 0..3 {
                let mean = (0..5).map(|j| v.at(&[j, c])).sum::<f64>() / 5.0;
                assert!((out.at(&[i, c]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sdpa_matches_row_oracle() {
        let mut r = rng(3);
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn([6, 4], 1.0, &mut r));
        let out = run_sdpa(&q, &k, &v);
        for (a, b) in out.data().iter().zip(attention_oracle(&q, &k, &v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sdpla_matches_projected_oracle() {
        let mut r = rng(4);
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn([7, 3], 1.0, &mut r));
        let e = Tensor::<f64>::randn([2, 7], 1.0, &mut r);
        let f = Tensor::<f64>::randn([2, 7], 1.0, &mut r);
        let out = run_sdpla(&q, &k, &v, &e, &f);
        assert_eq!(out.shape(), &[7, 3]);
        let want = attention_oracle(&q, &project(&e, &k), &project(&f, &v));
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_projection_reduces_to_sdpa() {
        let mut r = rng(5);
        for _ in 0..20 {
            let n = r.random_range(1..=16);
            let d = r.random_range(1..=8);
            let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn([n, d], 1.0, &mut r));
            let eye = Tensor::eye(n);
            let a = run_sdpa(&q, &k, &v);
            let b = run_sdpla(&q, &k, &v, &eye, &eye);
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn key_value_permutation_invariance() {
        let mut r = rng(6);
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn([6, 3], 1.0, &mut r));
        let perm = [3, 0, 5, 1, 4, 2];
        let pk = Tensor::from_fn([6, 3], |i| k.at(&[perm[i / 3], i % 3]));
        let pv = Tensor::from_fn([6, 3], |i| v.at(&[perm[i / 3], i % 3]));
        assert!(run_sdpa(&q, &k, &v).max_abs_diff(&run_sdpa(&q, &pk, &pv)).unwrap() < 1e-14);
    }

    #[test]
    fn large_inputs_stay_finite() {
        let mut r = rng(7);
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::uniform([8, 4], -100.0, 100.0, &mut r));
        let e = Tensor::<f64>::uniform([3, 8], -1.0, 1.0, &mut r);
        assert!(run_sdpa(&q, &k, &v).all_finite());
        assert!(run_sdpla(&q, &k, &v, &e, &e).all_finite());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros([4, 3]));
        let k = g.constant(Tensor::zeros([5, 3]));
        assert!(matches!(sdpa(&mut g, q, k, q), Err(Error::Shape { .. })));
        let e = g.constant(Tensor::zeros([2, 5]));
        assert!(matches!(sdpla(&mut g, q, q, q, e, e), Err(Error::Shape { .. })));
    }

    fn cfg(n: usize, d: usize, h: usize, one: bool, share: bool) -> AttentionConfig {
        AttentionConfig {
            d_model: d,
            k_proj: 3,
            heads: h,
            one_kv_heads: one,
            share_kv: share,
            seq_len: n,
        }
    }

    fn mhla_value(store: &ParamStore<f64>, w: &AttentionWeights, c: &AttentionConfig, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let o = mhla(&mut g, &p, xv, w, c).unwrap();
        g.value(o).clone()
    }

    /// Per-head loop with explicit weight slicing.
    fn mhla_oracle(store: &ParamStore<f64>, w: &AttentionWeights, c: &AttentionConfig, x: &Tensor<f64>) -> Vec<f64> {
        let (n, d, h) = (c.seq_len, c.d_model, c.heads);
        let mm = |a: &Tensor<f64>, b: &Tensor<f64>, cols: std::ops::Range<usize>| {
            let kk = a.shape()[1];
            Tensor::from_fn([a.shape()[0], cols.len()], |i| {
                let (r, cc) = (i / cols.len(), cols.start + i % cols.len());
                (0..kk).map(|j| a.at(&[r, j]) * b.at(&[j, cc])).sum()
            })
        };
        let mut concat = vec![0.0; n * h * d];
        for i in 0..h {
            let kvc = if c.one_kv_heads { 0..d } else { i * d..(i + 1) * d };
            let set = if c.one_kv_heads { 0 } else { i };
            let q = mm(x, store.value(w.wq), i * d..(i + 1) * d);
            let k = mm(x, store.value(w.wk), kvc.clone());
            let v = mm(x, store.value(w.wv), kvc);
            let e = store.value(w.e[set]);
            let f = store.value(w.f[set]);
            let o = attention_oracle(&q, &project(e, &k), &project(f, &v));
            for r in 0..n {
                for cc in 0..d {
                    concat[r * h * d + i * d + cc] = o[r * d + cc];
                }
            }
        }
        let cat = Tensor::new([n, h * d], concat).unwrap();
        mm(&cat, store.value(w.wo), 0..d).into_data()
    }

    #[test]
    fn mhla_matches_per_head_oracle() {
        for (one, share) in [(true, true), (true, false), (false, true), (false, false)] {
            let c = cfg(10, 8, 2, one, share);
            let mut store = ParamStore::new();
            let w = AttentionWeights::new(&mut store, "a", &c, &mut rng(8)).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                let s = store.value(id).shape().to_vec();
                store.set(id, Tensor::randn(s, 0.5, &mut rng(id.0 as u64))).unwrap();
            }
            let x = Tensor::<f64>::randn([10, 8], 1.0, &mut rng(9));
            let got = mhla_value(&store, &w, &c, &x);
            for (a, b) in got.data().iter().zip(mhla_oracle(&store, &w, &c, &x)) {
                assert!((a - b).abs() < 1e-12, "{one} {share}");
            }
        }
    }

    #[test]
    fn single_head_is_projected_sdpla() {
        let c = cfg(5, 4, 1, true, false);
        let mut store = ParamStore::new();
        let w = AttentionWeights::new(&mut store, "a", &c, &mut rng(10)).unwrap();
        let x = Tensor::<f64>::randn([5, 4], 1.0, &mut rng(11));
        let got = mhla_value(&store, &w, &c, &x);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x);
        let q = g.matmul(xv, p.var(w.wq)).unwrap();
        let k = g.matmul(xv, p.var(w.wk)).unwrap();
        let v = g.matmul(xv, p.var(w.wv)).unwrap();
        let o = sdpla(&mut g, q, k, v, p.var(w.e[0]), p.var(w.f[0])).unwrap();
        let o = g.matmul(o, p.var(w.wo)).unwrap();
        assert!(g.value(o).max_abs_diff(&got).unwrap() < 1e-15);
    }

    #[test]
    fn sharing_toggle_with_copied_projection_is_identical() {
        let shared = cfg(9, 4, 8, true, true);
        let split = cfg(9, 4, 8, true, false);
        let mut s1 = ParamStore::new();
        let w1 = AttentionWeights::new(&mut s1, "a", &shared, &mut rng(12)).unwrap();
        let mut s2 = ParamStore::new();
        let w2 = AttentionWeights::new(&mut s2, "a", &split, &mut rng(12)).unwrap();
        for (a, b) in [(w1.wq, w2.wq), (w1.wk, w2.wk), (w1.wv, w2.wv), (w1.wo, w2.wo), (w1.e[0], w2.e[0]), (w1.e[0], w2.f[0])] {
            s2.set(b, s1.value(a).clone()).unwrap();
        }
        let x = Tensor::<f64>::randn([9, 4], 1.0, &mut rng(13));
        let a = mhla_value(&s1, &w1, &shared, &x);
        let b = mhla_value(&s2, &w2, &split, &x);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn mhla_rejects_wrong_length() {
        let c = cfg(6, 4, 2, true, true);
        let mut store = ParamStore::<f64>::new();
        let w = AttentionWeights::new(&mut store, "a", &c, &mut rng(14)).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::zeros([5, 4]));
        assert!(matches!(mhla(&mut g, &p, x, &w, &c), Err(Error::Config(_))));
        let bad = AttentionConfig { k_proj: 7, ..c };
        assert!(AttentionWeights::new(&mut store, "b", &bad, &mut rng(0)).is_err());
    }

    #[test]
    fn parameter_count_is_closed_form() {
        for (one, share) in [(true, true), (true, false), (false, true), (false, false)] {
            let c = cfg(10, 6, 3, one, share);
            let mut store = ParamStore::<f64>::new();
            LinformerBlock::new(&mut store, "b", &c, &mut rng(15)).unwrap();
            assert_eq!(store.numel(), c.block_params());
        }
    }

    #[test]
    fn block_with_zero_output_projections_is_identity() {
        let c = cfg(6, 4, 2, true, true);
        let mut store = ParamStore::<f64>::new();
        let b = LinformerBlock::new(&mut store, "b", &c, &mut rng(16)).unwrap();
        store.set(b.attn.wo, Tensor::zeros([8, 4])).unwrap();
        store.set(b.fc2.w, Tensor::zeros([8, 4])).unwrap();
        let x = Tensor::<f64>::randn([6, 4], 1.0, &mut rng(17));
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = b.forward(&mut g, &p, xv).unwrap();
        assert!(g.value(y).bit_eq(&x));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let c = cfg(6, 4, 2, true, true);
        let mut store = ParamStore::<f64>::new();
        let b = LinformerBlock::new(&mut store, "b", &c, &mut rng(18)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let v = store.value(id).clone();
            let noise = Tensor::<f64>::randn(v.shape().to_vec(), 0.3, &mut rng(100 + id.0 as u64));
            let mixed = Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i] + noise.data()[i]);
            store.set(id, mixed).unwrap();
        }
        let x = Tensor::<f64>::randn([6, 4], 1.0, &mut rng(19));
        let weights = Tensor::<f64>::randn([6, 4], 1.0, &mut rng(20));
        let err = gradient_check(
            |g, xv| {
                let p = store.bind_frozen(g);
                let y = b.forward(g, &p, xv)?;
                let w = g.constant(weights.clone());
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn benchmark_reports_peak_ratio() {
        let rows = benchmark(&[64, 128], 16, 8, 1, 0).unwrap();
        assert_eq!(rows[1].sdpa_peak, 128 * 128);
        assert_eq!(rows[1].sdpla_peak, 128 * 16);
    }
}
