use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros([m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

fn transpose(a: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn([c, r], |i| a.at(&[i % r, i / r]))
}

/// Weighted sum so every output element influences the loss differently.
fn probe_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(g.shape(y).to_vec(), -1.0, 1.0, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(x: &Tensor<f64>, f: impl FnMut(&mut Graph<f64>, Var) -> Result<Var>) {
    let err = gradient_check(f, x, 1e-6).unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::eye(2));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);
}

#[test]
fn matmul_shape_law_and_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([3, 4]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
    let err = g.matmul(b, b).unwrap_err();
    assert!(err.to_string().contains("[3, 4]"), "{err}");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn([5, 7], 1.0, &mut r);
    let b = Tensor::<f64>::randn([7, 2], 1.0, &mut r);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert!(g.value(c).max_abs_diff(&naive_matmul(&a, &b)).unwrap() < 1e-12);

    // transposed operands read the same storage
    let (at, bt) = (g.constant(transpose(&a)), g.constant(transpose(&b)));
    let c2 = g.matmul_t(at, bt, true, true).unwrap();
    assert!(g.value(c2).max_abs_diff(&naive_matmul(&a, &b)).unwrap() < 1e-12);
}

#[test]
fn batched_matmul_broadcasts_2d_operand() {
    let mut r = rng(2);
    let a = Tensor::<f64>::randn([3, 4, 5], 1.0, &mut r);
    let b = Tensor::<f64>::randn([5, 2], 1.0, &mut r);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[3, 4, 2]);
    for bi in 0..3 {
        let slice = Tensor::from_fn([4, 5], |i| a.data()[bi * 20 + i]);
        let want = naive_matmul(&slice, &b);
        for (i, w) in want.data().iter().enumerate() {
            assert!((g.value(c).data()[bi * 8 + i] - w).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_gradients() {
    let mut r = rng(3);
    let b = Tensor::<f64>::randn([4, 3], 1.0, &mut r);
    let a = Tensor::<f64>::randn([2, 4], 1.0, &mut r);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let x = if ta { transpose(&a) } else { a.clone() };
        let bb = if tb { transpose(&b) } else { b.clone() };
        check(&x, |g, v| {
            let c = g.constant(bb.clone());
            let y = g.matmul_t(v, c, ta, tb)?;
            probe_sum(g, y, 9)
        });
        check(&bb, |g, v| {
            let c = g.constant(x.clone());
            let y = g.matmul_t(c, v, ta, tb)?;
            probe_sum(g, y, 9)
        });
    }
    let batched = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut r);
    check(&b, |g, v| {
        let c = g.constant(batched.clone());
        let y = g.matmul(c, v)?;
        probe_sum(g, y, 4)
    });
    check(&batched, |g, v| {
        let c = g.constant(b.clone());
        let y = g.matmul(v, c)?;
        probe_sum(g, y, 4)
    });
}

#[test]
fn softmax_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(y).data()[1] < 1e-300);
    let x = g.constant(t(&[1], &[f64::NAN]));
    assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
}

#[test]
fn softmax_middle_axis_gradient() {
    let x = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut rng(5));
    for axis in 0..3 {
        check(&x, |g, v| {
            let y = g.softmax(v, axis)?;
            probe_sum(g, y, 6)
        });
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = v.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([n], v).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn unfold_shape_law(h in 1usize..12, w in 1usize..12, k in 1usize..=5, s in 1usize..=3, l in 0usize..=2) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([h, w, 2]));
        let ho = (h as isize - k as isize + 2 * l as isize).div_euclid(s as isize) + 1;
        let wo = (w as isize - k as isize + 2 * l as isize).div_euclid(s as isize) + 1;
        match g.unfold(x, k, s, l) {
            Ok(y) => {
                prop_assert_eq!(g.shape(y), &[(ho * wo) as usize, k * k * 2][..]);
            }
            Err(Error::Config(_)) => prop_assert!(h + 2 * l < k || w + 2 * l < k),
            Err(e) => prop_assert!(false, "unexpected {}", e),
        }
    }
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([2, 5], 3.0));
    let w = g.constant(Tensor::ones([5]));
    let b = g.constant(Tensor::zeros([5]));
    let y = g.layer_norm(x, w, b, 1e-5).unwrap();
    assert!(g.value(y).max_abs() == 0.0);

    let data = Tensor::<f64>::randn([3, 16], 2.0, &mut rng(7)).map(|v| v + 4.0);
    let x = g.constant(data);
    let y = g.layer_norm(x, w, b, 1e-5);
    assert!(y.is_err());
    let w = g.constant(Tensor::ones([16]));
    let b = g.constant(Tensor::zeros([16]));
    let y = g.layer_norm(x, w, b, 1e-5).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0).abs() < 1e-4);
    }
    let w2 = g.constant(Tensor::full([16], 2.0));
    let b3 = g.constant(Tensor::full([16], 3.0));
    let z = g.layer_norm(x, w2, b3, 1e-5).unwrap();
    for (a, b) in g.value(z).data().iter().zip(g.value(y).data()) {
        assert!((a - (2.0 * b + 3.0)).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_gradients() {
    let mut r = rng(8);
    let x = Tensor::<f64>::randn([3, 6], 1.0, &mut r);
    let w = Tensor::<f64>::randn([6], 1.0, &mut r);
    let b = Tensor::<f64>::randn([6], 1.0, &mut r);
    check(&x, |g, v| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = g.layer_norm(v, wv, bv, 1e-5)?;
        probe_sum(g, y, 1)
    });
    check(&w, |g, v| {
        let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
        let y = g.layer_norm(xv, v, bv, 1e-5)?;
        probe_sum(g, y, 1)
    });
    check(&b, |g, v| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.layer_norm(xv, wv, v, 1e-5)?;
        probe_sum(g, y, 1)
    });
}

#[test]
fn activation_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[-1.0, 2.0, 0.0]));
    let relu = g.activation(x, Activation::Relu);
    assert_eq!(g.value(relu).data(), &[0.0, 2.0, 0.0]);
    let elu = g.activation(x, Activation::Elu);
    assert!((g.value(elu).data()[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    let gelu = g.activation(x, Activation::Gelu);
    assert_eq!(g.value(gelu).data()[2], 0.0);
    let sig = g.activation(x, Activation::Sigmoid);
    assert_eq!(g.value(sig).data()[2], 0.5);
    assert_eq!(g.activation(x, Activation::Identity), x);
}

#[test]
fn pointwise_gradients() {
    let x = Tensor::<f64>::uniform([2, 5], 0.2, 2.0, &mut rng(10));
    // signed input keeps kinks away from zero
    let s = x.map(|v| if v > 1.1 { v } else { -v });
    for kind in [
        UnaryKind::Neg,
        UnaryKind::Abs,
        UnaryKind::Exp,
        UnaryKind::Sqrt,
        UnaryKind::Ln,
        UnaryKind::Square,
        UnaryKind::Sin,
        UnaryKind::Cos,
        UnaryKind::Relu,
        UnaryKind::Elu,
        UnaryKind::Gelu,
        UnaryKind::Sigmoid,
    ] {
        let input = if matches!(kind, UnaryKind::Ln | UnaryKind::Sqrt) { &x } else { &s };
        check(input, |g, v| {
            let y = g.unary(kind, v);
            probe_sum(g, y, 11)
        });
    }
    check(&x, |g, v| {
        let y = g.powf(v, 1.7);
        probe_sum(g, y, 12)
    });
    check(&s, |g, v| {
        let y = g.clamp(v, -1.0, 1.5);
        let y = g.affine(y, 3.0, 0.5);
        probe_sum(g, y, 13)
    });
}

#[test]
fn binary_gradients_with_broadcast() {
    let mut r = rng(14);
    let a = Tensor::<f64>::uniform([3, 4], 0.5, 1.5, &mut r);
    let shapes: [&[usize]; 5] = [&[3, 4], &[4], &[3, 1], &[], &[1, 1]];
    for s in shapes {
        let b = Tensor::<f64>::uniform(s.to_vec(), 0.5, 1.5, &mut r);
        for op in 0..4 {
            let apply = |g: &mut Graph<f64>, x: Var, y: Var| match op {
                0 => g.add(x, y),
                1 => g.sub(x, y),
                2 => g.mul(x, y),
                _ => g.div(x, y),
            };
            check(&a, |g, v| {
                let c = g.constant(b.clone());
                let y = apply(g, v, c)?;
                probe_sum(g, y, 15)
            });
            check(&b, |g, v| {
                let c = g.constant(a.clone());
                let y = apply(g, c, v)?;
                probe_sum(g, y, 15)
            });
        }
    }
    let mid = Tensor::<f64>::uniform([2, 1, 3], 0.5, 1.5, &mut r);
    let full = Tensor::<f64>::uniform([2, 4, 3], 0.5, 1.5, &mut r);
    check(&mid, |g, v| {
        let c = g.constant(full.clone());
        let y = g.mul(c, v)?;
        probe_sum(g, y, 16)
    });
}

#[test]
fn min_pair_routes_gradient_to_smaller() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(t(&[3], &[1.0, 5.0, 2.0]));
    let b = g.leaf(t(&[3], &[2.0, 4.0, 2.0]));
    let m = g.min_pair(a, b).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 4.0, 2.0]);
    let s = g.sum(m);
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.get(a).unwrap().data(), &[1.0, 0.0, 1.0]);
    assert_eq!(gr.get(b).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn structural_gradients() {
    let mut r = rng(17);
    let x = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut r);
    let other = Tensor::<f64>::randn([2, 2, 4], 1.0, &mut r);
    for axis in 0..3 {
        check(&x, |g, v| {
            let y = g.sum_axis(v, axis, axis == 1)?;
            probe_sum(g, y, 18)
        });
        check(&x, |g, v| {
            let y = g.mean_axis(v, axis, false)?;
            probe_sum(g, y, 18)
        });
    }
    check(&x, |g, v| {
        let c = g.constant(other.clone());
        let y = g.concat(&[c, v, c], 1)?;
        probe_sum(g, y, 19)
    });
    check(&x, |g, v| {
        let y = g.narrow(v, 2, 1, 2)?;
        let y = g.reshape(y, [3, 4])?;
        probe_sum(g, y, 20)
    });
    check(&x, |g, v| {
        let y = g.reshape(v, [6, 4])?;
        let y = g.transpose(y)?;
        probe_sum(g, y, 21)
    });
    check(&x, |g, v| {
        let y = g.gather(v, &[Some(3), None, Some(3), Some(23)], [2, 2])?;
        probe_sum(g, y, 22)
    });
}

#[test]
fn concat_and_narrow_values() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let n = g.narrow(c, 1, 1, 2).unwrap();
    assert_eq!(g.value(n).data(), &[3.0, 4.0, 5.0, 6.0]);
    assert!(g.concat(&[a, b], 0).is_err());
}

/// Explicit nested-loop patch extraction.
fn unfold_oracle(x: &Tensor<f64>, k: usize, s: usize, l: usize) -> Vec<Vec<f64>> {
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h + 2 * l - k) / s + 1;
    let wo = (w + 2 * l - k) / s + 1;
    let mut rows = Vec::new();
    for oy in 0..ho {
        for ox in 0..wo {
            let mut row = Vec::new();
            for ky in 0..k {
                for kx in 0..k {
                    for c in 0..d {
                        let iy = (oy * s + ky) as isize - l as isize;
                        let ix = (ox * s + kx) as isize - l as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        row.push(if inside {
                            x.at(&[iy as usize, ix as usize, c])
                        } else {
                            0.0
                        });
                    }
                }
            }
            rows.push(row);
        }
    }
    rows
}

#[test]
fn unfold_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn([4, 4, 1], |i| i as f64));
    let y = g.unfold(x, 2, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[4, 4]);
    assert_eq!(&g.value(y).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&g.value(y).data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    let mut seen: Vec<f64> = g.value(y).data().to_vec();
    seen.sort_by(f64::total_cmp);
    assert_eq!(seen, (0..16).map(|v| v as f64).collect::<Vec<_>>());

    let big = g.constant(Tensor::zeros([128, 416, 1]));
    let y = g.unfold(big, 3, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[64 * 208, 9]);

    let r = Tensor::<f64>::randn([5, 5, 2], 1.0, &mut rng(23));
    let v = g.constant(r.clone());
    let y = g.unfold(v, 3, 1, 1).unwrap();
    let want = unfold_oracle(&r, 3, 1, 1);
    for (row, w) in g.value(y).data().chunks(18).zip(&want) {
        assert_eq!(row, &w[..]);
    }

    let tiny = g.constant(Tensor::zeros([2, 2, 1]));
    assert!(matches!(g.unfold(tiny, 5, 1, 0), Err(Error::Config(_))));
}

#[test]
fn unfold_gradient() {
    let x = Tensor::<f64>::randn([5, 4, 2], 1.0, &mut rng(24));
    for (k, s, l) in [(3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0)] {
        check(&x, |g, v| {
            let y = g.unfold(v, k, s, l)?;
            probe_sum(g, y, 25)
        });
    }
}

#[test]
fn pooling_and_resampling() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn([2, 4, 1], |i| i as f64));
    let p = g.max_pool2(x).unwrap();
    assert_eq!(g.value(p).data(), &[5.0, 7.0]);
    let u = g.upsample_nearest(p, 2).unwrap();
    assert_eq!(g.value(u).data(), &[5.0, 5.0, 7.0, 7.0, 5.0, 5.0, 7.0, 7.0]);

    let c = g.constant(Tensor::full([3, 2, 2], 0.7));
    let b = g.upsample_bilinear(c, 4).unwrap();
    assert_eq!(g.shape(b), &[12, 8, 2]);
    assert!(g.value(b).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    let f = g.box_filter3(c).unwrap();
    assert!(g.value(f).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

    let r = Tensor::<f64>::randn([4, 6, 2], 1.0, &mut rng(26));
    check(&r, |g, v| {
        let y = g.max_pool2(v)?;
        probe_sum(g, y, 27)
    });
    check(&r, |g, v| {
        let y = g.upsample_nearest(v, 2)?;
        probe_sum(g, y, 27)
    });
    check(&r, |g, v| {
        let y = g.upsample_bilinear(v, 2)?;
        probe_sum(g, y, 27)
    });
    check(&r, |g, v| {
        let y = g.box_filter3(v)?;
        probe_sum(g, y, 27)
    });
}

fn identity_grid(h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([h, w, 2], |i| {
        let p = i / 2;
        if i % 2 == 0 {
            (p % w) as f64
        } else {
            (p / w) as f64
        }
    })
}

#[test]
fn bilinear_identity_and_center() {
    let src = Tensor::<f64>::randn([3, 4, 2], 1.0, &mut rng(28));
    let mut g = Graph::new();
    let s = g.constant(src.clone());
    let c = g.constant(identity_grid(3, 4));
    let (y, mask) = g.bilinear_sample(s, c).unwrap();
    assert!(g.value(y).bit_eq(&src));
    assert!(mask.data().iter().all(|&m| m == 1.0));

    let s = g.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 10.0]));
    let c = g.constant(t(&[1, 1, 2], &[0.5, 0.5]));
    let (y, _) = g.bilinear_sample(s, c).unwrap();
    assert!((g.value(y).data()[0] - 4.0).abs() < 1e-15);

    let c = g.constant(t(&[1, 3, 2], &[-0.1, 0.0, 0.0, 1.2, f64::NAN, 0.0]));
    let (y, mask) = g.bilinear_sample(s, c).unwrap();
    assert_eq!(mask.data(), &[0.0, 0.0, 0.0]);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn bilinear_ties_use_lower_cell() {
    // at u = 1 the lower cell [0, 1] is used: du = s[1] - s[0]
    let mut g = Graph::<f64>::new();
    let s = g.constant(t(&[1, 3, 1], &[0.0, 1.0, 5.0]));
    let c = g.leaf(t(&[1, 1, 2], &[1.0, 0.0]));
    let (y, _) = g.bilinear_sample(s, c).unwrap();
    let l = g.sum(y);
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.get(c).unwrap().data()[0], 1.0);
}

#[test]
fn bilinear_gradients_match_finite_differences() {
    let mut r = rng(29);
    let src = Tensor::<f64>::randn([5, 6, 3], 1.0, &mut r);
    // keep samples away from integer kinks
    let coords = Tensor::from_fn([4, 4, 2], |i| {
        let base: f64 = if i % 2 == 0 { 4.6 } else { 3.6 };
        0.2 + (base * ((i * 7919 % 97) as f64 / 97.0)).floor() + 0.1 + 0.6 * ((i * 31 % 17) as f64 / 17.0)
    });
    check(&src, |g, v| {
        let c = g.constant(coords.clone());
        let (y, _) = g.bilinear_sample(v, c)?;
        probe_sum(g, y, 30)
    });
    check(&coords, |g, v| {
        let s = g.constant(src.clone());
        let (y, _) = g.bilinear_sample(s, v)?;
        probe_sum(g, y, 30)
    });
}

#[test]
fn cross_and_norm() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
    let b = g.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
    let c = g.cross3(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[0.0, 0.0, 1.0]);
    let v = g.constant(t(&[2, 3], &[3.0, 4.0, 0.0, 0.0, 0.0, 2.0]));
    let n = g.norm_last(v).unwrap();
    assert_eq!(g.value(n).data(), &[5.0, 2.0]);

    let mut r = rng(31);
    let x = Tensor::<f64>::randn([4, 3], 1.0, &mut r);
    let y = Tensor::<f64>::randn([4, 3], 1.0, &mut r);
    check(&x, |g, v| {
        let o = g.constant(y.clone());
        let c = g.cross3(v, o)?;
        probe_sum(g, c, 32)
    });
    check(&y, |g, v| {
        let o = g.constant(x.clone());
        let c = g.cross3(o, v)?;
        probe_sum(g, c, 32)
    });
    check(&x, |g, v| {
        let n = g.norm_last(v)?;
        probe_sum(g, n, 33)
    });
}

#[test]
fn backward_examples() {
    let x0 = Tensor::<f64>::randn([2, 3], 1.0, &mut rng(34));
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let s = g.sum(x);
    assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &Tensor::ones([2, 3]));

    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let gr = g.backward(s).unwrap();
    assert!(gr.get(x).unwrap().max_abs_diff(&x0.map(|v| 2.0 * v)).unwrap() < 1e-15);
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones([3]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

#[test]
fn untouched_leaf_has_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones([3]));
    let unused = g.leaf(Tensor::ones([2]));
    let s = g.sum(x);
    let gr = g.backward(s).unwrap();
    assert!(gr.get(unused).is_none());
}

#[test]
fn finite_difference_examples() {
    let x = Tensor::<f64>::randn([4], 3.0, &mut rng(35));
    let g = finite_difference_grad(|p| Ok(p.sum()), &x, 1e-6).unwrap();
    assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-10 * 1e3));
    let x = t(&[2], &[1.0, 2.0]);
    let g = finite_difference_grad(|p| Ok(p.data().iter().map(|v| v * v).sum()), &x, 1e-6).unwrap();
    assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
}

fn mlp(g: &mut Graph<f64>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.unary(UnaryKind::Gelu, h);
    let y = g.matmul(h, w2)?;
    let y = g.unary(UnaryKind::Sigmoid, y);
    let sq = g.square(y);
    Ok(g.mean(sq))
}

#[test]
fn two_layer_perceptron_matches_finite_differences() {
    let mut r = rng(36);
    let x = Tensor::<f64>::randn([4, 5], 1.0, &mut r);
    let w1 = Tensor::<f64>::randn([5, 6], 0.5, &mut r);
    let w2 = Tensor::<f64>::randn([6, 2], 0.5, &mut r);
    check(&w1, |g, v| {
        let (xv, b) = (g.constant(x.clone()), g.constant(w2.clone()));
        mlp(g, xv, v, b)
    });
    check(&w2, |g, v| {
        let (xv, a) = (g.constant(x.clone()), g.constant(w1.clone()));
        mlp(g, xv, a, v)
    });
    check(&x, |g, v| {
        let (a, b) = (g.constant(w1.clone()), g.constant(w2.clone()));
        mlp(g, v, a, b)
    });
}

#[test]
fn replay_is_bitwise_deterministic() {
    let mut r = rng(37);
    let x = Tensor::<f64>::randn([8, 5], 1.0, &mut r);
    let w1 = Tensor::<f64>::randn([5, 64], 0.5, &mut r);
    let w2 = Tensor::<f64>::randn([64, 2], 0.5, &mut r);
    let run = || {
        let mut g = Graph::new();
        let (xv, a, b) = (g.constant(x.clone()), g.leaf(w1.clone()), g.constant(w2.clone()));
        let l = mlp(&mut g, xv, a, b).unwrap();
        let v = g.value(l).clone();
        let grad = g.backward(l).unwrap().take(a).unwrap();
        (v, grad)
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert!(v1.bit_eq(&v2) && g1.bit_eq(&g2));
}

#[test]
fn relative_error_is_normwise() {
    let a = t(&[2], &[1.0, 0.0]);
    let b = t(&[2], &[1.0, 1e-3]);
    assert!((relative_error(&a, &b).unwrap() - 1e-3 / (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
    let z = Tensor::<f64>::zeros([2]);
    assert_eq!(relative_error(&z, &z).unwrap(), 0.0);
}

#[test]
fn single_precision_matches_double() {
    let mut r = rng(38);
    let a = Tensor::<f64>::randn([6, 9], 1.0, &mut r);
    let b = Tensor::<f64>::randn([9, 4], 1.0, &mut r);
    let mut g = Graph::<f32>::new();
    let (va, vb) = (g.constant(a.cast()), g.constant(b.cast()));
    let c = g.matmul(va, vb).unwrap();
    let want = naive_matmul(&a, &b);
    assert!(g.value(c).cast::<f64>().max_abs_diff(&want).unwrap() < 1e-5);
}
