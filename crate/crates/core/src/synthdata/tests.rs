use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn flat(seed: u64) -> Texture {
    Texture {
        seed,
        frequency: 0.2,
        octaves: 4,
    }
}

fn wall(depth: f64) -> Scene {
    Scene::backdrop(60.0, 1).with(
        Shape::Plane {
            center: [0.0, 0.0, depth],
            normal: [0.0, 0.0, -1.0],
            half: None,
        },
        [0.9, 0.8, 0.7],
        flat(5),
    )
}

fn k64() -> Intrinsics {
    default_intrinsics(64, 32).unwrap()
}

#[test]
fn fronto_plane_has_constant_depth() {
    let f = wall(7.5).render(&Pose::identity(), &k64(), 32, 64);
    assert!(f.depth.data().iter().all(|&d| d == 7.5f32));
    let b = Scene::backdrop(40.0, 3).render(&Pose::identity(), &k64(), 32, 64);
    assert!(b.depth.data().iter().all(|&d| d == 40.0f32));
}

#[test]
fn render_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scene = Scene::random(&mut rng);
    let cam = Pose::new([0.01, -0.02, 0.0], [0.1, 0.0, 0.3]);
    let a = scene.render(&cam, &k64(), 32, 64);
    let b = scene.render(&cam, &k64(), 32, 64);
    assert!(a.image.bit_eq(&b.image) && a.depth.bit_eq(&b.depth));
}

#[test]
fn sphere_silhouette_matches_projected_disk() {
    let (h, w, f) = (128, 128, 100.0);
    let k = Intrinsics::centered(w, h, f, f).unwrap();
    let (r, z) = (2.0f64, 10.0f64);
    let scene = Scene::backdrop(50.0, 2).with(
        Shape::Sphere {
            center: [0.0, 0.0, z],
            radius: r,
        },
        [1.0; 3],
        flat(4),
    );
    let frame = scene.render(&Pose::identity(), &k, h, w);
    let hits = frame.depth.data().iter().filter(|&&d| d < 50.0).count() as f64;
    // the tangent cone meets the image plane in a circle of radius f r / sqrt(z^2 - r^2)
    let disk = std::f64::consts::PI * f * f * r * r / (z * z - r * r);
    assert!((hits - disk).abs() / disk < 0.05, "{hits} vs {disk}");
}

#[test]
fn sphere_depth_matches_ray_intersection() {
    let k = k64();
    let scene = Scene::backdrop(50.0, 2).with(
        Shape::Sphere {
            center: [0.0, 0.0, 8.0],
            radius: 2.0,
        },
        [1.0; 3],
        flat(4),
    );
    let frame = scene.render(&Pose::identity(), &k, 32, 64);
    let (u, v) = (35usize, 14usize);
    let ray = k.ray(u as f64, v as f64);
    // |s ray - c|^2 = r^2, nearest root
    let a = ray.iter().map(|x| x * x).sum::<f64>();
    let b = -2.0 * 8.0 * ray[2];
    let c = 64.0 - 4.0;
    let s = (-b - (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
    assert!((frame.depth.data()[v * 64 + u] as f64 - s).abs() < 1e-5);
}

#[test]
fn texture_is_in_unit_range_and_varies() {
    let t = flat(11);
    let vals: Vec<f64> = (0..2000).map(|i| t.sample([i as f64 * 0.37, (i % 13) as f64, 2.0])).collect();
    assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    assert!(sd > 0.1, "{sd}");
}

#[test]
fn patches_have_contrast() {
    let seqs = generate(4, 3, 64, 128).unwrap();
    let (mut good, mut total) = (0, 0);
    for s in &seqs {
        let img = s.target().image.data();
        for py in 0..8 {
            for px in 0..16 {
                let mut lo = [f32::MAX; 3];
                let mut hi = [f32::MIN; 3];
                for y in 0..8 {
                    for x in 0..8 {
                        for c in 0..3 {
                            let v = img[((py * 8 + y) * 128 + px * 8 + x) * 3 + c];
                            lo[c] = lo[c].min(v);
                            hi[c] = hi[c].max(v);
                        }
                    }
                }
                total += 1;
                if (0..3).any(|c| hi[c] - lo[c] >= 0.1) {
                    good += 1;
                }
            }
        }
    }
    assert!(good as f64 >= 0.9 * total as f64, "{good}/{total}");
}

#[test]
fn zero_step_gives_identical_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = Scene::random(&mut rng);
    let s = make_sequence(&scene, &Pose::identity(), &k64(), 32, 64).unwrap();
    for f in &s.frames {
        assert!(f.image.bit_eq(&s.frames[1].image) && f.depth.bit_eq(&s.frames[1].depth));
    }
    assert!(s.poses.iter().all(|p| *p == Pose::identity()));
    assert_eq!(visibility(&s), [1.0, 1.0]);
}

#[test]
fn forward_motion_toward_plane_is_self_consistent() {
    let step = Pose::new([0.0; 3], [0.0, 0.0, 0.5]);
    let s = make_sequence(&wall(10.0), &step, &k64(), 32, 64).unwrap();
    let e = gt_reconstruction_error(&s).unwrap();
    assert!(e[0] < 0.02 && e[1] < 0.02, "{e:?}");
    // a wrong motion reconstructs worse
    let mut bad = s.clone();
    bad.poses[0] = Pose::new([0.0; 3], [0.3, 0.0, -0.5]);
    assert!(gt_reconstruction_error(&bad).unwrap()[0] > e[0]);
}

#[test]
fn generated_sequences_are_self_consistent() {
    let seqs = generate(6, 17, 64, 128).unwrap();
    for (i, s) in seqs.iter().enumerate() {
        let e = gt_reconstruction_error(s).unwrap();
        assert!(e[0] < 0.02 && e[1] < 0.02, "sequence {i}: {e:?}");
        assert!(visibility(s).iter().all(|&v| v >= MIN_VISIBILITY));
        assert!(s.frames.iter().all(|f| f.depth.data().iter().all(|d| d.is_finite() && *d > 0.0)));
    }
}

#[test]
fn generation_is_seeded_per_index() {
    let a = generate(3, 5, 32, 64).unwrap();
    let b = generate(3, 5, 32, 64).unwrap();
    assert_eq!(a, b);
    let c = generate(3, 6, 32, 64).unwrap();
    assert_ne!(a[0], c[0]);
    assert_ne!(a[0], a[1]);
}

#[test]
fn large_step_is_rejected() {
    let step = Pose::new([0.0, 0.4, 0.0], [0.0, 0.0, 0.0]);
    let err = make_sequence(&wall(10.0), &step, &k64(), 32, 64).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let seqs = generate(3, 1, 16, 32).unwrap();
    let bytes = dataset_to_bytes(&seqs).unwrap();
    let back = dataset_from_bytes(&bytes).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in seqs.iter().zip(&back) {
        assert_eq!(a.k, b.k);
        assert_eq!(a.poses, b.poses);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert!(fa.image.bit_eq(&fb.image) && fa.depth.bit_eq(&fb.depth));
        }
    }
    assert_eq!(dataset_to_bytes(&back).unwrap(), bytes);
}

#[test]
fn empty_dataset_is_valid() {
    let bytes = dataset_to_bytes(&[]).unwrap();
    assert_eq!(bytes.len(), 4 + 2 + 4 + 4);
    assert!(dataset_from_bytes(&bytes).unwrap().is_empty());
}

#[test]
fn corruption_is_caught_by_checksum() {
    let seqs = generate(1, 1, 8, 16).unwrap();
    let bytes = dataset_to_bytes(&seqs).unwrap();
    for pos in (0..bytes.len()).step_by(37).chain([0, 5, bytes.len() - 1]) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        match dataset_from_bytes(&bad) {
            Err(Error::Checksum { .. }) | Err(Error::Truncated(_)) => {}
            other => panic!("byte {pos}: {other:?}"),
        }
    }
}

#[test]
fn truncation_and_version_are_reported() {
    let seqs = generate(2, 1, 8, 16).unwrap();
    let bytes = dataset_to_bytes(&seqs).unwrap();
    let cut = &bytes[..bytes.len() - 100];
    assert!(matches!(dataset_from_bytes(cut), Err(Error::Truncated(_))));
    assert!(matches!(dataset_from_bytes(&bytes[..7]), Err(Error::Truncated(_))));
    let mut v2 = bytes[..bytes.len() - 4].to_vec();
    v2[4] = 2;
    let crc = crc32fast::hash(&v2);
    v2.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(
        dataset_from_bytes(&v2),
        Err(Error::Version { found: 2, expected: 1 })
    ));
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dlgs");
    let seqs = generate(2, 8, 8, 16).unwrap();
    write_dataset(&seqs, &path).unwrap();
    assert!(!path.with_extension("partial").exists());
    assert_eq!(read_dataset(&path).unwrap(), seqs);
}

#[test]
fn identity_jitter_keeps_image() {
    let s = &generate(1, 2, 16, 32).unwrap()[0];
    let img = &s.target().image;
    assert!(jitter_image(img, &ColorJitter::identity()).bit_eq(img));
    // hue rotation by a full turn round-trips through YIQ
    let full = ColorJitter {
        hue: 1.0,
        ..ColorJitter::identity()
    };
    assert!(jitter_image(img, &full).max_abs_diff(img).unwrap() < 1e-5);
}

#[test]
fn jitter_stays_in_range_and_follows_brightness() {
    let s = &generate(1, 2, 16, 32).unwrap()[0];
    let img = &s.target().image;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = JitterConfig {
        probability: 1.0,
        ..JitterConfig::default()
    };
    for _ in 0..20 {
        let j = ColorJitter::sample(&cfg, &mut rng).unwrap();
        assert!((0.8..=1.2).contains(&j.brightness) && (0.8..=1.2).contains(&j.saturation));
        assert!((0.8..=1.2).contains(&j.contrast) && (-0.1..=0.1).contains(&j.hue));
        let out = jitter_image(img, &j);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let dim = ColorJitter {
        brightness: 0.8,
        ..ColorJitter::identity()
    };
    let out = jitter_image(img, &dim);
    for (a, b) in out.data().iter().zip(img.data()) {
        assert!((a - 0.8 * b).abs() < 1e-6);
    }
    let never = JitterConfig {
        probability: 0.0,
        ..JitterConfig::default()
    };
    assert!(ColorJitter::sample(&never, &mut rng).is_none());
}

#[test]
fn flip_is_an_involution_and_keeps_geometry() {
    let s = &generate(2, 4, 32, 64).unwrap()[1];
    let f = flip_sequence(s);
    assert_eq!(flip_sequence(&f), *s);
    let e = gt_reconstruction_error(&f).unwrap();
    let e0 = gt_reconstruction_error(s).unwrap();
    for i in 0..2 {
        assert!((e[i] - e0[i]).abs() < 1e-3, "{e:?} vs {e0:?}");
    }
}
