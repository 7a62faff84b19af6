//! Finite-difference checks for every differentiable op on seeded random shapes,
//! plus direct-evaluation oracles for correlation, lookup and deformable convolution.

use cascade_tensor::{uniform, EuForm, GradCheck, Pointwise, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn dims(seed: u64, even: bool) -> [usize; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919);
    let mut e = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (b, c) = (e(1, 2), e(1, 3));
    let (mut h, mut w) = (e(3, 6), e(3, 6));
    if even {
        h += h % 2;
        w += w % 2;
    }
    [b, c, h, w]
}

fn check(name: &str, f: impl Fn(&mut Tape, &[cascade_tensor::Var]) -> cascade_tensor::Result<cascade_tensor::Var>, inputs: Vec<Tensor>) {
    let r = GradCheck::new(TOL).run(f, &inputs).unwrap();
    assert!(r.passed(), "{name}: {r:?}");
}

#[test]
fn conv2d_gradients() {
    for seed in SEEDS {
        let [b, c, h, w] = dims(seed, false);
        let o = 1 + seed as usize % 3;
        let (stride, pad) = (1 + seed as usize % 2, seed as usize % 2);
        check(
            "conv2d",
            |t, v| t.conv2d(v[0], v[1], v[2], stride, pad),
            vec![
                uniform([b, c, h, w], -1.0, 1.0, seed),
                uniform([o, c, 3, 3], -1.0, 1.0, seed + 100),
                uniform([o], -1.0, 1.0, seed + 200),
            ],
        );
    }
}

#[test]
fn conv2d_on_4x4_passes() {
    check(
        "conv2d 1x1x4x4",
        |t, v| t.conv2d(v[0], v[1], v[2], 1, 1),
        vec![uniform([1, 1, 4, 4], -1.0, 1.0, 8), uniform([1, 1, 3, 3], -1.0, 1.0, 9), uniform([1], -1.0, 1.0, 10)],
    );
}

#[test]
fn bilinear_sample_gradients() {
    for seed in SEEDS {
        let [b, c, h, w] = dims(seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Interior, non-integer coordinates so the stencil is differentiable.
        let coords = Tensor::from_fn([b, 2, h, w], |i| {
            let plane = h * w;
            let axis_extent = if (i / plane) % 2 == 0 { w } else { h };
            rng.random_range(0.05..(axis_extent as f64 - 1.05))
        });
        check("bilinear_sample", |t, v| t.bilinear_sample(v[0], v[1]), vec![uniform([b, c, h, w], -1.0, 1.0, seed), coords]);
    }
}

#[test]
fn avg_pool2_gradients() {
    for seed in SEEDS {
        let d = dims(seed, true);
        check("avg_pool2", |t, v| t.avg_pool2(v[0]), vec![uniform(d, -1.0, 1.0, seed)]);
    }
}

#[test]
fn instance_norm_gradients() {
    for seed in SEEDS {
        let d = dims(seed, false);
        check("instance_norm", |t, v| t.instance_norm(v[0], 1e-5), vec![uniform(d, -1.0, 1.0, seed)]);
    }
}

#[test]
fn pointwise_gradients() {
    for seed in SEEDS {
        let d = dims(seed, false);
        for kind in [Pointwise::Sigmoid, Pointwise::Tanh, Pointwise::Relu, Pointwise::Exp, Pointwise::Abs] {
            check(kind.name(), |t, v| t.pointwise(v[0], kind), vec![uniform(d, -2.0, 2.0, seed)]);
        }
        check("log", |t, v| t.pointwise(v[0], Pointwise::Log), vec![uniform(d, 0.2, 3.0, seed)]);
    }
}

#[test]
fn elementwise_and_structural_gradients() {
    for seed in SEEDS {
        let d = dims(seed, false);
        let a = uniform(d, -1.0, 1.0, seed);
        let b = uniform(d, -1.0, 1.0, seed + 50);
        check("add", |t, v| t.add(v[0], v[1]), vec![a.clone(), b.clone()]);
        check("sub", |t, v| t.sub(v[0], v[1]), vec![a.clone(), b.clone()]);
        check("mul", |t, v| t.mul(v[0], v[1]), vec![a.clone(), b.clone()]);
        check("scale", |t, v| t.scale(v[0], -1.7), vec![a.clone()]);
        check("clamp", |t, v| t.clamp(v[0], -0.5, 0.5), vec![a.clone()]);
        check("concat", |t, v| t.concat(&[v[0], v[1], v[0]]), vec![a.clone(), b.clone()]);
        check("mean", |t, v| t.mean(v[0]), vec![a]);
    }
}

#[test]
fn correlation_and_lookup_gradients() {
    for seed in SEEDS {
        let [b, c, _, _] = dims(seed, false);
        let (h, w) = (4, 4);
        let f1 = uniform([b, c, h, w], -1.0, 1.0, seed);
        let f2 = uniform([b, c, h, w], -1.0, 1.0, seed + 9);
        check("correlation", |t, v| t.correlation(v[0], v[1]), vec![f1.clone(), f2.clone()]);
        let flow = uniform([b, 2, h, w], -1.3, 1.3, seed + 3);
        check(
            "lookup",
            |t, v| {
                let c1 = t.correlation(v[0], v[1])?;
                let c2 = t.avg_pool2(c1)?;
                let c3 = t.avg_pool2(c2)?;
                t.lookup(&[c1, c2, c3], &flow, 1)
            },
            vec![f1, f2],
        );
    }
}

/// Moves samples at least 0.02 away from integers, where bilinear stencils have kinks.
fn off_integer(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        let f = *v - v.round();
        if f.abs() < 0.02 {
            *v += 0.04f64.copysign(f);
        }
    }
    t
}

#[test]
fn deform_conv_gradients() {
    for seed in SEEDS {
        let [b, _, h, w] = dims(seed, false);
        let groups = 1 + seed as usize % 2;
        let c = 2 * groups;
        let o = 2;
        check(
            "deform_conv2d",
            |t, v| t.deform_conv2d(v[0], v[1], v[2], v[3], v[4], groups),
            vec![
                uniform([b, c, h, w], -1.0, 1.0, seed),
                off_integer(uniform([b, 2 * groups * 9, h, w], -1.4, 1.4, seed + 1)),
                uniform([b, groups * 9, h, w], 0.1, 0.9, seed + 2),
                uniform([o, c, 3, 3], -1.0, 1.0, seed + 3),
                uniform([o], -1.0, 1.0, seed + 4),
            ],
        );
    }
}

#[test]
fn eu_loss_gradients() {
    for seed in SEEDS {
        let [b, c, h, w] = dims(seed, false);
        for form in [EuForm::Printed, EuForm::Laplace] {
            check(
                "eu_loss",
                |t, v| t.eu_loss(v[0], v[1], v[2], form),
                vec![
                    uniform([b, c, h, w], 0.0, 1.0, seed),
                    uniform([b, c, h, w], 0.0, 1.0, seed + 1),
                    uniform([b, 1, h, w], -3.0, 1.0, seed + 2),
                ],
            );
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn correlation_matches_quadruple_loop() {
    let (d, h, w) = (5, 3, 4);
    let f1 = uniform([1, d, h, w], -1.0, 1.0, 31);
    let f2 = uniform([1, d, h, w], -1.0, 1.0, 32);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(f1.clone()), tape.constant(f2.clone()));
    let c = tape.correlation(a, b).unwrap();
    let got = tape.value(c).data();
    for i in 0..h {
        for j in 0..w {
            for k in 0..h {
                for l in 0..w {
                    let mut want = 0.0;
                    for ch in 0..d {
                        want += f1.data()[(ch * h + i) * w + j] * f2.data()[(ch * h + k) * w + l];
                    }
                    let v = got[((i * w + j) * h + k) * w + l];
                    assert!(rel(v, want) < 1e-10);
                }
            }
        }
    }
}

#[test]
fn lookup_integer_flow_equals_direct_indexing() {
    let (h, w, r) = (6, 5, 2);
    let f1 = uniform([1, 3, h, w], -1.0, 1.0, 41);
    let f2 = uniform([1, 3, h, w], -1.0, 1.0, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let flow = Tensor::from_fn([1, 2, h, w], |_| rng.random_range(-3i32..=3) as f64);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(f1), tape.constant(f2));
    let c1 = tape.correlation(a, b).unwrap();
    let out = tape.lookup(&[c1], &flow, r).unwrap();
    let vol = tape.value(c1).data();
    let o = tape.value(out).data();
    let n = h * w;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let tx = j as i64 + flow.data()[p] as i64;
            let ty = i as i64 + flow.data()[n + p] as i64;
            let mut ch = 0;
            for dy in -(r as i64)..=r as i64 {
                for dx in -(r as i64)..=r as i64 {
                    let y = (ty + dy).clamp(0, h as i64 - 1) as usize;
                    let x = (tx + dx).clamp(0, w as i64 - 1) as usize;
                    assert_eq!(o[ch * n + p], vol[p * n + y * w + x]);
                    ch += 1;
                }
            }
        }
    }
}

#[test]
fn deform_with_zero_offsets_and_unit_mask_is_plain_conv() {
    let (b, c, h, w, o, g) = (2, 4, 5, 6, 3, 2);
    let x = uniform([b, c, h, w], -1.0, 1.0, 51);
    let wt = uniform([o, c, 3, 3], -1.0, 1.0, 52);
    let bias = uniform([o], -1.0, 1.0, 53);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(wt), tape.constant(bias));
    let off = tape.constant(Tensor::zeros([b, 2 * g * 9, h, w]));
    let mask = tape.constant(Tensor::full([b, g * 9, h, w], 1.0));
    let d = tape.deform_conv2d(xv, off, mask, wv, bv, g).unwrap();
    let p = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
    for (a, e) in tape.value(d).data().iter().zip(tape.value(p).data()) {
        assert!(rel(*a, *e) < 1e-9 || (a - e).abs() < 1e-12);
    }
}

#[test]
fn deform_with_zero_mask_is_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(uniform([1, 2, 4, 4], -1.0, 1.0, 61));
    let off = tape.constant(uniform([1, 18, 4, 4], -2.0, 2.0, 62));
    let mask = tape.constant(Tensor::zeros([1, 9, 4, 4]));
    let w = tape.constant(uniform([2, 2, 3, 3], -1.0, 1.0, 63));
    let b = tape.constant(Tensor::zeros([2]));
    let y = tape.deform_conv2d(x, off, mask, w, b, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

fn conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    tape.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = uniform([1, 2, 5, 4], -1.0, 1.0, seed);
        let y = uniform([1, 2, 5, 4], -1.0, 1.0, seed + 1);
        let w = uniform([3, 2, 3, 3], -1.0, 1.0, seed + 2);
        let zero = Tensor::zeros([3]);
        let mix = Tensor::from_fn([1, 2, 5, 4], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv(&mix, &w, &zero);
        let (cx, cy) = (conv(&x, &w, &zero), conv(&y, &w, &zero));
        let scale = lhs.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
        for i in 0..lhs.numel() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn avg_pool_preserves_mass(seed in 0u64..10_000, h in 1usize..6, w in 1usize..6) {
        let x = uniform([2, 3, 2 * h, 2 * w], -1.0, 1.0, seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = tape.avg_pool2(v).unwrap();
        let (s_in, s_out) = (x.sum(), tape.value(p).sum() * 4.0);
        prop_assert!((s_in - s_out).abs() <= 1e-9 * s_in.abs().max(1.0));
    }

    #[test]
    fn identity_grid_sampling_is_exact(seed in 0u64..10_000, h in 1usize..7, w in 1usize..7) {
        let x = uniform([1, 2, h, w], -5.0, 5.0, seed);
        let mut grid = Tensor::zeros([1, 2, h, w]);
        for y in 0..h {
            for xx in 0..w {
                grid.data_mut()[y * w + xx] = xx as f64;
                grid.data_mut()[h * w + y * w + xx] = y as f64;
            }
        }
        let mut tape = Tape::new();
        let (xv, gv) = (tape.constant(x.clone()), tape.constant(grid));
        let s = tape.bilinear_sample(xv, gv).unwrap();
        prop_assert_eq!(tape.value(s), &x);
    }

    #[test]
    fn correlation_is_symmetric_under_swap(seed in 0u64..10_000) {
        let (h, w) = (3, 3);
        let f1 = uniform([1, 4, h, w], -1.0, 1.0, seed);
        let f2 = uniform([1, 4, h, w], -1.0, 1.0, seed + 1);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(f1), tape.constant(f2));
        let ab = tape.correlation(a, b).unwrap();
        let ba = tape.correlation(b, a).unwrap();
        let n = h * w;
        for p in 0..n {
            for q in 0..n {
                prop_assert!((tape.value(ab).data()[p * n + q] - tape.value(ba).data()[q * n + p]).abs() <= 1e-12);
            }
        }
    }
}

