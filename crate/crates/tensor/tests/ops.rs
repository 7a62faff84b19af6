use cascade_tensor::{uniform, CustomBackward, EuForm, GradCheck, Pointwise, Tape, Tensor, TensorError};

fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn identity_grid(b: usize, h: usize, w: usize) -> Tensor {
    let mut d = vec![0.0; b * 2 * h * w];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                d[(bi * 2) * h * w + y * w + x] = x as f64;
                d[(bi * 2 + 1) * h * w + y * w + x] = y as f64;
            }
        }
    }
    t4([b, 2, h, w], d)
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(uniform([1, 1, 3, 3], -1.0, 1.0, 1));
    let w = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn conv_constant_input_all_ones_kernel() {
    let c = 0.37;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([1, 1, 5, 6], c));
    let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), [1, 1, 3, 4]);
    assert!(tape.value(y).data().iter().all(|v| (v - 9.0 * c).abs() < 1e-12));
}

#[test]
fn conv_output_extent_with_stride_and_padding() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([2, 3, 9, 8]));
    let w = tape.constant(Tensor::zeros([4, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros([4]));
    let y = tape.conv2d(x, w, b, 2, 1).unwrap();
    // (9 + 2 - 3)/2 + 1 = 5, (8 + 2 - 3)/2 + 1 = 4
    assert_eq!(tape.shape(y), [2, 4, 5, 4]);
}

#[test]
fn conv_shape_mismatch_names_axes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros([1]));
    match tape.conv2d(x, w, b, 1, 1) {
        Err(TensorError::Dimension { detail, .. }) => assert!(detail.contains("axis 1"), "{detail}"),
        other => panic!("expected dimension error, got {other:?}"),
    }
    let w_even = tape.constant(Tensor::zeros([1, 2, 2, 2]));
    assert!(tape.conv2d(x, w_even, b, 1, 0).is_err());
}

#[test]
fn conv_input_gradient_at_fd_step_1e3() {
    let x = uniform([1, 2, 5, 5], -1.0, 1.0, 11);
    let w = uniform([3, 2, 3, 3], -0.5, 0.5, 12);
    let b = uniform([3], -0.1, 0.1, 13);
    let report = GradCheck::new(1e-4)
        .step(1e-3)
        .run(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1), &[x, w, b])
        .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn sample_identity_grid_is_exact() {
    let x = uniform([2, 3, 4, 5], -1.0, 1.0, 3);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(identity_grid(2, 4, 5));
    let y = tape.bilinear_sample(xv, g).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn sample_integer_shift_on_ramp() {
    // ramp(x, y) = 3x + y; sampling at x + 2 reproduces the ramp shifted by two columns
    // except where the clamp engages.
    let (h, w) = (4, 7);
    let ramp = Tensor::from_fn([1, 1, h, w], |i| 3.0 * (i % w) as f64 + (i / w) as f64);
    let mut grid = identity_grid(1, h, w);
    for v in &mut grid.data_mut()[..h * w] {
        *v += 2.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(ramp.clone());
    let gv = tape.constant(grid);
    let y = tape.bilinear_sample(xv, gv).unwrap();
    for yy in 0..h {
        for xx in 0..w {
            let src = (xx + 2).min(w - 1);
            assert_eq!(tape.value(y).data()[yy * w + xx], ramp.data()[yy * w + src]);
        }
    }
}

#[test]
fn sample_half_pixel_step_is_midpoint() {
    let x = t4([1, 1, 1, 2], vec![0.0, 1.0]);
    let coords = t4([1, 2, 1, 1], vec![0.5, 0.0]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let cv = tape.constant(coords);
    let y = tape.bilinear_sample(xv, cv).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5]);
}

#[test]
fn sample_clamps_outside_coordinates() {
    let x = t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let coords = t4([1, 2, 1, 2], vec![-5.0, 9.0, -1.0, 7.0]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let cv = tape.constant(coords);
    let y = tape.bilinear_sample(xv, cv).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 4.0]);
}

#[test]
fn pool_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full([1, 2, 4, 6], 0.3));
    let y = tape.avg_pool2(c).unwrap();
    assert_eq!(tape.shape(y), [1, 2, 2, 3]);
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    let block = tape.constant(t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = tape.avg_pool2(block).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);
    let odd = tape.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(matches!(tape.avg_pool2(odd), Err(TensorError::Dimension { .. })));
}

#[test]
fn pointwise_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    let t = tape.tanh(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
    assert_eq!(tape.value(t).data(), &[0.0]);
    assert!(matches!(tape.pointwise(z, Pointwise::Log), Err(TensorError::Domain { .. })));
    let big = tape.constant(Tensor::scalar(1e4));
    assert!(matches!(tape.exp(big), Err(TensorError::NonFinite { .. })));
}

#[test]
fn sigmoid_gradient_fd() {
    let x = uniform([3, 7], -4.0, 4.0, 5);
    let r = GradCheck::new(1e-4).run(|t, v| t.sigmoid(v[0]), &[x]).unwrap();
    assert!(r.passed(), "{r:?}");
}

struct Square {
    corrupt: bool,
}

impl CustomBackward for Square {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let factor = if self.corrupt { 3.0 } else { 2.0 };
        vec![Some(inputs[0].data().iter().zip(g).map(|(x, g)| factor * x * g).collect())]
    }
}

fn square(tape: &mut Tape, x: cascade_tensor::Var, corrupt: bool) -> cascade_tensor::Result<cascade_tensor::Var> {
    let v = tape.value(x);
    let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * a).collect())?;
    tape.custom(&[x], out, Box::new(Square { corrupt }))
}

#[test]
fn grad_check_flags_corrupted_backward() {
    let x = uniform([4], 0.5, 1.5, 9);
    let good = GradCheck::new(1e-3).run(|t, v| square(t, v[0], false), &[x.clone()]).unwrap();
    assert!(good.passed(), "{good:?}");
    let bad = GradCheck::new(1e-3).run(|t, v| square(t, v[0], true), &[x]).unwrap();
    assert!(!bad.passed());
    assert!(bad.worst() > 0.3);
}

#[test]
fn grad_check_rejects_non_finite_input() {
    let x = Tensor::new([2], vec![1.0, f64::NAN]).unwrap();
    assert!(GradCheck::new(1e-3).run(|t, v| t.sigmoid(v[0]), &[x]).is_err());
}

#[test]
fn correlation_all_ones() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::full([1, 4, 3, 3], 1.0));
    let c = tape.correlation(f, f).unwrap();
    assert_eq!(tape.shape(c), [1, 9, 3, 3]);
    assert!(tape.value(c).data().iter().all(|&v| v == 4.0));
}

#[test]
fn lookup_channel_count_and_center() {
    let feats = uniform([1, 8, 8, 8], -1.0, 1.0, 21);
    let mut tape = Tape::new();
    let f = tape.constant(feats);
    let mut levels = vec![tape.correlation(f, f).unwrap()];
    for _ in 0..3 {
        let l = tape.avg_pool2(*levels.last().unwrap()).unwrap();
        levels.push(l);
    }
    let flow = Tensor::zeros([1, 2, 8, 8]);
    let out = tape.lookup(&levels, &flow, 3).unwrap();
    assert_eq!(tape.shape(out), [1, 196, 8, 8]);
    let c1 = tape.value(levels[0]).data();
    let o = tape.value(out).data();
    for p in 0..64 {
        assert_eq!(o[24 * 64 + p], c1[p * 64 + p]);
    }
}

#[test]
fn eu_loss_examples() {
    let mut tape = Tape::new();
    let s = tape.constant(uniform([1, 3, 2, 2], 0.0, 1.0, 4));
    let zero = tape.constant(Tensor::zeros([1, 1, 2, 2]));
    let l = tape.eu_loss(s, s, zero, EuForm::Printed).unwrap();
    assert_eq!(tape.value(l).data(), &[0.0]);

    let s1 = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let g1 = tape.constant(Tensor::full([1, 1, 1, 1], 0.0));
    let lv = tape.constant(Tensor::zeros([1, 1, 1, 1]));
    let l = tape.eu_loss(s1, g1, lv, EuForm::Printed).unwrap();
    assert_eq!(tape.value(l).data(), &[0.5]);

    let bad = tape.constant(Tensor::zeros([1, 2, 2, 2]));
    assert!(tape.eu_loss(s, s, bad, EuForm::Printed).is_err());
}

#[test]
fn eu_loss_minimiser_matches_stationary_point() {
    // For a fixed residual norm e, ∂/∂σ² [e/(2σ²) + ½ ln σ²] = 0 at σ² = e.
    let e = 0.3;
    let grid: Vec<f64> = (1..=20000).map(|i| i as f64 * 5e-5).collect();
    let loss = |var: f64| {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::full([1, 1, 1, 1], e));
        let g = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let lv = tape.constant(Tensor::full([1, 1, 1, 1], var.ln()));
        let l = tape.eu_loss(s, g, lv, EuForm::Printed).unwrap();
        tape.value(l).data()[0]
    };
    let best = grid.iter().copied().min_by(|a, b| loss(*a).total_cmp(&loss(*b))).unwrap();
    assert!((best - e).abs() / e < 0.01, "grid minimiser {best} vs analytic {e}");
}

#[test]
fn backward_requires_scalar_and_skips_constants() {
    let mut tape = Tape::new();
    let x = tape.leaf(uniform([2, 2], -1.0, 1.0, 1).with_requires_grad(true));
    let c = tape.constant(uniform([2, 2], -1.0, 1.0, 2));
    let y = tape.mul(x, c).unwrap();
    assert!(tape.backward(y).is_err());
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), tape.value(c).data());
    assert!(g.get(c).is_none());
}

#[test]
fn instance_norm_standardises_each_plane() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new([1, 2, 1, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]).unwrap());
    let y = t.instance_norm(x, 1e-12).unwrap();
    let d = t.value(y).data();
    // μ = 2.5, σ² = 1.25
    let s = 1.25f64.sqrt();
    for (got, want) in d[..4].iter().zip([-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s]) {
        assert!((got - want).abs() < 1e-9);
    }
    assert!(d[4..].iter().all(|&v| v == 0.0));
    assert!(t.instance_norm(x, 0.0).is_err());
}
