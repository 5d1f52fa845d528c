//! Operation-level contracts of the autodiff engine: loop oracles for the
//! convolutions, analytic example values, and finite-difference checks for
//! every differentiable operation.

use pansharp_core::autodiff::{NodeId, Tape};
use pansharp_core::gradcheck::{fd_tensor_grad, max_rel_error};
use pansharp_core::kernels::PadMode;
use pansharp_core::rng::Xorshift64Star;
use pansharp_core::tensor::Tensor;

fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

fn assert_all_close(a: &Tensor<f64>, b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.numel(), b.len(), "{what}: length");
    for (i, (&x, &y)) in a.data().iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

// ---------------------------------------------------------------------------
// Independent convolution oracles: plain nested loops, written against the
// stated definition (same-size cross-correlation, odd kernels).
// ---------------------------------------------------------------------------

fn reflect_idx(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

#[allow(clippy::too_many_arguments)]
fn conv2d_oracle(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
    reflect: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let sy = y as isize + dy as isize - (kh / 2) as isize;
                            let sx = x as isize + dx as isize - (kw / 2) as isize;
                            let v = if reflect {
                                input[(ci * h + reflect_idx(sy, h)) * w + reflect_idx(sx, w)]
                            } else if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                input[(ci * h + sy as usize) * w + sx as usize]
                            } else {
                                0.0
                            };
                            acc += v * kernel[((co * cin + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(co * h + y) * w + x] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_oracle(
    input: &[f64],
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; cout * d * h * w];
    for co in 0..cout {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for dz in 0..kd {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let sz = z as isize + dz as isize - (kd / 2) as isize;
                                    let sy = y as isize + dy as isize - (kh / 2) as isize;
                                    let sx = x as isize + dx as isize - (kw / 2) as isize;
                                    if sz >= 0
                                        && sz < d as isize
                                        && sy >= 0
                                        && sy < h as isize
                                        && sx >= 0
                                        && sx < w as isize
                                    {
                                        acc += input
                                            [((ci * d + sz as usize) * h + sy as usize) * w
                                                + sx as usize]
                                            * kernel[(((co * cin + ci) * kd + dz) * kh + dy) * kw
                                                + dx];
                                    }
                                }
                            }
                        }
                    }
                    out[((co * d + z) * h + y) * w + x] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_value(
    input: Tensor<f64>,
    kernel: Tensor<f64>,
    bias: Tensor<f64>,
    pad: PadMode,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let k = tape.constant(kernel);
    let b = tape.constant(bias);
    let out = tape.conv2d(x, k, b, pad).unwrap();
    tape.value(out).clone()
}

#[test]
fn conv2d_one_by_one_identity() {
    let mut rng = Xorshift64Star::new(1);
    let input = Tensor::uniform(&[1, 4, 5], -1.0, 1.0, &mut rng);
    let kernel = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let bias = Tensor::zeros(&[1]);
    let out = conv2d_value(input.clone(), kernel, bias, PadMode::Zero);
    assert_eq!(out.data(), input.data());
}

#[test]
fn conv2d_zero_kernel_gives_constant_bias() {
    let mut rng = Xorshift64Star::new(2);
    let input = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
    let kernel = Tensor::zeros(&[2, 2, 3, 3]);
    let bias = Tensor::new(&[2], vec![0.25, -4.0]).unwrap();
    let out = conv2d_value(input, kernel, bias, PadMode::Zero);
    for i in 0..9 {
        assert_eq!(out.data()[i], 0.25);
        assert_eq!(out.data()[9 + i], -4.0);
    }
}

#[test]
fn conv2d_matches_loop_oracle() {
    for seed in 0..5u64 {
        let mut rng = Xorshift64Star::new(100 + seed);
        let input = Tensor::uniform(&[3, 5, 5], -1.0, 1.0, &mut rng);
        let kernel = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let bias = Tensor::uniform(&[2], -1.0, 1.0, &mut rng);
        for pad in [PadMode::Zero, PadMode::Reflect] {
            let want = conv2d_oracle(
                input.data(),
                3,
                5,
                5,
                kernel.data(),
                2,
                3,
                3,
                bias.data(),
                pad == PadMode::Reflect,
            );
            let got = conv2d_value(input.clone(), kernel.clone(), bias.clone(), pad);
            assert_all_close(&got, &want, 1e-6, "conv2d vs oracle");
        }
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[2, 2, 3, 3])); // Cin mismatch
    let b = tape.constant(Tensor::zeros(&[2]));
    let err = tape.conv2d(x, k, b, PadMode::Zero).unwrap_err().to_string();
    assert!(err.contains("axis 0") && err.contains("axis 1"), "{err}");

    let even = tape.constant(Tensor::zeros(&[2, 3, 2, 2]));
    let x3 = tape.constant(Tensor::zeros(&[3, 4, 4]));
    assert!(tape.conv2d(x3, even, b, PadMode::Zero).is_err());
}

#[test]
fn conv3d_one_cube_identity() {
    let mut rng = Xorshift64Star::new(3);
    let input = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(Tensor::new(&[1, 1, 1, 1, 1], vec![1.0]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    let out = tape.conv3d(x, k, b, PadMode::Zero).unwrap();
    assert_eq!(tape.value(out).data(), input.data());
}

#[test]
fn conv3d_constant_input_interior_equals_kernel_sum() {
    let mut rng = Xorshift64Star::new(4);
    let kernel = Tensor::uniform(&[1, 1, 3, 3, 3], -1.0, 1.0, &mut rng);
    let ksum: f64 = kernel.data().iter().sum();
    let input = Tensor::filled(&[1, 5, 5, 5], 0.75);
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let k = tape.constant(kernel);
    let b = tape.constant(Tensor::zeros(&[1]));
    let out = tape.conv3d(x, k, b, PadMode::Zero).unwrap();
    // interior voxels see the full kernel support
    for z in 1..4 {
        for y in 1..4 {
            for x in 1..4 {
                let v = tape.value(out).data()[(z * 5 + y) * 5 + x];
                assert_close(v, ksum * 0.75, 1e-12, "interior voxel");
            }
        }
    }
}

#[test]
fn conv3d_matches_loop_oracle() {
    for seed in 0..5u64 {
        let mut rng = Xorshift64Star::new(200 + seed);
        let input = Tensor::uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut rng);
        let kernel = Tensor::uniform(&[2, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let bias = Tensor::uniform(&[2], -1.0, 1.0, &mut rng);
        let want = conv3d_oracle(
            input.data(),
            2,
            4,
            4,
            4,
            kernel.data(),
            2,
            3,
            3,
            3,
            bias.data(),
        );
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let k = tape.constant(kernel);
        let b = tape.constant(bias);
        let out = tape.conv3d(x, k, b, PadMode::Zero).unwrap();
        assert_all_close(tape.value(out), &want, 1e-6, "conv3d vs oracle");
    }
}

#[test]
fn conv_is_linear_in_input_with_zero_bias() {
    for seed in 0..20u64 {
        let mut rng = Xorshift64Star::new(300 + seed);
        let x = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let kernel = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let bias = Tensor::zeros(&[3]);
        let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        let mix = x.zip_map(&y, |xv, yv| a * xv + b * yv);
        let f_mix = conv2d_value(mix, kernel.clone(), bias.clone(), PadMode::Zero);
        let f_x = conv2d_value(x, kernel.clone(), bias.clone(), PadMode::Zero);
        let f_y = conv2d_value(y, kernel, bias, PadMode::Zero);
        let combined = f_x.zip_map(&f_y, |xv, yv| a * xv + b * yv);
        for (g, c) in f_mix.data().iter().zip(combined.data()) {
            assert!((g - c).abs() <= 1e-5, "linearity: {g} vs {c}");
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops and losses
// ---------------------------------------------------------------------------

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let out = tape.relu(x);
    assert_eq!(tape.value(out).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn mul_by_ones_is_identity() {
    let mut rng = Xorshift64Star::new(5);
    let a = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let ones = tape.constant(Tensor::filled(&[2, 3, 3], 1.0));
    let out = tape.mul(x, ones).unwrap();
    assert_eq!(tape.value(out).data(), a.data());
}

#[test]
fn mul_rejects_incompatible_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3, 4]));
    assert!(tape.mul(a, b).is_err());
}

#[test]
fn gate_gradient_is_channel_sum_of_features() {
    // d/dS sum(S * F) must equal the channel-sum of F; checked analytically
    // and against finite differences.
    let mut rng = Xorshift64Star::new(6);
    let f = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
    let s = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let f_id = tape.constant(f.clone());
    let s_id = tape.leaf(s.clone(), true);
    let prod = tape.mul(f_id, s_id).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let grad = tape.grad(s_id).unwrap().clone();

    for y in 0..4 {
        for x in 0..4 {
            let want: f64 = (0..3).map(|c| f.data()[(c * 4 + y) * 4 + x]).sum();
            assert_close(grad.data()[y * 4 + x], want, 1e-12, "gate gradient");
        }
    }

    let fd = fd_tensor_grad(
        &s,
        |probe| {
            let mut tape = Tape::new();
            let f_id = tape.constant(f.clone());
            let s_id = tape.constant(probe.clone());
            let prod = tape.mul(f_id, s_id).unwrap();
            let loss = tape.sum(prod);
            tape.value(loss).item()
        },
        1e-4,
    );
    assert!(max_rel_error(&grad, &fd) <= 1e-4);
}

#[test]
fn l1_loss_examples() {
    let mut rng = Xorshift64Star::new(7);
    let a = Tensor::uniform(&[2, 3, 3], 0.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let y = tape.constant(a.clone());
    let same = tape.l1_loss(x, y).unwrap();
    assert_eq!(tape.value(same).item(), 0.0);

    let shifted = a.map(|v| v + 0.5);
    let x2 = tape.constant(a.clone());
    let y2 = tape.constant(shifted);
    let half = tape.l1_loss(x2, y2).unwrap();
    assert_close(tape.value(half).item(), 0.5, 1e-12, "constant offset");

    // random pair against a direct-sum oracle
    let p = Tensor::<f64>::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
    let q = Tensor::<f64>::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
    let want: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b): (&f64, &f64)| (a - b).abs())
        .sum::<f64>()
        / 48.0;
    let p_id = tape.constant(p);
    let q_id = tape.constant(q);
    let loss = tape.l1_loss(p_id, q_id).unwrap();
    assert_close(tape.value(loss).item(), want, 1e-7, "l1 vs direct sum");

    let bad = tape.constant(Tensor::zeros(&[2, 2]));
    let good = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.l1_loss(bad, good).is_err());
}

// ---------------------------------------------------------------------------
// Backward contracts
// ---------------------------------------------------------------------------

#[test]
fn backward_of_plain_sum_is_ones() {
    let mut rng = Xorshift64Star::new(8);
    let p = Tensor::<f64>::uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let p_id = tape.leaf(p, true);
    let loss = tape.sum(p_id);
    tape.backward(loss).unwrap();
    assert!(tape.grad(p_id).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_sum_of_squares_is_twice_p() {
    let mut rng = Xorshift64Star::new(9);
    let p = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let p_id = tape.leaf(p.clone(), true);
    let sq = tape.mul(p_id, p_id).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    let grad = tape.grad(p_id).unwrap();
    for (g, v) in grad.data().iter().zip(p.data()) {
        assert_close(*g, 2.0 * v, 1e-12, "sum of squares gradient");
    }
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut rng = Xorshift64Star::new(10);
    let p = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let p_id = tape.leaf(p, true);
    let sq = tape.mul(p_id, p_id).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    let first = tape.grad(p_id).unwrap().clone();
    tape.backward(loss).unwrap();
    let second = tape.grad(p_id).unwrap();
    for (a, b) in first.data().iter().zip(second.data()) {
        assert_close(*b, 2.0 * a, 1e-12, "double backward");
    }
    tape.zero_grads();
    assert!(tape.grad(p_id).is_none());
}

#[test]
fn backward_accumulates_over_shared_consumers() {
    // One node feeding two consumers: loss = sum(x*x) + sum(x), so the
    // gradient must be 2x + 1; also cross-checked with finite differences.
    let mut rng = Xorshift64Star::new(11);
    let x = Tensor::uniform(&[5], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let x_id = tape.leaf(x.clone(), true);
    let sq = tape.mul(x_id, x_id).unwrap();
    let s1 = tape.sum(sq);
    let s2 = tape.sum(x_id);
    let loss = tape.add(s1, s2).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(x_id).unwrap().clone();
    for (g, v) in grad.data().iter().zip(x.data()) {
        assert_close(*g, 2.0 * v + 1.0, 1e-12, "fan-out gradient");
    }
    let fd = fd_tensor_grad(
        &x,
        |probe| {
            let mut tape = Tape::new();
            let x_id = tape.constant(probe.clone());
            let sq = tape.mul(x_id, x_id).unwrap();
            let s1 = tape.sum(sq);
            let s2 = tape.sum(x_id);
            let loss = tape.add(s1, s2).unwrap();
            tape.value(loss).item()
        },
        1e-5,
    );
    assert!(max_rel_error(&grad, &fd) <= 1e-4);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
    let doubled = tape.scalar_mul(x, 2.0);
    assert!(tape.backward(doubled).is_err());
}

// ---------------------------------------------------------------------------
// Finite-difference sweep over every differentiable operation
// ---------------------------------------------------------------------------

/// Checks d(sum(w ⊙ op(x)))/dx against finite differences, where `w` is a
/// fixed random weighting that makes the upstream gradient non-uniform.
fn check_op_gradient<F>(seed: u64, x: Tensor<f64>, build: F)
where
    F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
{
    // discover the output shape
    let out_shape = {
        let mut tape = Tape::new();
        let x_id = tape.constant(x.clone());
        let out = build(&mut tape, x_id);
        tape.value(out).shape().to_vec()
    };
    let mut rng = Xorshift64Star::new(seed ^ 0xABCD);
    let w = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let x_id = tape.leaf(x.clone(), true);
    let out = build(&mut tape, x_id);
    let w_id = tape.constant(w.clone());
    let prod = tape.mul(out, w_id).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x_id).expect("gradient reaches input").clone();

    let fd = fd_tensor_grad(
        &x,
        |probe| {
            let mut tape = Tape::new();
            let x_id = tape.constant(probe.clone());
            let out = build(&mut tape, x_id);
            let w_id = tape.constant(w.clone());
            let prod = tape.mul(out, w_id).unwrap();
            let loss = tape.sum(prod);
            tape.value(loss).item()
        },
        1e-4,
    );
    let err = max_rel_error(&analytic, &fd);
    assert!(err <= 1e-4, "seed {seed}: max rel error {err}");
}

/// Uniform values kept away from zero (relu/clamp kinks).
fn away_from_kinks(shape: &[usize], rng: &mut Xorshift64Star) -> Tensor<f64> {
    Tensor::<f64>::uniform(shape, -1.0, 1.0, rng).map(|v: f64| v + 0.2 * v.signum())
}

#[test]
fn gradient_sweep_over_all_operations() {
    for seed in 0..20u64 {
        let mut rng = Xorshift64Star::new(1000 + seed);
        let kernel2 = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let bias2 = Tensor::uniform(&[3], -0.5, 0.5, &mut rng);
        let x2 = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        for pad in [PadMode::Zero, PadMode::Reflect] {
            // wrt conv input
            let (k, b) = (kernel2.clone(), bias2.clone());
            check_op_gradient(seed, x2.clone(), move |tape, x| {
                let k = tape.constant(k.clone());
                let b = tape.constant(b.clone());
                tape.conv2d(x, k, b, pad).unwrap()
            });
            // wrt conv kernel
            let xc = x2.clone();
            let b = bias2.clone();
            check_op_gradient(seed, kernel2.clone(), move |tape, kid| {
                let x = tape.constant(xc.clone());
                let b = tape.constant(b.clone());
                tape.conv2d(x, kid, b, pad).unwrap()
            });
        }
        // conv2d wrt bias
        let (xc, kc) = (x2.clone(), kernel2.clone());
        check_op_gradient(seed, bias2.clone(), move |tape, bid| {
            let x = tape.constant(xc.clone());
            let k = tape.constant(kc.clone());
            tape.conv2d(x, k, bid, PadMode::Zero).unwrap()
        });

        // conv3d wrt input and kernel
        let kernel3 = Tensor::uniform(&[2, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let bias3 = Tensor::uniform(&[2], -0.5, 0.5, &mut rng);
        let x3 = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let (k, b) = (kernel3.clone(), bias3.clone());
        check_op_gradient(seed, x3.clone(), move |tape, x| {
            let k = tape.constant(k.clone());
            let b = tape.constant(b.clone());
            tape.conv3d(x, k, b, PadMode::Zero).unwrap()
        });
        let b = bias3.clone();
        check_op_gradient(seed, kernel3.clone(), move |tape, kid| {
            let x = tape.constant(x3.clone());
            let b = tape.constant(b.clone());
            tape.conv3d(x, kid, b, PadMode::Zero).unwrap()
        });

        // relu away from the kink
        check_op_gradient(seed, away_from_kinks(&[3, 4, 4], &mut rng), |tape, x| {
            tape.relu(x)
        });

        // clamp inside (0,1)
        let inside = Tensor::uniform(&[2, 3, 3], 0.1, 0.9, &mut rng);
        check_op_gradient(seed, inside, |tape, x| tape.clamp_unit(x));

        // add / scalar_mul / reshape / concat
        let other = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let o = other.clone();
        check_op_gradient(seed, x2.clone(), move |tape, x| {
            let y = tape.constant(o.clone());
            tape.add(x, y).unwrap()
        });
        check_op_gradient(seed, x2.clone(), |tape, x| tape.scalar_mul(x, -1.75));
        check_op_gradient(seed, x2.clone(), |tape, x| tape.reshape(x, &[4, 2, 4]).unwrap());
        let o = other.clone();
        check_op_gradient(seed, x2.clone(), move |tape, x| {
            let y = tape.constant(o.clone());
            tape.concat_channels(&[y, x]).unwrap()
        });

        // elementwise mul and the broadcast gate, both sides
        let o = other.clone();
        check_op_gradient(seed, x2.clone(), move |tape, x| {
            let y = tape.constant(o.clone());
            tape.mul(x, y).unwrap()
        });
        let gate = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
        let g = gate.clone();
        check_op_gradient(seed, x2.clone(), move |tape, x| {
            let g = tape.constant(g.clone());
            tape.mul(x, g).unwrap()
        });
        let xc = x2.clone();
        check_op_gradient(seed, gate, move |tape, g| {
            let x = tape.constant(xc.clone());
            tape.mul(x, g).unwrap()
        });

        // unfold / fold
        let feat = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        check_op_gradient(seed, feat.clone(), |tape, x| tape.unfold(x, 3).unwrap());
        let patches = Tensor::uniform(&[16, 18], -1.0, 1.0, &mut rng);
        check_op_gradient(seed, patches, |tape, x| {
            tape.fold_mean(x, 2, 4, 4, 3).unwrap()
        });

        // relevance wrt queries and keys (dense upstream gradient)
        let q = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let kk = Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng);
        let k2 = kk.clone();
        check_op_gradient(seed, q.clone(), move |tape, qid| {
            let k = tape.constant(k2.clone());
            tape.relevance(qid, k).unwrap()
        });
        check_op_gradient(seed, kk, move |tape, kid| {
            let q = tape.constant(q.clone());
            tape.relevance(q, kid).unwrap()
        });

        // row max (fixed random matrix; margins make argmax stable under fd)
        let m = Tensor::uniform(&[5, 7], -1.0, 1.0, &mut rng);
        check_op_gradient(seed, m, |tape, x| tape.row_max(x).unwrap().0);

        // gather rows with repeated indices
        let v = Tensor::uniform(&[6, 5], -1.0, 1.0, &mut rng);
        check_op_gradient(seed, v, |tape, x| {
            tape.gather_rows(x, vec![2, 2, 0, 5, 1]).unwrap()
        });

        // l1 loss wrt predictions
        let target = Tensor::<f64>::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        // keep |pred - target| away from the |.| kink
        let pred = target.zip_map(
            &Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng),
            |t: f64, d: f64| t + d + 0.2 * d.signum(),
        );
        let t = target.clone();
        check_op_gradient(seed, pred, move |tape, p| {
            let t = tape.constant(t.clone());
            tape.l1_loss(p, t).unwrap()
        });
    }
}
