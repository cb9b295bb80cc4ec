//! Finite-difference checks for every tape op, in double precision.

use ndarray::{Array1, Array3, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference, max_relative_error, Tape, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Checks d(scalar out)/d(each input) against central differences.
/// `build` maps leaf vars to the scalar output var.
fn check<Build>(shapes: &[&[usize]], seed: u64, build: Build)
where
    Build: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| rand_arr(&mut rng, s)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);

    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
        let fd = finite_difference(x, STEP, |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, a)| t.var(if j == i { probe.clone() } else { a.clone() }))
                .collect();
            let o = build(&mut t, &vs);
            t.scalar(o)
        });
        let err = max_relative_error(&analytic, &fd);
        assert!(
            err < TOL,
            "input {i}: max relative gradient error {err:.3e} exceeds {TOL:.0e}"
        );
    }
}

#[test]
fn grad_conv2d_stride1() {
    check(&[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]], 11, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1);
        t.sum_all(y)
    });
}

#[test]
fn grad_conv2d_stride2() {
    check(&[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], 12, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 1);
        t.sum_all(y)
    });
}

#[test]
fn grad_conv2d_1x1() {
    check(&[&[1, 4, 3, 3], &[2, 4, 1, 1], &[2]], 13, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 0);
        t.sum_all(y)
    });
}

#[test]
fn grad_elementwise_chain() {
    // add/sub/mul/scale composed, with reconvergent fan-out.
    check(&[&[2, 1, 3, 3], &[2, 1, 3, 3]], 14, |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(v[0], v[1]);
        let p = t.mul(s, d);
        let p2 = t.scale(p, 0.7);
        let q = t.mul(p2, v[0]);
        t.sum_all(q)
    });
}

#[test]
fn grad_mul_bcast_channel() {
    check(&[&[2, 1, 4, 4], &[2, 3, 4, 4]], 15, |t, v| {
        let y = t.mul_bcast_c(v[0], v[1]);
        let y2 = t.add(y, v[1]);
        t.sum_all(y2)
    });
}

#[test]
fn grad_abs() {
    // Values bounded away from 0 so the kink is not sampled.
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = ArrayD::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |_| {
        let v: f64 = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let mut tape = Tape::new();
    let v = tape.var(x.clone());
    let y = tape.abs(v);
    let out = tape.sum_all(y);
    let grads = tape.backward(out);
    let fd = finite_difference(&x, STEP, |probe| {
        let mut t = Tape::new();
        let v = t.var(probe.clone());
        let y = t.abs(v);
        let o = t.sum_all(y);
        t.scalar(o)
    });
    assert!(max_relative_error(grads.wrt(v).unwrap(), &fd) < TOL);
}

#[test]
fn grad_activations() {
    for (seed, which) in [(17, "sigmoid"), (18, "relu"), (19, "silu")] {
        check(&[&[1, 2, 4, 4]], seed, |t, v| {
            let weighted = t.scale(v[0], 1.3);
            let y = match which {
                "sigmoid" => t.sigmoid(weighted),
                "relu" => t.relu(weighted),
                _ => t.silu(weighted),
            };
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
    }
}

#[test]
fn grad_glu() {
    check(&[&[1, 4, 3, 3]], 20, |t, v| {
        let y = t.glu(v[0]);
        t.sum_all(y)
    });
}

#[test]
fn grad_pool_and_upsample() {
    check(&[&[1, 2, 4, 4]], 21, |t, v| {
        let d = t.avg_pool2(v[0]);
        let u = t.nearest_up2(d);
        let y = t.mul(u, v[0]);
        t.sum_all(y)
    });
}

#[test]
fn grad_resize_bilinear() {
    check(&[&[1, 2, 4, 6]], 22, |t, v| {
        let r = t.resize_bilinear(v[0], 7, 3);
        let sq = t.mul(r, r);
        t.sum_all(sq)
    });
    // Exact 2x up and 0.5x down.
    check(&[&[1, 1, 4, 4]], 23, |t, v| {
        let up = t.upsample2(v[0]);
        let down = t.resize_bilinear(up, 2, 2);
        let sq = t.mul(down, down);
        t.sum_all(sq)
    });
}

#[test]
fn grad_concat() {
    check(&[&[1, 2, 3, 3], &[1, 3, 3, 3]], 24, |t, v| {
        let c = t.concat_c(&[v[0], v[1]]);
        let sq = t.mul(c, c);
        t.sum_all(sq)
    });
}

#[test]
fn grad_bce_mean() {
    // Probabilities strictly inside the clamp band.
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let p = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.gen_range(0.05..0.95));
    let target = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| {
        if rng.gen_bool(0.5) {
            1.0
        } else {
            0.0
        }
    });
    let mut tape = Tape::new();
    let pv = tape.var(p.clone());
    let tv = tape.constant(target.clone());
    let out = tape.bce_mean(pv, tv);
    let grads = tape.backward(out);
    let fd = finite_difference(&p, STEP, |probe| {
        let mut t = Tape::new();
        let pv = t.var(probe.clone());
        let tv = t.constant(target.clone());
        let o = t.bce_mean(pv, tv);
        t.scalar(o)
    });
    assert!(max_relative_error(grads.wrt(pv).unwrap(), &fd) < 1e-5);
}

#[test]
fn grad_mse_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let p = rand_arr(&mut rng, &[3, 5]);
    let target = rand_arr(&mut rng, &[3, 5]);
    let mut tape = Tape::new();
    let pv = tape.var(p.clone());
    let tv = tape.constant(target.clone());
    let out = tape.mse_mean(pv, tv);
    let grads = tape.backward(out);
    let fd = finite_difference(&p, STEP, |probe| {
        let mut t = Tape::new();
        let pv = t.var(probe.clone());
        let tv = t.constant(target.clone());
        let o = t.mse_mean(pv, tv);
        t.scalar(o)
    });
    assert!(max_relative_error(grads.wrt(pv).unwrap(), &fd) < TOL);
}

#[test]
fn grad_weighted_sum() {
    check(&[&[2, 2], &[3]], 26, |t, v| {
        let s1 = t.sum_all(v[0]);
        let s2 = t.sum_all(v[1]);
        t.weighted_sum(&[(s1, 0.25), (s2, -1.5)])
    });
}

#[test]
fn grad_tokens_roundtrip() {
    check(&[&[1, 3, 2, 4]], 27, |t, v| {
        let tok = t.spatial_to_tokens(v[0]);
        let sp = t.tokens_to_spatial(tok, 2, 4);
        let y = t.mul(sp, v[0]);
        t.sum_all(y)
    });
}

#[test]
fn grad_batmatmul_and_softmax() {
    check(&[&[2, 3, 4], &[2, 4, 3]], 28, |t, v| {
        let y = t.bat_mat_mul(v[0], v[1], false);
        let s = t.softmax_last(y);
        let sq = t.mul(s, s);
        t.sum_all(sq)
    });
    check(&[&[2, 3, 4], &[2, 5, 4]], 29, |t, v| {
        let y = t.bat_mat_mul(v[0], v[1], true);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });
}

#[test]
fn weight_sharing_accumulates_fan_out() {
    // Using the same param leaf twice must sum both contributions.
    let mut store = crate::nn::ParamStore::<f64>::new();
    store.insert("w", ArrayD::from_elem(IxDyn(&[1]), 3.0));
    let mut tape = Tape::new();
    let w = tape.param(&store, "w");
    let w_again = tape.param(&store, "w");
    assert_eq!(w, w_again, "param leaves are memoized");
    let prod = tape.mul(w, w_again); // w^2
    let out = tape.sum_all(prod);
    let grads = tape.backward(out);
    tape.export_param_grads(&grads, &mut store);
    // d(w^2)/dw = 2w = 6
    assert_eq!(store.get("w").grad[[0]], 6.0);
}

#[test]
fn frozen_params_get_no_grads_but_pass_them_through() {
    let mut store = crate::nn::ParamStore::<f64>::new();
    store.insert("w", ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 2.0));
    store.insert("b", ArrayD::zeros(IxDyn(&[1])));
    store.set_trainable("w", false);
    store.set_trainable("b", false);

    let mut tape = Tape::new();
    let x = tape.var(Array4::from_elem((1, 1, 2, 2), 1.5).into_dyn());
    let w = tape.param(&store, "w");
    let b = tape.param(&store, "b");
    let y = tape.conv2d(x, w, b, 1, 0);
    let out = tape.sum_all(y);
    let grads = tape.backward(out);

    // Gradient flows through the frozen conv into x: dy/dx = w = 2.
    let gx = grads.wrt(x).unwrap();
    assert!(gx.iter().all(|&g| (g - 2.0).abs() < 1e-12));
    assert!(grads.wrt(w).is_none());

    tape.export_param_grads(&grads, &mut store);
    assert!(store.get("w").grad.iter().all(|&g| g == 0.0));
}

#[test]
fn conv_forward_matches_direct_loops() {
    // Independent straight-line convolution as an oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = Array4::from_shape_fn((2, 3, 5, 6), |_| rng.gen_range(-1.0..1.0f64));
    let w = Array4::from_shape_fn((4, 3, 3, 3), |_| rng.gen_range(-1.0..1.0f64));
    let b = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0f64));
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let fast = super::kernels::conv2d_forward(&x.view(), &w, &b, stride, pad);
        let oh = super::kernels::conv_out_size(5, 3, stride, pad);
        let ow = super::kernels::conv_out_size(6, 3, stride, pad);
        let mut naive = Array4::<f64>::zeros((2, 4, oh, ow));
        for bi in 0..2 {
            for oc in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || iy >= 5 || ix < 0 || ix >= 6 {
                                        continue;
                                    }
                                    acc += x[[bi, ic, iy as usize, ix as usize]]
                                        * w[[oc, ic, ky, kx]];
                                }
                            }
                        }
                        naive[[bi, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        let diff = (&fast - &naive).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "stride {stride} pad {pad}: {diff}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = Array3::from_shape_fn((2, 3, 5), |_| rng.gen_range(-4.0..4.0f64));
    let mut tape = Tape::new();
    let v = tape.constant(x.into_dyn());
    let s = tape.softmax_last(v);
    let sv = tape.value(s);
    for b in 0..2 {
        for n in 0..3 {
            let sum: f64 = (0..5).map(|m| sv[[b, n, m]]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
