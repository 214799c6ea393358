//! Kernel and gradient correctness.
//!
//! Two layers of defense: the convolution/pooling kernels are held to exact
//! (`==`) equality against naive per-output-pixel references that follow the
//! same accumulation-order contract, and every differentiable op — alone and
//! composed into a miniature perception-to-control graph — is checked against
//! central finite differences in f64.

use lidarpilot_core::tensorgrad::gradcheck::{finite_diff, rel_err, DEFAULT_EPS};
use lidarpilot_core::tensorgrad::{
    conv2d_out_dims, ConvGeom, Grads, GruVars, ParamId, Params, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values bounded away from zero, for inputs feeding a relu or an L1
/// tie: |v| in [0.05, 1.0].
fn rand_tensor_off_zero(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// All-distinct values with pairwise gaps >= 0.01, so max-pool argmaxes are
/// stable under finite-difference probes.
fn rand_distinct_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64) * 0.01 - (n as f64) * 0.005).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::from_vec(shape, vals).unwrap()
}

/// Checks every element of every parameter against a central finite
/// difference of the scalar loss built by `build`.
fn assert_grads_match<F>(params: &mut Params<f64>, build: F, tol: f64)
where
    F: Fn(&mut Tape<'_, f64>) -> Var,
{
    let analytic: Grads<f64> = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape);
        assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
        tape.backward(loss).unwrap()
    };
    let ids: Vec<ParamId> = params.ids().collect();
    let mut checked = 0usize;
    for id in ids {
        for e in 0..params.value(id).len() {
            let fd = finite_diff(params, id, e, DEFAULT_EPS, |p| {
                let mut tape = Tape::new(p);
                let loss = build(&mut tape);
                tape.value(loss).item()
            });
            let an = analytic.get(id).data()[e];
            let err = rel_err(an, fd);
            assert!(
                err < tol,
                "grad mismatch at {}[{}]: analytic {an:.12e} vs finite-diff {fd:.12e} (rel {err:.3e})",
                params.name(id),
                e
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

// ---------------------------------------------------------------------------
// Naive references (same accumulation order as the production kernels).
// ---------------------------------------------------------------------------

fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
    let (c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oc, ic, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, ic);
    let (oh, ow) = conv2d_out_dims((c, h, wid), (kh, kw), geom).unwrap();
    let mut out = vec![0.0f64; oc * oh * ow];
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o];
                for i in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * geom.stride.0 + ky * geom.dilation.0) as isize
                            - geom.padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * geom.stride.1 + kx * geom.dilation.1) as isize
                                - geom.padding.1 as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            acc += x.data()[(i * h + iy as usize) * wid + ix as usize]
                                * w.data()[((o * ic + i) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[oc, oh, ow], out).unwrap()
}

fn naive_max_pool(x: &Tensor<f64>, kernel: (usize, usize)) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = kernel;
    let (oh, ow) = (h / kh, w / kw);
    let mut out = vec![0.0f64; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let v = x.data()[(ch * h + oy * kh + ky) * w + ox * kw + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).unwrap()
}

fn naive_avg_pool(x: &Tensor<f64>, kernel: (usize, usize)) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = kernel;
    let (oh, ow) = (h / kh, w / kw);
    let denom = (kh * kw) as f64;
    let mut out = vec![0.0f64; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        acc += x.data()[(ch * h + oy * kh + ky) * w + ox * kw + kx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc / denom;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).unwrap()
}

/// Runs one conv through the tape and returns its forward value.
fn tape_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
    let mut params = Params::new();
    let wid = params.add("w", w.clone());
    let bid = params.add("b", b.clone());
    let mut tape = Tape::new(&params);
    let xv = tape.constant(x.clone());
    let wv = tape.param(wid);
    let bv = tape.param(bid);
    let y = tape.conv2d(xv, wv, bv, geom).unwrap();
    tape.value(y).clone()
}

// ---------------------------------------------------------------------------
// Forward equivalence with the naive references.
// ---------------------------------------------------------------------------

#[test]
fn conv_forward_matches_naive_reference_exactly() {
    let mut r = rng(11);
    let geoms = [
        ConvGeom::unit(),
        ConvGeom::same(1),
        ConvGeom::same(2),
        ConvGeom { stride: (2, 2), dilation: (1, 1), padding: (0, 0) },
        ConvGeom { stride: (1, 2), dilation: (1, 1), padding: (2, 1) },
        ConvGeom { stride: (2, 1), dilation: (2, 1), padding: (1, 0) },
    ];
    let cases = [
        ((1usize, 5usize, 7usize), (1usize, 1usize, 1usize)),
        ((3, 8, 9), (4, 3, 3)),
        ((2, 9, 6), (3, 2, 4)),
        ((4, 7, 7), (2, 3, 3)),
    ];
    let mut compared = 0usize;
    for geom in geoms {
        for ((c, h, w), (oc, kh, kw)) in cases {
            if conv2d_out_dims((c, h, w), (kh, kw), geom).is_none() {
                continue;
            }
            let x = rand_tensor(&mut r, &[c, h, w]);
            let wt = rand_tensor(&mut r, &[oc, c, kh, kw]);
            let b = rand_tensor(&mut r, &[oc]);
            let got = tape_conv(&x, &wt, &b, geom);
            let want = naive_conv2d(&x, &wt, &b, geom);
            assert_eq!(got.shape(), want.shape());
            assert_eq!(got.data(), want.data(), "geom {geom:?} case {c}x{h}x{w}");
            compared += 1;
        }
    }
    assert!(compared >= 20);
}

#[test]
fn conv_forward_skips_zero_rows_without_changing_results() {
    let mut r = rng(12);
    // Grid-like sparsity: whole channels empty, plus empty row bands.
    let (c, h, w) = (6usize, 10usize, 12usize);
    let mut x = Tensor::zeros(&[c, h, w]);
    for ch in [1usize, 4] {
        for row in 3..6 {
            for col in 0..w {
                x.data_mut()[(ch * h + row) * w + col] = r.gen_range(-1.0..1.0);
            }
        }
    }
    for geom in [ConvGeom::same(1), ConvGeom::same(2), ConvGeom { stride: (2, 2), dilation: (1, 1), padding: (1, 1) }] {
        let wt = rand_tensor(&mut r, &[3, c, 3, 3]);
        let b = rand_tensor(&mut r, &[3]);
        let got = tape_conv(&x, &wt, &b, geom);
        let want = naive_conv2d(&x, &wt, &b, geom);
        assert_eq!(got.data(), want.data(), "geom {geom:?}");
    }
}

#[test]
fn pointwise_conv_equals_unit_conv_bitwise() {
    let mut r = rng(13);
    let x = rand_tensor(&mut r, &[5, 6, 7]);
    let w = rand_tensor(&mut r, &[3, 5, 1, 1]);
    let b = rand_tensor(&mut r, &[3]);

    let mut params = Params::new();
    let wid4 = params.add("w4", w.clone());
    let wid2 = params.add("w2", w.reshaped(&[3, 5]).unwrap());
    let bid = params.add("b", b.clone());
    let mut tape = Tape::new(&params);
    let xv = tape.constant(x.clone());
    let w4v = tape.param(wid4);
    let w2v = tape.param(wid2);
    let bv = tape.param(bid);
    let via_conv = tape.conv2d(xv, w4v, bv, ConvGeom::unit()).unwrap();
    let via_pw = tape.pointwise_conv(xv, w2v, bv).unwrap();
    assert_eq!(tape.value(via_conv).data(), tape.value(via_pw).data());
}

#[test]
fn max_pool_matches_naive_reference() {
    let mut r = rng(14);
    for (shape, kernel) in [
        (&[3usize, 8, 8][..], (2usize, 2usize)),
        (&[2, 12, 8][..], (4, 2)),
        (&[21, 8, 16][..], (2, 4)),
    ] {
        let x = rand_tensor(&mut r, shape);
        let mut params = Params::new();
        let _ = params.add("unused", Tensor::scalar(0.0));
        let mut tape = Tape::new(&params);
        let xv = tape.constant(x.clone());
        let y = tape.max_pool2d(xv, kernel).unwrap();
        assert_eq!(tape.value(y).data(), naive_max_pool(&x, kernel).data());
    }
}

#[test]
fn avg_pool_matches_naive_reference() {
    let mut r = rng(15);
    let x = rand_tensor(&mut r, &[4, 6, 10]);
    let mut params = Params::new();
    let _ = params.add("unused", Tensor::scalar(0.0));
    let mut tape = Tape::new(&params);
    let xv = tape.constant(x.clone());
    let y = tape.avg_pool2d(xv, (3, 2)).unwrap();
    assert_eq!(tape.value(y).data(), naive_avg_pool(&x, (3, 2)).data());
}

// ---------------------------------------------------------------------------
// Finite-difference checks, op by op.
// ---------------------------------------------------------------------------

#[test]
fn dense_grads_match_finite_differences() {
    let mut r = rng(21);
    let mut params = Params::new();
    let x = params.add("x", rand_tensor(&mut r, &[7]));
    let w = params.add("w", rand_tensor(&mut r, &[4, 7]));
    let b = params.add("b", rand_tensor(&mut r, &[4]));
    // target far from the dense output keeps |pred - target| > 0
    let mut target = rand_tensor_off_zero(&mut r, &[4]);
    for v in target.data_mut() {
        *v += if *v > 0.0 { 3.0 } else { -3.0 };
    }
    assert_grads_match(
        &mut params,
        move |tape| {
            let xv = tape.param(x);
            let wv = tape.param(w);
            let bv = tape.param(b);
            let y = tape.dense(xv, wv, bv).unwrap();
            let t = tape.constant(target.clone());
            tape.l1_mean(y, t).unwrap()
        },
        1e-7,
    );
}

#[test]
fn conv_grads_match_finite_differences() {
    for (seed, geom) in [
        (31u64, ConvGeom::same(1)),
        (32, ConvGeom::same(2)),
        (33, ConvGeom { stride: (2, 2), dilation: (1, 1), padding: (1, 1) }),
    ] {
        let mut r = rng(seed);
        let mut params = Params::new();
        let x = params.add("x", rand_tensor(&mut r, &[2, 6, 7]));
        let w1 = params.add("w1", rand_tensor(&mut r, &[3, 2, 3, 3]));
        let b1 = params.add("b1", rand_tensor(&mut r, &[3]));
        let w2 = params.add("w2", rand_tensor(&mut r, &[2, 3, 3, 3]));
        let b2 = params.add("b2", rand_tensor(&mut r, &[2]));
        if conv2d_out_dims((3, 6, 7), (3, 3), geom).is_none() {
            continue;
        }
        assert_grads_match(
            &mut params,
            move |tape| {
                let xv = tape.param(x);
                let w1v = tape.param(w1);
                let b1v = tape.param(b1);
                let mid = tape.conv2d(xv, w1v, b1v, ConvGeom::same(1)).unwrap();
                let w2v = tape.param(w2);
                let b2v = tape.param(b2);
                let out = tape.conv2d(mid, w2v, b2v, geom).unwrap();
                let g = tape.global_avg_pool(out).unwrap();
                // a target far outside the reachable range keeps the L1 away
                // from its tie point, so the probe stays in a linear region
                let t = tape.constant(Tensor::filled(&[tape.value(g).len()], 50.0));
                tape.l1_mean(g, t).unwrap()
            },
            1e-7,
        );
    }
}

#[test]
fn pool_grads_match_finite_differences() {
    let mut r = rng(41);
    let mut params = Params::new();
    let x = params.add("x", rand_distinct_tensor(&mut r, &[2, 6, 8]));
    assert_grads_match(
        &mut params,
        |tape| {
            let xv = tape.param(x);
            let m = tape.max_pool2d(xv, (2, 2)).unwrap();
            let a = tape.avg_pool2d(m, (1, 2)).unwrap();
            let g = tape.global_avg_pool(a).unwrap();
            let t = tape.constant(Tensor::filled(&[2], -10.0));
            tape.l1_mean(g, t).unwrap()
        },
        1e-7,
    );
}

#[test]
fn activation_and_glue_grads_match_finite_differences() {
    let mut r = rng(51);
    let mut params = Params::new();
    // relu inputs bounded away from its kink
    let a = params.add("a", rand_tensor_off_zero(&mut r, &[6]));
    let b = params.add("b", rand_tensor(&mut r, &[6]));
    let c = params.add("c", rand_tensor(&mut r, &[3]));
    assert_grads_match(
        &mut params,
        |tape| {
            let av = tape.param(a);
            let bv = tape.param(b);
            let cv = tape.param(c);
            let r1 = tape.relu(av);
            let t1 = tape.tanh(bv);
            let s = tape.add(r1, t1).unwrap();
            let s = tape.scale(s, -0.7);
            let g = tape.sigmoid(cv);
            let cat = tape.concat_vec(&[s, g]).unwrap();
            let t = tape.constant(Tensor::filled(&[9], 4.0));
            tape.l1_mean(cat, t).unwrap()
        },
        1e-7,
    );
}

#[test]
fn concat_channels_grads_match_finite_differences() {
    let mut r = rng(61);
    let mut params = Params::new();
    let a = params.add("a", rand_tensor(&mut r, &[2, 4, 5]));
    let b = params.add("b", rand_tensor(&mut r, &[3, 4, 5]));
    assert_grads_match(
        &mut params,
        |tape| {
            let av = tape.param(a);
            let bv = tape.param(b);
            let cat = tape.concat_channels(av, bv).unwrap();
            let g = tape.global_avg_pool(cat).unwrap();
            let t = tape.constant(Tensor::filled(&[5], 7.0));
            tape.l1_mean(g, t).unwrap()
        },
        1e-7,
    );
}

#[test]
fn gru_grads_match_finite_differences() {
    let mut r = rng(71);
    let (nx, nh) = (3usize, 4usize);
    let mut params = Params::new();
    let x1 = params.add("x1", rand_tensor(&mut r, &[nx]));
    let x2 = params.add("x2", rand_tensor(&mut r, &[nx]));
    let h0 = params.add("h0", rand_tensor(&mut r, &[nh]));
    let names = ["wz", "wr", "wc", "uz", "ur", "uc", "bz", "br", "bc"];
    let mut ids = Vec::new();
    for (i, n) in names.iter().enumerate() {
        let shape: &[usize] = if i < 3 {
            &[nh, nx]
        } else if i < 6 {
            &[nh, nh]
        } else {
            &[nh]
        };
        ids.push(params.add(n, rand_tensor(&mut r, shape)));
    }
    assert_grads_match(
        &mut params,
        |tape| {
            let gv = GruVars {
                wz: tape.param(ids[0]),
                wr: tape.param(ids[1]),
                wc: tape.param(ids[2]),
                uz: tape.param(ids[3]),
                ur: tape.param(ids[4]),
                uc: tape.param(ids[5]),
                bz: tape.param(ids[6]),
                br: tape.param(ids[7]),
                bc: tape.param(ids[8]),
            };
            let x1v = tape.param(x1);
            let x2v = tape.param(x2);
            let h0v = tape.param(h0);
            // three chained steps; x1 feeds steps 1 and 3 so its gradient
            // accumulates across two uses
            let h1 = tape.gru_cell(x1v, h0v, &gv).unwrap();
            let h2 = tape.gru_cell(x2v, h1, &gv).unwrap();
            let h3 = tape.gru_cell(x1v, h2, &gv).unwrap();
            let t = tape.constant(Tensor::filled(&[nh], 5.0));
            tape.l1_mean(h3, t).unwrap()
        },
        1e-6,
    );
}

#[test]
fn l1_mean_gradient_is_zero_at_exact_ties() {
    let mut params = Params::new();
    let x = params.add("x", Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap());
    let mut tape = Tape::new(&params);
    let xv = tape.param(x);
    // target matches element 1 exactly; elements 0 and 2 differ in sign
    let t = tape.constant(Tensor::from_vec(&[3], vec![0.0f64, -2.0, 1.5]).unwrap());
    let loss = tape.l1_mean(xv, t).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(x).data();
    let third = 1.0 / 3.0;
    assert_eq!(g, &[third, 0.0, -third]);
}

// ---------------------------------------------------------------------------
// Composite graph shaped like the real model (miniature).
// ---------------------------------------------------------------------------

struct MiniNet {
    front_w: ParamId,
    front_b: ParamId,
    bev_w: ParamId,
    bev_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    gru: [ParamId; 9],
    head_steer_w: ParamId,
    head_steer_b: ParamId,
    head_throt_w: ParamId,
    head_throt_b: ParamId,
    head_wp_w: ParamId,
    head_wp_b: ParamId,
}

fn mini_net(params: &mut Params<f64>, r: &mut ChaCha20Rng) -> MiniNet {
    let nh = 5usize;
    let gru_names = ["gz.w", "gr.w", "gc.w", "gz.u", "gr.u", "gc.u", "gz.b", "gr.b", "gc.b"];
    let mut gru = Vec::new();
    for (i, n) in gru_names.iter().enumerate() {
        let shape: &[usize] = if i < 3 {
            &[nh, 6]
        } else if i < 6 {
            &[nh, nh]
        } else {
            &[nh]
        };
        gru.push(params.add(n, rand_tensor(r, shape)));
    }
    MiniNet {
        front_w: params.add("front.w", rand_tensor(r, &[4, 3, 3, 3])),
        front_b: params.add("front.b", rand_tensor(r, &[4])),
        bev_w: params.add("bev.w", rand_tensor(r, &[4, 3])),
        bev_b: params.add("bev.b", rand_tensor(r, &[4])),
        fuse_w: params.add("fuse.w", rand_tensor(r, &[6, 8])),
        fuse_b: params.add("fuse.b", rand_tensor(r, &[6])),
        gru: gru.try_into().unwrap(),
        head_steer_w: params.add("steer.w", rand_tensor(r, &[1, 5])),
        head_steer_b: params.add("steer.b", rand_tensor(r, &[1])),
        head_throt_w: params.add("throt.w", rand_tensor(r, &[1, 5])),
        head_throt_b: params.add("throt.b", rand_tensor(r, &[1])),
        head_wp_w: params.add("wp.w", rand_tensor(r, &[2, 5])),
        head_wp_b: params.add("wp.b", rand_tensor(r, &[2])),
    }
}

fn mini_forward(
    tape: &mut Tape<'_, f64>,
    net: &MiniNet,
    front_in: &Tensor<f64>,
    bev_in: &Tensor<f64>,
) -> (Var, Var) {
    let fi = tape.constant(front_in.clone());
    let bi = tape.constant(bev_in.clone());
    let fw = tape.param(net.front_w);
    let fb = tape.param(net.front_b);
    let f = tape.conv2d(fi, fw, fb, ConvGeom::same(1)).unwrap();
    let f = tape.relu(f);
    let f = tape.max_pool2d(f, (2, 2)).unwrap();
    let f = tape.global_avg_pool(f).unwrap();

    let bw = tape.param(net.bev_w);
    let bb = tape.param(net.bev_b);
    let b = tape.pointwise_conv(bi, bw, bb).unwrap();
    let b = tape.tanh(b);
    let b = tape.avg_pool2d(b, (2, 2)).unwrap();
    let b = tape.global_avg_pool(b).unwrap();

    let cat = tape.concat_vec(&[f, b]).unwrap();
    let fw2 = tape.param(net.fuse_w);
    let fb2 = tape.param(net.fuse_b);
    let fused = tape.dense(cat, fw2, fb2).unwrap();
    let fused = tape.tanh(fused);

    let gv = GruVars {
        wz: tape.param(net.gru[0]),
        wr: tape.param(net.gru[1]),
        wc: tape.param(net.gru[2]),
        uz: tape.param(net.gru[3]),
        ur: tape.param(net.gru[4]),
        uc: tape.param(net.gru[5]),
        bz: tape.param(net.gru[6]),
        br: tape.param(net.gru[7]),
        bc: tape.param(net.gru[8]),
    };
    let h0 = tape.constant(Tensor::zeros(&[5]));
    let h1 = tape.gru_cell(fused, h0, &gv).unwrap();
    let h2 = tape.gru_cell(fused, h1, &gv).unwrap();

    let sw = tape.param(net.head_steer_w);
    let sb = tape.param(net.head_steer_b);
    let steer_lin = tape.dense(h2, sw, sb).unwrap();
    let steer = tape.tanh(steer_lin);

    let tw = tape.param(net.head_throt_w);
    let tb = tape.param(net.head_throt_b);
    let throt_lin = tape.dense(h2, tw, tb).unwrap();
    let throt = tape.sigmoid(throt_lin);

    let ww = tape.param(net.head_wp_w);
    let wb = tape.param(net.head_wp_b);
    let wp = tape.dense(h2, ww, wb).unwrap();

    let ctrl = tape.concat_vec(&[steer, throt]).unwrap();
    (ctrl, wp)
}

#[test]
fn composite_graph_grads_match_finite_differences() {
    let mut r = rng(81);
    let mut params = Params::new();
    let net = mini_net(&mut params, &mut r);
    let front_in = rand_tensor(&mut r, &[3, 6, 8]);
    let bev_in = rand_tensor(&mut r, &[3, 4, 6]);

    assert_grads_match(
        &mut params,
        move |tape| {
            let (ctrl, wp) = mini_forward(tape, &net, &front_in, &bev_in);
            let tc = tape.constant(Tensor::filled(&[2], 9.0));
            let lw = tape.constant(Tensor::filled(&[2], -9.0));
            let lc = tape.l1_mean(ctrl, tc).unwrap();
            let lwp = tape.l1_mean(wp, lw).unwrap();
            let lc = tape.scale(lc, 1.4);
            let lwp = tape.scale(lwp, 0.8);
            tape.add(lc, lwp).unwrap()
        },
        1e-6,
    );
}

#[test]
fn backward_partial_matches_full_backward_on_watched_params() {
    let mut r = rng(91);
    let mut params = Params::new();
    let net = mini_net(&mut params, &mut r);
    let front_in = rand_tensor(&mut r, &[3, 6, 8]);
    let bev_in = rand_tensor(&mut r, &[3, 4, 6]);

    let mut tape = Tape::new(&params);
    let (ctrl, wp) = mini_forward(&mut tape, &net, &front_in, &bev_in);
    let tc = tape.constant(Tensor::filled(&[2], 9.0));
    let lw = tape.constant(Tensor::filled(&[2], -9.0));
    let lc = tape.l1_mean(ctrl, tc).unwrap();
    let lwp = tape.l1_mean(wp, lw).unwrap();
    let loss = tape.add(lc, lwp).unwrap();

    let full = tape.backward(loss).unwrap();
    // fusion-dense weights sit mid-graph: the partial walk must stop before
    // reaching the conv encoders
    let watched = [net.fuse_w, net.fuse_b];
    let partial = tape.backward_partial(loss, &watched).unwrap();
    for id in watched {
        assert_eq!(partial.get(id).data(), full.get(id).data());
    }

    // watching a head-only param also matches
    let watched = [net.head_wp_w];
    let partial = tape.backward_partial(loss, &watched).unwrap();
    assert_eq!(partial.get(net.head_wp_w).data(), full.get(net.head_wp_w).data());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut r = rng(101);
    let mut params = Params::new();
    let net = mini_net(&mut params, &mut r);
    let front_in = rand_tensor(&mut r, &[3, 6, 8]);
    let bev_in = rand_tensor(&mut r, &[3, 4, 6]);

    let run = || {
        let mut tape = Tape::new(&params);
        let (ctrl, wp) = mini_forward(&mut tape, &net, &front_in, &bev_in);
        let tc = tape.constant(Tensor::filled(&[2], 9.0));
        let lw = tape.constant(Tensor::filled(&[2], -9.0));
        let lc = tape.l1_mean(ctrl, tc).unwrap();
        let lwp = tape.l1_mean(wp, lw).unwrap();
        let loss = tape.add(lc, lwp).unwrap();
        (tape.value(loss).item(), tape.backward(loss).unwrap())
    };
    let (loss_a, grads_a) = run();
    let (loss_b, grads_b) = run();
    assert_eq!(loss_a.to_bits(), loss_b.to_bits());
    for id in params.ids() {
        assert_eq!(grads_a.get(id).data(), grads_b.get(id).data());
    }
}

#[test]
fn f32_grads_track_the_f64_reference() {
    // Same graph, same seeds, both precisions: f32 should track f64 to
    // single-precision accuracy, confirming the generic code has no
    // precision-dependent branches.
    let mut r64 = rng(111);
    let mut params64 = Params::<f64>::new();
    let x64 = params64.add("x", rand_tensor(&mut r64, &[6]));
    let w64 = params64.add("w", rand_tensor(&mut r64, &[4, 6]));
    let b64 = params64.add("b", rand_tensor(&mut r64, &[4]));

    let mut params32 = Params::<f32>::new();
    let x32 = params32.add("x", params64.value(x64).cast::<f32>());
    let w32 = params32.add("w", params64.value(w64).cast::<f32>());
    let b32 = params32.add("b", params64.value(b64).cast::<f32>());

    let g64 = {
        let mut tape = Tape::new(&params64);
        let (x, w, b) = (tape.param(x64), tape.param(w64), tape.param(b64));
        let y = tape.dense(x, w, b).unwrap();
        let y = tape.tanh(y);
        let t = tape.constant(Tensor::filled(&[4], 3.0f64));
        let loss = tape.l1_mean(y, t).unwrap();
        tape.backward(loss).unwrap()
    };
    let g32 = {
        let mut tape = Tape::new(&params32);
        let (x, w, b) = (tape.param(x32), tape.param(w32), tape.param(b32));
        let y = tape.dense(x, w, b).unwrap();
        let y = tape.tanh(y);
        let t = tape.constant(Tensor::filled(&[4], 3.0f32));
        let loss = tape.l1_mean(y, t).unwrap();
        tape.backward(loss).unwrap()
    };
    for (id64, id32) in [(x64, x32), (w64, w32), (b64, b32)] {
        for (a, b) in g64.get(id64).data().iter().zip(g32.get(id32).data()) {
            assert!(rel_err(*a, *b as f64) < 1e-5, "{a} vs {b}");
        }
    }
}
