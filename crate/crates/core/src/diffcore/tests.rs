use super::gradcheck::{analytic_grads, compare_gradients};
use super::*;
use crate::geometry::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn seq(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, (1..=n).map(|i| i as f64).collect())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn eval1(f: impl FnOnce(&mut Trace) -> Var) -> (Vec<usize>, Vec<f64>) {
    let mut tr = Trace::new();
    let v = f(&mut tr);
    (tr.shape(v).to_vec(), tr.value(v).to_vec())
}

/// Direct sliding-window cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![];
    for i in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.values()[((i * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.values()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_examples() {
    let (s, v) = eval1(|tr| {
        let x = tr.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tr.constant(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tr.constant(&Tensor::zeros(&[1]));
        tr.conv2d(x, w, b, 1, 0).unwrap()
    });
    assert_eq!((s, v), (vec![1, 1, 2, 2], vec![4.0; 4]));

    let input = seq(&[1, 1, 4, 4]);
    let (_, v) = eval1(|tr| {
        let x = tr.constant(&input);
        let w = tr.constant(&Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tr.constant(&Tensor::zeros(&[1]));
        tr.conv2d(x, w, b, 1, 0).unwrap()
    });
    assert_eq!(v, input.values());

    let (s, v) = eval1(|tr| {
        let x = tr.constant(&input);
        let w = tr.constant(&t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]));
        let b = tr.constant(&Tensor::zeros(&[1]));
        tr.conv2d(x, w, b, 2, 0).unwrap()
    });
    assert_eq!((s, v), (vec![1, 1, 2, 2], vec![1.0, 3.0, 9.0, 11.0]));
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 0, 3), (1, 0, 1), (2, 1, 2)] {
        let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        let (_, v) = eval1(|tr| {
            let (xv, wv, bv) = (tr.constant(&x), tr.constant(&w), tr.constant(&b));
            tr.conv2d(xv, wv, bv, stride, pad).unwrap()
        });
        let want = naive_conv(&x, &w, b.values(), stride, pad);
        assert_eq!(v.len(), want.len());
        for (a, b) in v.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_channel_mismatch() {
    let mut tr = Trace::new();
    let x = tr.constant(&Tensor::zeros(&[1, 2, 3, 3]));
    let w = tr.constant(&Tensor::zeros(&[1, 3, 1, 1]));
    let b = tr.constant(&Tensor::zeros(&[1]));
    assert!(matches!(tr.conv2d(x, w, b, 1, 0), Err(crate::Error::InvalidArgument(_))));
}

#[test]
fn max_pool_examples() {
    let (_, v) = eval1(|tr| {
        let x = tr.constant(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        tr.max_pool2d(x, 2, 2).unwrap()
    });
    assert_eq!(v, vec![4.0]);
    let (_, v) = eval1(|tr| {
        let x = tr.constant(&seq(&[1, 1, 4, 4]));
        tr.max_pool2d(x, 2, 2).unwrap()
    });
    assert_eq!(v, vec![6.0, 8.0, 14.0, 16.0]);

    let mut tr = Trace::new();
    let x = tr.leaf(&Tensor::full(&[1, 1, 4, 4], 3.0).with_grad());
    let p = tr.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(tr.value(p), &[3.0; 4]);
    let s = tr.sum(p);
    tr.backward(s).unwrap();
    let g = tr.grad(x).unwrap();
    let mut want = vec![0.0; 16];
    for i in [0, 2, 8, 10] {
        want[i] = 1.0;
    }
    assert_eq!(g, want.as_slice());

    let mut tr = Trace::new();
    let x = tr.constant(&Tensor::zeros(&[1, 1, 2, 2]));
    assert!(tr.max_pool2d(x, 3, 1).is_err());
}

#[test]
fn roi_pool_examples() {
    let fm = seq(&[1, 1, 4, 4]);
    let mut tr = Trace::new();
    let x = tr.constant(&fm);
    let (p, empty) = tr.roi_pool(x, &[BBox::from_corners(0.0, 0.0, 4.0, 4.0)], 1, 2, 2).unwrap();
    assert_eq!(tr.value(p), &[6.0, 8.0, 14.0, 16.0]);
    assert_eq!(empty, 0);

    // Output grid equal to the region: a copy.
    let (q, _) = tr.roi_pool(x, &[BBox::from_corners(1.0, 1.0, 3.0, 4.0)], 1, 3, 2).unwrap();
    assert_eq!(tr.value(q), &[6.0, 7.0, 10.0, 11.0, 14.0, 15.0]);

    // One visible cell; the second bin falls past the map edge.
    let one = t(&[1, 1, 1, 1], vec![5.0]);
    let x1 = tr.constant(&one);
    let (r, empty) = tr.roi_pool(x1, &[BBox::from_corners(0.0, 0.0, 2.0, 1.0)], 1, 1, 2).unwrap();
    assert_eq!(tr.value(r), &[5.0, 0.0]);
    assert_eq!(empty, 1);

    // Entirely outside: all zeros, every bin empty.
    let (z, empty) = tr.roi_pool(x, &[BBox::from_corners(10.0, 10.0, 12.0, 12.0)], 1, 2, 2).unwrap();
    assert_eq!(tr.value(z), &[0.0; 4]);
    assert_eq!(empty, 4);
}

#[test]
fn roi_pool_stride_mapping_floor_and_ceil() {
    let fm = seq(&[1, 1, 4, 4]);
    let mut tr = Trace::new();
    let x = tr.constant(&fm);
    // Image box [3, 3) .. [9, 9) at stride 4 -> cells [0, 3) in each axis.
    let (p, _) = tr.roi_pool(x, &[BBox::from_corners(3.0, 3.0, 9.0, 9.0)], 4, 3, 3).unwrap();
    assert_eq!(tr.value(p), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0, 9.0, 10.0, 11.0]);
}

#[test]
fn linear_examples() {
    let (_, v) = eval1(|tr| {
        let x = tr.constant(&t(&[1, 2], vec![1.0, 2.0]));
        let w = tr.constant(&t(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]));
        let b = tr.constant(&Tensor::zeros(&[2]));
        tr.linear(x, w, b).unwrap()
    });
    assert_eq!(v, vec![3.0, 2.0]);
    let (_, v) = eval1(|tr| {
        let x = tr.constant(&t(&[2, 2], vec![4.0, -1.0, 0.5, 2.0]));
        let w = tr.constant(&t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tr.constant(&Tensor::zeros(&[2]));
        tr.linear(x, w, b).unwrap()
    });
    assert_eq!(v, vec![4.0, -1.0, 0.5, 2.0]);
    let (_, v) = eval1(|tr| {
        let x = tr.constant(&Tensor::zeros(&[3, 2]));
        let w = tr.constant(&t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tr.constant(&t(&[2], vec![0.25, -7.0]));
        tr.linear(x, w, b).unwrap()
    });
    assert_eq!(v, vec![0.25, -7.0, 0.25, -7.0, 0.25, -7.0]);

    let mut tr = Trace::new();
    let x = tr.constant(&Tensor::zeros(&[1, 3]));
    let w = tr.constant(&Tensor::zeros(&[2, 2]));
    let b = tr.constant(&Tensor::zeros(&[2]));
    assert!(tr.linear(x, w, b).is_err());
}

#[test]
fn relu_examples() {
    let (_, v) = eval1(|tr| {
        let x = tr.constant(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        tr.relu(x)
    });
    assert_eq!(v, vec![0.0, 0.0, 2.0]);

    let mut tr = Trace::new();
    let x = tr.leaf(&Tensor::from_vec(vec![-1.0, -2.0]).with_grad());
    let r = tr.relu(x);
    let s = tr.sum(r);
    tr.backward(s).unwrap();
    assert_eq!(tr.grad(x).unwrap(), &[0.0, 0.0]);

    let mut tr = Trace::new();
    let x = tr.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
    let r = tr.relu(x);
    assert_eq!(tr.value(r), &[1.0, 2.0]);
    let s = tr.sum(r);
    tr.backward(s).unwrap();
    assert_eq!(tr.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn softmax_nll_examples() {
    let loss = |logits: Tensor, targets: &[usize]| {
        let mut tr = Trace::new();
        let x = tr.constant(&logits);
        let l = tr.softmax_nll_loss(x, targets).unwrap();
        tr.item(l)
    };
    assert!((loss(t(&[1, 3], vec![0.3; 3]), &[1]) - 3f64.ln()).abs() < 1e-12);
    let want = (1.0 + 2.0 * (-10f64).exp()).ln();
    let got = loss(t(&[1, 3], vec![10.0, 0.0, 0.0]), &[0]);
    assert!((got - want).abs() < 1e-15 && (got - 9.0799e-5).abs() < 1e-8);
    let one = loss(t(&[1, 3], vec![0.2, -1.0, 3.0]), &[2]);
    let two = loss(t(&[2, 3], vec![0.2, -1.0, 3.0, 0.2, -1.0, 3.0]), &[2, 2]);
    assert!((one - two).abs() < 1e-15);

    let mut tr = Trace::new();
    let x = tr.constant(&Tensor::zeros(&[1, 3]));
    assert!(matches!(tr.softmax_nll_loss(x, &[3]), Err(crate::Error::InvalidArgument(_))));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let row: Vec<f64> = (0..5).map(|_| rng.random_range(-40.0..40.0)).collect();
        let (_, p) = softmax_row(&row);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn smooth_l1_examples() {
    let loss = |p: [f64; 4], q: [f64; 4]| {
        let mut tr = Trace::new();
        let x = tr.constant(&Tensor::from_vec(p.to_vec()));
        let l = tr.smooth_l1_loss(x, &Tensor::from_vec(q.to_vec())).unwrap();
        tr.item(l)
    };
    assert_eq!(loss([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]), 0.0);
    assert_eq!(loss([0.5, 0.0, 0.0, 0.0], [0.0; 4]), 0.125);
    assert_eq!(loss([-2.0, 0.0, 0.0, 0.0], [0.0; 4]), 1.5);

    let mut tr = Trace::new();
    let x = tr.constant(&Tensor::zeros(&[4]));
    assert!(tr.smooth_l1_loss(x, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn pixel_ce_examples() {
    let m = 3;
    let mut tr = Trace::new();
    let v = tr.constant(&Tensor::full(&[2, m, m], 0.7));
    let target = t(&[m, m], (0..9).map(|i| (i % 2) as f64).collect());
    let l = tr.pixel_ce_loss(v, &target).unwrap();
    assert!((tr.item(l) - 2f64.ln()).abs() < 1e-12);

    let mut logits = vec![0.0; 2 * m * m];
    for i in 0..m * m {
        if target.values()[i] == 1.0 {
            logits[m * m + i] = 10.0;
        } else {
            logits[i] = 10.0;
        }
    }
    let v = tr.constant(&t(&[2, m, m], logits));
    let l = tr.pixel_ce_loss(v, &target).unwrap();
    assert!(tr.item(l) < 1e-4);

    // M = 1 agrees with a two-class softmax NLL on the same pixel.
    let v = tr.constant(&t(&[2, 1, 1], vec![0.3, -1.2]));
    let l = tr.pixel_ce_loss(v, &t(&[1, 1], vec![1.0])).unwrap();
    let row = tr.constant(&t(&[1, 2], vec![0.3, -1.2]));
    let n = tr.softmax_nll_loss(row, &[1]).unwrap();
    assert!((tr.item(l) - tr.item(n)).abs() < 1e-15);

    let v = tr.constant(&Tensor::zeros(&[2, 1, 1]));
    assert!(tr.pixel_ce_loss(v, &t(&[1, 1], vec![0.5])).is_err());
}

#[test]
fn backward_basics_and_double_consume() {
    let mut tr = Trace::new();
    let x = tr.leaf(&Tensor::from_vec(vec![1.0, -3.0, 2.0]).with_grad());
    let s = tr.sum(x);
    tr.backward(s).unwrap();
    assert_eq!(tr.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert!(matches!(tr.backward(s), Err(crate::Error::State(_))));
}

#[test]
fn backward_is_additive_across_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.insert("w", rand_tensor(&mut rng, &[3, 4])).unwrap();
    store.insert("b", rand_tensor(&mut rng, &[3])).unwrap();
    let x = rand_tensor(&mut rng, &[2, 4]);
    let build = |tr: &mut Trace, store: &ParamStore, which: usize| {
        let xv = tr.constant(&x);
        let w = tr.param(store, "w").unwrap();
        let b = tr.param(store, "b").unwrap();
        let y = tr.linear(xv, w, b).unwrap();
        let r = tr.relu(y);
        match which {
            0 => tr.sum(r),
            1 => tr.softmax_nll_loss(y, &[0, 2]).unwrap(),
            _ => {
                let a = tr.sum(r);
                let c = tr.softmax_nll_loss(y, &[0, 2]).unwrap();
                tr.add(a, c).unwrap()
            }
        }
    };
    for which in 0..2 {
        let mut tr = Trace::new();
        let l = build(&mut tr, &store, which);
        tr.backward(l).unwrap();
        tr.accumulate_into(&mut store);
    }
    let separate: Vec<Vec<f64>> = ["b", "w"].iter().map(|n| store.get(n).unwrap().grad().to_vec()).collect();
    store.zero_grad();
    let mut tr = Trace::new();
    let l = build(&mut tr, &store, 2);
    tr.backward(l).unwrap();
    tr.accumulate_into(&mut store);
    for (n, s) in ["b", "w"].iter().zip(&separate) {
        for (a, b) in store.get(n).unwrap().grad().iter().zip(s) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 3, 8, 8]);
    let w = rand_tensor(&mut rng, &[5, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[5]);
    let run = || {
        eval1(|tr| {
            let (xv, wv, bv) = (tr.constant(&x), tr.constant(&w), tr.constant(&b));
            let c = tr.conv2d(xv, wv, bv, 1, 1).unwrap();
            let p = tr.max_pool2d(c, 2, 2).unwrap();
            tr.roi_pool(p, &[BBox::from_corners(1.0, 2.0, 7.0, 8.0)], 2, 3, 3).unwrap().0
        })
        .1
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

// --- finite-difference checks -------------------------------------------

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn gradcheck_linear_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[2, 4]), rand_tensor(&mut rng, &[2])];
    let f = |tr: &mut Trace, v: &[Var]| {
        let y = tr.linear(v[0], v[1], v[2])?;
        tr.softmax_nll_loss(y, &[0, 1, 1])
    };
    let r = grad_check(f, &inputs, H, TOL).unwrap();
    assert!(r.passed, "{r:?}");
    assert_eq!(r.skipped, 0);

    let mut g = analytic_grads(&f, &inputs).unwrap();
    g.iter_mut().flatten().for_each(|x| *x *= 2.0);
    let bad = compare_gradients(&f, &inputs, &g, H, TOL).unwrap();
    assert!(!bad.passed);
}

#[test]
fn gradcheck_conv_relu_linear_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![
        rand_tensor(&mut rng, &[1, 2, 5, 5]),
        rand_tensor(&mut rng, &[3, 2, 3, 3]),
        rand_tensor(&mut rng, &[3]),
        rand_tensor(&mut rng, &[2, 27]),
        rand_tensor(&mut rng, &[2]),
    ];
    let f = |tr: &mut Trace, v: &[Var]| {
        let c = tr.conv2d(v[0], v[1], v[2], 2, 1)?;
        let r = tr.relu(c);
        let flat = tr.reshape(r, &[1, 27])?;
        let y = tr.linear(flat, v[3], v[4])?;
        tr.softmax_nll_loss(y, &[1])
    };
    let r = grad_check(f, &inputs, H, TOL).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn gradcheck_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![rand_tensor(&mut rng, &[1, 2, 6, 6]), rand_tensor(&mut rng, &[8, 18])];
    let f = |tr: &mut Trace, v: &[Var]| {
        let p = tr.max_pool2d(v[0], 2, 2)?;
        let (q, _) = tr.roi_pool(
            v[0],
            &[BBox::from_corners(0.5, 1.0, 5.5, 6.0), BBox::from_corners(2.0, 0.0, 6.0, 3.0)],
            1,
            2,
            2,
        )?;
        let pf = tr.reshape(p, &[1, 18])?;
        let qf = tr.reshape(q, &[1, 16])?;
        let wq = tr.reshape(v[1], &[8, 18])?;
        let zeros = tr.constant(&Tensor::zeros(&[8]));
        let y = tr.linear(pf, wq, zeros)?;
        let z = tr.concat_cols(y, qf)?;
        let s = tr.sum(z);
        let sq = tr.scale(s, 0.5);
        let loss = tr.softmax_nll_loss(z, &[3])?;
        tr.add(loss, sq)
    };
    let r = grad_check(f, &inputs, H, TOL).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > 50);
}

#[test]
fn gradcheck_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mask = t(&[3, 3], (0..9).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect());
    let inputs = vec![rand_tensor(&mut rng, &[2, 3, 3]), rand_tensor(&mut rng, &[2, 8])];
    let f = |tr: &mut Trace, v: &[Var]| {
        let a = tr.pixel_ce_loss(v[0], &mask)?;
        let g = tr.gather_cols(v[1], &[4, 0], 4)?;
        let b = tr.smooth_l1_weighted(g, &[0.3, -2.0, 0.1, 1.5, 0.0, 0.0, 0.0, 0.0], &[1.0, 0.5])?;
        let first = tr.reshape(v[1], &[4, 4])?;
        let c = tr.softmax_nll_weighted(first, &[0, 1, 2, 3], &[0.25, 0.5, 0.0, 1.0])?;
        let ab = tr.add(a, b)?;
        tr.add(ab, c)
    };
    let r = grad_check(f, &inputs, H, TOL).unwrap();
    assert!(r.passed, "{r:?}");
}
