use ddnt_core::attention::{neighbor_indices, neighborhood_attention, AttnGeometry};
use ddnt_core::autodiff::Graph;
use ddnt_core::tensor::{
    conv2d, conv_transpose2d, depthwise_conv2d, global_avg_pool, layer_norm, reflect_pad_hw,
    resize_bilinear, softmax_lastdim, Padding, Scale, Tensor, TensorError,
};
use ddnt_core::Tensor64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: &Tensor64, b: &Tensor64, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b).unwrap();
    assert!(d <= tol, "max abs diff {d:e} > {tol:e}");
}

/// Direct six-loop cross-correlation with explicit zero padding.
fn conv_oracle(x: &Tensor64, w: &Tensor64, b: &Tensor64, stride: usize, pad: usize) -> Tensor64 {
    let (n, h, wd, cin) = x.dims4().unwrap();
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, oh, ow, cout]);
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at4(bi, iy as usize, ix as usize, ci)
                                    * w.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let o = out.offset4(bi, oy, ox, co);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng(1);
    for (stride, padding, pad) in [
        (1, Padding::Same, 1),
        (2, Padding::Same, 1),
        (1, Padding::Valid, 0),
    ] {
        let x = Tensor::rand_uniform([2, 7, 6, 3], -1.0, 1.0, &mut r);
        let w = Tensor::rand_uniform([3, 3, 3, 5], -1.0, 1.0, &mut r);
        let b = Tensor::rand_uniform([5], -1.0, 1.0, &mut r);
        let y = conv2d(&x, &w, Some(&b), stride, padding).unwrap();
        close(&y, &conv_oracle(&x, &w, &b, stride, pad), 1e-12);
    }
}

#[test]
fn conv2d_one_by_one_identity() {
    let mut r = rng(2);
    let x = Tensor::rand_uniform([1, 4, 5, 3], -1.0, 1.0, &mut r);
    let eye = Tensor::from_fn([1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(conv2d(&x, &eye, None, 1, Padding::Same).unwrap(), x);
}

#[test]
fn depthwise_matches_per_channel_conv() {
    let mut r = rng(3);
    let x = Tensor::rand_uniform([1, 6, 5, 4], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform([3, 3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform([4], -1.0, 1.0, &mut r);
    // a dense kernel that is zero off the channel diagonal
    let dense = Tensor::from_fn([3, 3, 4, 4], |i| {
        let (tap, ci, co) = (i / 16, (i / 4) % 4, i % 4);
        if ci == co {
            w.data()[tap * 4 + ci]
        } else {
            0.0
        }
    });
    let y = depthwise_conv2d(&x, &w, Some(&b), 1, Padding::Same).unwrap();
    close(&y, &conv_oracle(&x, &dense, &b, 1, 1), 1e-12);
}

#[test]
fn transposed_conv_matches_scatter() {
    let mut r = rng(4);
    let x = Tensor::rand_uniform([1, 3, 4, 2], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform([4, 4, 2, 3], -1.0, 1.0, &mut r);
    let b = Tensor::rand_uniform([3], -1.0, 1.0, &mut r);
    let (stride, pad) = (2, 1);
    let y = conv_transpose2d(&x, &w, Some(&b), stride, pad).unwrap();
    assert_eq!(y.shape(), &[1, 6, 8, 3]);
    let mut expect = Tensor::from_fn([1, 6, 8, 3], |i| b.data()[i % 3]);
    for iy in 0..3 {
        for ix in 0..4 {
            for ky in 0..4 {
                for kx in 0..4 {
                    let oy = (iy * stride + ky) as isize - pad as isize;
                    let ox = (ix * stride + kx) as isize - pad as isize;
                    if !(0..6).contains(&oy) || !(0..8).contains(&ox) {
                        continue;
                    }
                    for ci in 0..2 {
                        for co in 0..3 {
                            let o = expect.offset4(0, oy as usize, ox as usize, co);
                            expect.data_mut()[o] +=
                                x.at4(0, iy, ix, ci) * w.data()[((ky * 4 + kx) * 2 + ci) * 3 + co];
                        }
                    }
                }
            }
        }
    }
    close(&y, &expect, 1e-12);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::<f64>::zeros([1, 4, 4, 3]);
    let w = Tensor::<f64>::zeros([3, 3, 2, 4]);
    assert!(matches!(
        conv2d(&x, &w, None, 1, Padding::Same),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn layer_norm_matches_two_pass() {
    let mut r = rng(5);
    let x = Tensor::rand_uniform([2, 3, 3, 6], -3.0, 3.0, &mut r);
    let gamma = Tensor::rand_uniform([6], 0.5, 1.5, &mut r);
    let beta = Tensor::rand_uniform([6], -0.5, 0.5, &mut r);
    let (y, _) = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
    let mut expect = Vec::new();
    for row in x.data().chunks(6) {
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for (i, v) in row.iter().enumerate() {
            expect.push((v - mean) / (var + 1e-5).sqrt() * gamma.data()[i] + beta.data()[i]);
        }
    }
    close(&y, &Tensor::new(x.shape(), expect).unwrap(), 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_and_resist_overflow() {
    let x = Tensor::new([2, 3], vec![1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0]).unwrap();
    let y = softmax_lastdim(&x);
    for row in y.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| v.is_finite()));
    }
    let e: Vec<f64> = [0.0f64, 1.0, 2.0].iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    assert!((y.data()[0] - e[0] / z).abs() < 1e-12);
}

#[test]
fn resize_preserves_constants_and_roundtrip_shape() {
    let x = Tensor::full([1, 4, 6, 2], 0.3f64);
    for s in [Scale::Up2, Scale::Up4, Scale::Down2] {
        let y = resize_bilinear(&x, s).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
    }
    assert_eq!(
        resize_bilinear(&x, Scale::Up4).unwrap().shape(),
        &[1, 16, 24, 2]
    );
    assert!(resize_bilinear(&Tensor::<f64>::zeros([1, 3, 4, 1]), Scale::Down2).is_err());
}

#[test]
fn down2_of_even_map_averages_pairs() {
    let x = Tensor::from_fn([1, 2, 2, 1], |i| i as f64);
    let y = resize_bilinear(&x, Scale::Down2).unwrap();
    assert_eq!(y.data(), &[1.5]);
}

#[test]
fn global_pool_is_channel_mean() {
    let x = Tensor::from_fn([1, 2, 3, 2], |i| i as f64);
    let y = global_avg_pool(&x).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 2]);
    assert_eq!(y.data(), &[5.0, 6.0]);
}

#[test]
fn reflect_pad_is_half_sample_symmetric() {
    let x = Tensor::from_fn([1, 1, 4, 1], |i| i as f64);
    let y = reflect_pad_hw(&x, 0, 3).unwrap();
    assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0, 3.0, 2.0, 1.0]);
}

#[test]
fn neighbor_rule_examples() {
    assert_eq!(
        neighbor_indices(7, 3, 7, 1).unwrap(),
        vec![0, 1, 2, 3, 4, 5, 6]
    );
    assert_eq!(neighbor_indices(8, 0, 3, 1).unwrap(), vec![0, 1, 2]);
    assert_eq!(neighbor_indices(8, 7, 3, 1).unwrap(), vec![5, 6, 7]);
    assert_eq!(neighbor_indices(12, 5, 3, 4).unwrap(), vec![1, 5, 9]);
    assert!(neighbor_indices(5, 0, 3, 2).is_err());
}

#[test]
fn neighbors_stay_in_residue_class() {
    for n in 6..=16 {
        for k in [3, 5] {
            for d in 1..=n / k {
                for i in 0..n {
                    let nb = neighbor_indices(n, i, k, d).unwrap();
                    assert_eq!(nb.len(), k);
                    assert!(nb.contains(&i));
                    assert!(nb.iter().all(|&j| j % d == i % d && j < n));
                    assert!(nb.windows(2).all(|p| p[1] == p[0] + d));
                }
            }
        }
    }
}

/// One-token-at-a-time loop over the stated neighborhood on a 4x4 map.
#[test]
fn attention_matches_per_token_loop() {
    let mut r = rng(6);
    let (h, w, c, heads, k) = (4, 4, 4, 2, 3);
    let dk = c / heads;
    let geom = AttnGeometry::new(h, w, k, 1, heads, c).unwrap();
    let q: Tensor64 = Tensor::rand_uniform([1, h, w, c], -1.0, 1.0, &mut r);
    let kt: Tensor64 = Tensor::rand_uniform([1, h, w, c], -1.0, 1.0, &mut r);
    let v: Tensor64 = Tensor::rand_uniform([1, h, w, c], -1.0, 1.0, &mut r);
    let bias: Tensor64 = Tensor::rand_uniform([heads, 2 * k - 1, 2 * k - 1], -1.0, 1.0, &mut r);
    let (y, _) = neighborhood_attention(&q, &kt, &v, &bias, &geom).unwrap();
    for i in 0..h {
        for j in 0..w {
            let ri = neighbor_indices(h, i, k, 1).unwrap();
            let rj = neighbor_indices(w, j, k, 1).unwrap();
            for head in 0..heads {
                let mut logits = Vec::new();
                let mut vals = Vec::new();
                for &a in &ri {
                    for &b in &rj {
                        let dot: f64 = (0..dk)
                            .map(|d| q.at4(0, i, j, head * dk + d) * kt.at4(0, a, b, head * dk + d))
                            .sum();
                        let by = (k as isize - 1 + a as isize - i as isize) as usize;
                        let bx = (k as isize - 1 + b as isize - j as isize) as usize;
                        logits.push(
                            (dot + bias.data()[(head * (2 * k - 1) + by) * (2 * k - 1) + bx])
                                / (dk as f64).sqrt(),
                        );
                        vals.push((a, b));
                    }
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for d in 0..dk {
                    let expect: f64 = logits
                        .iter()
                        .zip(&vals)
                        .map(|(l, &(a, b))| (l - m).exp() / z * v.at4(0, a, b, head * dk + d))
                        .sum();
                    assert!((y.at4(0, i, j, head * dk + d) - expect).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn graph_backward_of_sum_and_square() {
    let p = Tensor::new([3], vec![0.5, -2.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param("p", p.clone());
    let s = g.sum(v);
    assert_eq!(g.backward(s).unwrap().get(v).data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let v = g.param("p", p.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    assert_eq!(g.backward(s).unwrap().get(v), p.map(|x| 2.0 * x));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let v = g.param("p", Tensor::<f64>::zeros([2]));
    assert!(g.backward(v).is_err());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(7);
    let x = Tensor::rand_uniform([1, 4, 4, 2], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform([3, 3, 2, 2], -1.0, 1.0, &mut r);
    let grads = |which: u8| {
        let mut g = Graph::new();
        let xv = g.param("x", x.clone());
        let wv = g.param("w", w.clone());
        let y = g.conv2d(xv, wv, None, 1, Padding::Same).unwrap();
        let a = g.sum(y);
        let sq = g.mul(y, y).unwrap();
        let b = g.mean(sq);
        let loss = match which {
            0 => a,
            1 => b,
            _ => g.add(a, b).unwrap(),
        };
        g.backward(loss).unwrap().get(wv)
    };
    let (ga, gb, gab) = (grads(0), grads(1), grads(2));
    let sum = ga.zip_map(&gb, "add", |p, q| p + q).unwrap();
    close(&gab, &sum, 1e-12);
}
