use diffarray::{AdamState, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

#[test]
fn matmul_identity_and_scalar() {
    let g = Graph::<f64>::new();
    let b = random(&[3, 4], &mut rng(1));
    let out = g
        .matmul(g.constant(Tensor::eye(3)), g.constant(b.clone()))
        .unwrap();
    assert_eq!(*g.value(out), b);

    let two = g.constant(Tensor::new([1, 1], vec![2.0]).unwrap());
    let three = g.constant(Tensor::new([1, 1], vec![3.0]).unwrap());
    let six = g.matmul(two, three).unwrap();
    assert_eq!(g.value(six).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(2);
    let a = random(&[4, 5], &mut r);
    let b = random(&[5, 3], &mut r);
    let g = Graph::new();
    let c = g.matmul(g.constant(a.clone()), g.constant(b.clone())).unwrap();
    let c = g.value(c);
    for i in 0..4 {
        for j in 0..3 {
            let mut acc = 0.0;
            for p in 0..5 {
                acc += a.at(&[i, p]) * b.at(&[p, j]);
            }
            assert!((c.at(&[i, j]) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([4], 0.7));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }

    let x = g.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let y = g.value(g.softmax(x, 0).unwrap());
    assert!(y.is_finite());
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-300);

    let x = g.constant(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.value(g.softmax(x, 0).unwrap());
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((y.data()[i] - v.exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_nan() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([2], vec![f64::NAN, 0.0]).unwrap());
    assert!(g.softmax(x, 0).is_err());
}

#[test]
fn softmax_along_inner_axis() {
    let mut r = rng(3);
    let t = random(&[2, 3, 4], &mut r);
    let g = Graph::new();
    let y = g.value(g.softmax(g.constant(t.clone()), 1).unwrap());
    for a in 0..2 {
        for c in 0..4 {
            let denom: f64 = (0..3).map(|b| t.at(&[a, b, c]).exp()).sum();
            for b in 0..3 {
                assert!((y.at(&[a, b, c]) - t.at(&[a, b, c]).exp() / denom).abs() < 1e-12);
            }
        }
    }
}

fn layer_norm_plain(row: &[f64]) -> Vec<f64> {
    let g = Graph::new();
    let n = row.len();
    let x = g.constant(Tensor::new([1, n], row.to_vec()).unwrap());
    let gain = g.constant(Tensor::full([n], 1.0));
    let bias = g.constant(Tensor::zeros([n]));
    g.value(g.layer_norm(x, gain, bias, 1e-5).unwrap()).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert!(layer_norm_plain(&[2.5; 6]).iter().all(|&v| v == 0.0));

    let unit = [1.0, -1.0, 1.0, -1.0];
    for (a, b) in layer_norm_plain(&unit).iter().zip(unit) {
        assert!((a - b).abs() < 1e-5);
    }

    let mut r = rng(4);
    // v/(v+eps) >= 1-1e-6 needs row variance >= 10 at eps = 1e-5.
    let row: Vec<f64> = (0..16).map(|_| r.random_range(-12.0..12.0)).collect();
    let out = layer_norm_plain(&row);
    let mean = out.iter().sum::<f64>() / 16.0;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-10);
    assert!((1.0 - 1e-6..=1.0).contains(&var), "var = {var}");
}

#[test]
fn layer_norm_rejects_unit_width() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([3, 1]));
    let p = g.constant(Tensor::zeros([1]));
    assert!(g.layer_norm(x, p, p, 1e-5).is_err());
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros([cout, h, wd]);
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0;
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[o, i, ky, kx]) * x.at(&[i, sy as usize, sx as usize]);
                        }
                    }
                }
                out.data_mut()[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_examples() {
    let mut r = rng(5);
    let x = random(&[3, 5, 6], &mut r);
    let g = Graph::new();

    let mut ident = Tensor::zeros([3, 3, 1, 1]);
    for c in 0..3 {
        ident.data_mut()[c * 3 + c] = 1.0;
    }
    let y = g.conv2d(g.constant(x.clone()), g.constant(ident)).unwrap();
    assert_eq!(*g.value(y), x);

    let mut delta = Tensor::zeros([1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    let x1 = random(&[1, 4, 4], &mut r);
    let y = g.conv2d(g.constant(x1.clone()), g.constant(delta)).unwrap();
    assert_eq!(*g.value(y), x1);

    let w = random(&[4, 3, 3, 3], &mut r);
    let y = g.conv2d(g.constant(x.clone()), g.constant(w.clone())).unwrap();
    assert!(g.value(y).max_abs_diff(&naive_conv(&x, &w)) < 1e-12);
}

fn modulated_oracle(w: &Tensor<f64>, phi: &[f64], eps: f64) -> Vec<f64> {
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let taps = w.numel() / (cout * cin);
    let mut out = vec![0.0; w.numel()];
    for j in 0..cout {
        let mut ss = 0.0;
        for i in 0..cin {
            for k in 0..taps {
                ss += (phi[i] * w.data()[(j * cin + i) * taps + k]).powi(2);
            }
        }
        for i in 0..cin {
            for k in 0..taps {
                let idx = (j * cin + i) * taps + k;
                out[idx] = phi[i] * w.data()[idx] / (ss + eps).sqrt();
            }
        }
    }
    out
}

#[test]
fn modulated_conv_examples() {
    let g = Graph::<f64>::new();
    let x = Tensor::from_fn([1, 3, 3], |i| i as f64 * 0.1);
    let w = g.constant(Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap());
    let phi = g.constant(Tensor::new([1], vec![3.0]).unwrap());
    let y = g.modulated_conv2d(g.constant(x.clone()), w, phi, 1e-12).unwrap();
    assert!(g.value(y).max_abs_diff(&x) < 1e-12);

    // Unit-norm filters with unit scales pass through unchanged.
    let mut r = rng(6);
    let mut wt = random(&[2, 3, 3, 3], &mut r);
    for j in 0..2 {
        let row = &mut wt.data_mut()[j * 27..(j + 1) * 27];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let wv = g.constant(wt.clone().reshape([2, 3, 9]).unwrap());
    let ones = g.constant(Tensor::full([1, 3], 1.0));
    let out = g.value(g.demodulate(wv, ones, 1e-30).unwrap());
    assert!(out.max_abs_diff(&wt.clone().reshape([1, 2, 27]).unwrap()) < 1e-12);

    // Demodulated squared norms equal N²/(N²+ε′).
    let wt = random(&[3, 4, 3, 3], &mut r);
    let phi: Vec<f64> = (0..4).map(|_| r.random_range(0.1..2.0)).collect();
    let eps = 0.05;
    let wv = g.constant(wt.clone().reshape([3, 4, 9]).unwrap());
    let pv = g.constant(Tensor::new([1, 4], phi.clone()).unwrap());
    let out = g.value(g.demodulate(wv, pv, eps).unwrap());
    let oracle = modulated_oracle(&wt, &phi, eps);
    for (a, b) in out.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    for j in 0..3 {
        let n2: f64 = (0..4)
            .flat_map(|i| (0..9).map(move |k| (i, k)))
            .map(|(i, k)| (phi[i] * wt.data()[(j * 4 + i) * 9 + k]).powi(2))
            .sum();
        let got: f64 = out.data()[j * 36..(j + 1) * 36].iter().map(|v| v * v).sum();
        assert!((got - n2 / (n2 + eps)).abs() < 1e-12);
    }

    // The full convolution path matches demodulated weights fed to a plain conv.
    let x = random(&[4, 5, 5], &mut r);
    let y = g
        .modulated_conv2d(
            g.constant(x.clone()),
            g.constant(wt.clone()),
            g.constant(Tensor::new([4], phi.clone()).unwrap()),
            eps,
        )
        .unwrap();
    let wprime = Tensor::new([3, 4, 3, 3], oracle).unwrap();
    assert!(g.value(y).max_abs_diff(&naive_conv(&x, &wprime)) < 1e-12);
}

#[test]
fn modulated_conv_rejects_nonpositive_eps() {
    let g = Graph::<f64>::new();
    let w = g.constant(Tensor::full([1, 1, 1], 1.0));
    let p = g.constant(Tensor::full([1, 1], 1.0));
    assert!(g.demodulate(w, p, 0.0).is_err());
    assert!(g.demodulate(w, p, -1.0).is_err());
}

fn per_head_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let (lq, d) = (q.shape()[0], q.shape()[1]);
    let lk = k.shape()[0];
    let dh = d / heads;
    let mut out = vec![0.0; lq * d];
    let mut avg = vec![0.0; lq * lk];
    for h in 0..heads {
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| (0..dh).map(|c| q.at(&[i, h * dh + c]) * k.at(&[j, h * dh + c])).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..lk {
                let p = e[j] / z;
                avg[i * lk + j] += p / heads as f64;
                for c in 0..dh {
                    out[i * d + h * dh + c] += p * v.at(&[j, h * dh + c]);
                }
            }
        }
    }
    (out, avg)
}

#[test]
fn attention_examples() {
    let g = Graph::<f64>::new();
    let mut r = rng(7);

    // Identical keys: uniform mean of values.
    let q = random(&[3, 4], &mut r);
    let krow = random(&[1, 4], &mut r);
    let k = Tensor::from_fn([5, 4], |i| krow.data()[i % 4]);
    let v = random(&[5, 4], &mut r);
    let (out, w) = g
        .attention(
            g.constant(q.reshape([1, 3, 4]).unwrap()),
            g.constant(k.reshape([1, 5, 4]).unwrap()),
            g.constant(v.clone().reshape([1, 5, 4]).unwrap()),
            1,
            1,
        )
        .unwrap();
    let out = g.value(out);
    for i in 0..3 {
        for c in 0..4 {
            let mean: f64 = (0..5).map(|j| v.at(&[j, c])).sum::<f64>() / 5.0;
            assert!((out.data()[i * 4 + c] - mean).abs() < 1e-12);
        }
    }
    assert!(w.data().iter().all(|&p| (p - 0.2).abs() < 1e-12));

    // Saturated one-hot keys select the matching value.
    let s = 100.0;
    let q = Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { s } else { 0.0 });
    let v = random(&[3, 3], &mut r);
    let (out, _) = g
        .attention(
            g.constant(q.clone().reshape([1, 3, 3]).unwrap()),
            g.constant(q.reshape([1, 3, 3]).unwrap()),
            g.constant(v.clone().reshape([1, 3, 3]).unwrap()),
            1,
            1,
        )
        .unwrap();
    assert!(g.value(out).max_abs_diff(&v.reshape([1, 3, 3]).unwrap()) < 1e-9);

    // Two heads against an explicit per-head loop.
    let q = random(&[4, 6], &mut r);
    let k = random(&[5, 6], &mut r);
    let v = random(&[5, 6], &mut r);
    let (out, w) = g
        .attention(
            g.constant(q.clone().reshape([1, 4, 6]).unwrap()),
            g.constant(k.clone().reshape([1, 5, 6]).unwrap()),
            g.constant(v.clone().reshape([1, 5, 6]).unwrap()),
            2,
            1,
        )
        .unwrap();
    let (o_ref, w_ref) = per_head_oracle(&q, &k, &v, 2);
    for (a, b) in g.value(out).data().iter().zip(&o_ref) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in w.data().iter().zip(&w_ref) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn attention_groups_share_keys() {
    let g = Graph::<f64>::new();
    let mut r = rng(8);
    let q = random(&[4, 2, 4], &mut r);
    let k = random(&[2, 3, 4], &mut r);
    let v = random(&[2, 3, 4], &mut r);
    let (out, _) = g
        .attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), 2, 2)
        .unwrap();
    let out = g.value(out);
    for b in 0..4 {
        let kb = b / 2;
        let qs = Tensor::new([2, 4], q.row(b).to_vec()).unwrap();
        let ks = Tensor::new([3, 4], k.row(kb).to_vec()).unwrap();
        let vs = Tensor::new([3, 4], v.row(kb).to_vec()).unwrap();
        let (o_ref, _) = per_head_oracle(&qs, &ks, &vs, 2);
        for (a, b) in out.row(b).iter().zip(&o_ref) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 2, 6]));
    assert!(g.attention(x, x, x, 4, 1).is_err());
}

#[test]
fn multi_head_attention_projects_and_averages() {
    let g = Graph::<f64>::new();
    let mut r = rng(9);
    let q = random(&[3, 4], &mut r);
    let k = random(&[5, 4], &mut r);
    let eye = || g.constant(Tensor::eye(4));
    let (out, w) = diffarray::multi_head_attention(
        &g,
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(k.clone()),
        [eye(), eye(), eye(), eye()],
        2,
    )
    .unwrap();
    let (o_ref, w_ref) = per_head_oracle(&q, &k, &k, 2);
    assert_eq!(g.shape(out), vec![3, 4]);
    for (a, b) in g.value(out).data().iter().zip(&o_ref) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(w.shape(), &[3, 5]);
    for (a, b) in w.data().iter().zip(&w_ref) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn scalar_store(x: f64, grad: f64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.insert("x", Tensor::scalar(x)).unwrap();
    let g = Graph::new();
    let v = g.param(&store, id);
    let y = g.scale(v, grad / x.max(1e-300));
    let y = g.sum(y);
    g.backward(y).unwrap();
    store.accumulate_grads(&g);
    store
}

#[test]
fn adam_zero_grad_leaves_params() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_fn([3], |i| i as f64)).unwrap();
    let before = store.get("w").unwrap().clone();
    let mut adam = AdamState::with_lr(0.1);
    adam.step(&mut store).unwrap();
    assert_eq!(store.get("w").unwrap(), &before);
}

#[test]
fn adam_first_step_moves_by_lr() {
    for g0 in [1e-3, -0.5, 42.0] {
        let mut store = scalar_store(1.0, g0);
        let mut adam = AdamState::new(0.01, 0.9, 0.999, 0.0);
        adam.step(&mut store).unwrap();
        let moved = (store.get("x").unwrap().item() - 1.0).abs();
        assert!((moved - 0.01).abs() < 1e-15, "g = {g0}: moved {moved}");
    }
}

#[test]
fn adam_three_step_trace_matches_hand_stepping() {
    // Minimize x² from x = 1.5.
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut x_ref: f64 = 1.5;
    let (mut m, mut v) = (0.0, 0.0);
    let mut trace_ref = Vec::new();
    for t in 1..=3 {
        let g = 2.0 * x_ref;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1_pow(b1, t));
        let vh = v / (1.0 - b1_pow(b2, t));
        x_ref -= lr * mh / (vh.sqrt() + eps);
        trace_ref.push(x_ref);
    }

    let mut store = ParamStore::new();
    let id = store.insert("x", Tensor::scalar(1.5)).unwrap();
    let mut adam = AdamState::new(lr, b1, b2, eps);
    for expected in trace_ref {
        store.zero_grad();
        let g = Graph::new();
        let x = g.param(&store, id);
        let y = g.square(x);
        let y = g.sum(y);
        g.backward(y).unwrap();
        store.accumulate_grads(&g);
        drop(g);
        adam.step(&mut store).unwrap();
        assert!((store.value(id).item() - expected).abs() < 1e-12);
    }
}

fn b1_pow(b: f64, t: i32) -> f64 {
    (0..t).fold(1.0, |acc, _| acc * b)
}

#[test]
fn adam_names_nan_parameter() {
    let mut store = ParamStore::new();
    store.insert("good", Tensor::scalar(1.0)).unwrap();
    let bad = store.insert("bad.weight", Tensor::scalar(1.0)).unwrap();
    let g = Graph::new();
    let v = g.param(&store, bad);
    let nan = g.constant(Tensor::scalar(f64::NAN));
    let y = g.mul(v, nan).unwrap();
    g.backward(y).unwrap();
    store.accumulate_grads(&g);
    drop(g);
    let mut adam = AdamState::with_lr(0.1);
    let err = adam.step(&mut store).unwrap_err().to_string();
    assert!(err.contains("bad.weight"), "{err}");
}

#[test]
fn repeated_backward_doubles_leaf_grads() {
    let mut r = rng(10);
    let g = Graph::new();
    let x = g.variable(random(&[3, 4], &mut r));
    let w = g.constant(random(&[4, 2], &mut r));
    let y = g.matmul(x, w).unwrap();
    let y = g.silu(y);
    let y = g.sum(y);
    g.backward(y).unwrap();
    let once = g.grad(x).unwrap();
    g.backward(y).unwrap();
    let twice = g.grad(x).unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_needs_scalar_root() {
    let g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros([2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn every_leaf_receives_a_full_gradient() {
    let mut r = rng(11);
    let g = Graph::new();
    let a = g.variable(random(&[2, 3], &mut r));
    let b = g.variable(random(&[3, 3], &mut r));
    let c = g.variable(random(&[3], &mut r));
    let y = g.matmul(a, b).unwrap();
    let y = g.add_bias(y, c).unwrap();
    let y = g.mean(y);
    g.backward(y).unwrap();
    for (v, shape) in [(a, vec![2, 3]), (b, vec![3, 3]), (c, vec![3])] {
        let grad = g.grad(v).unwrap();
        assert_eq!(grad.shape(), &shape[..]);
    }
}

#[test]
fn f32_forward_tracks_f64() {
    let mut r = rng(12);
    let a = random(&[6, 5], &mut r);
    let b = random(&[5, 4], &mut r);
    let g64 = Graph::new();
    let y64 = g64.matmul(g64.constant(a.clone()), g64.constant(b.clone())).unwrap();
    let y64 = g64.softmax(y64, 1).unwrap();
    let g32 = Graph::<f32>::new();
    let y32 = g32.matmul(g32.constant(a.cast()), g32.constant(b.cast())).unwrap();
    let y32 = g32.softmax(y32, 1).unwrap();
    assert!(g64.value(y64).max_abs_diff(&g32.value(y32).cast()) < 1e-6);
}
