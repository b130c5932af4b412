//! Finite-difference sweep over every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::{finite_diff_check, Graph, Result, Tensor, Var};

type Build = Box<dyn Fn(&Graph<f64>, Var) -> Result<Var>>;
type Case = (&'static str, fn(&mut Xoshiro256PlusPlus) -> (Tensor<f64>, Build));

fn random(shape: &[usize], r: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn positive(shape: &[usize], r: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(0.2..2.0))
}

fn c(g: &Graph<f64>, t: &Tensor<f64>) -> Var {
    g.constant(t.clone())
}

fn attention_slot(r: &mut Xoshiro256PlusPlus, slot: usize) -> (Tensor<f64>, Build) {
    let parts = [random(&[4, 3, 4], r), random(&[2, 5, 4], r), random(&[2, 5, 4], r)];
    (
        parts[slot].clone(),
        Box::new(move |g, v| {
            let vars: Vec<Var> = (0..3).map(|i| if i == slot { v } else { c(g, &parts[i]) }).collect();
            Ok(g.attention(vars[0], vars[1], vars[2], 2, 2)?.0)
        }),
    )
}

const CASES: &[Case] = &[
    ("add", |r| {
        let o = random(&[3, 4], r);
        (random(&[3, 4], r), Box::new(move |g, v| g.add(v, c(g, &o))))
    }),
    ("sub_rhs", |r| {
        let o = random(&[3, 4], r);
        (random(&[3, 4], r), Box::new(move |g, v| g.sub(c(g, &o), v)))
    }),
    ("mul", |r| {
        let o = random(&[3, 4], r);
        (random(&[3, 4], r), Box::new(move |g, v| g.mul(v, c(g, &o))))
    }),
    ("scale", |r| (random(&[5], r), Box::new(|g, v| Ok(g.scale(v, -2.5))))),
    ("abs", |r| (random(&[6], r), Box::new(|g, v| Ok(g.abs(v))))),
    ("square", |r| (random(&[6], r), Box::new(|g, v| Ok(g.square(v))))),
    ("relu", |r| (random(&[6], r), Box::new(|g, v| Ok(g.relu(v))))),
    ("silu", |r| (random(&[6], r), Box::new(|g, v| Ok(g.silu(v))))),
    ("mean", |r| (random(&[2, 3], r), Box::new(|g, v| Ok(g.mean(g.square(v)))))),
    ("l1_loss", |r| {
        let t = random(&[4, 3], r);
        (random(&[4, 3], r), Box::new(move |g, v| g.l1_loss(v, c(g, &t))))
    }),
    ("add_bias_x", |r| {
        let b = random(&[4], r);
        (random(&[2, 3, 4], r), Box::new(move |g, v| g.add_bias(v, c(g, &b))))
    }),
    ("add_bias_b", |r| {
        let x = random(&[2, 3, 4], r);
        (random(&[4], r), Box::new(move |g, v| g.add_bias(c(g, &x), v)))
    }),
    ("add_per_batch_y", |r| {
        let x = random(&[2, 3, 4], r);
        (random(&[2, 4], r), Box::new(move |g, v| g.add_per_batch(c(g, &x), v)))
    }),
    ("matmul_a", |r| {
        let b = random(&[4, 3], r);
        (random(&[2, 4], r), Box::new(move |g, v| g.matmul(v, c(g, &b))))
    }),
    ("matmul_b", |r| {
        let a = random(&[2, 5, 4], r);
        (random(&[4, 3], r), Box::new(move |g, v| g.matmul(c(g, &a), v)))
    }),
    ("matmul_nt_a", |r| {
        let b = random(&[3, 4], r);
        (random(&[2, 4], r), Box::new(move |g, v| g.matmul_nt(v, c(g, &b))))
    }),
    ("matmul_nt_b", |r| {
        let a = random(&[2, 4], r);
        (random(&[3, 4], r), Box::new(move |g, v| g.matmul_nt(c(g, &a), v)))
    }),
    ("bmm_a", |r| {
        let b = random(&[2, 4, 3], r);
        (random(&[2, 3, 4], r), Box::new(move |g, v| g.bmm(v, c(g, &b))))
    }),
    ("bmm_b", |r| {
        let a = random(&[2, 3, 4], r);
        (random(&[2, 4, 3], r), Box::new(move |g, v| g.bmm(c(g, &a), v)))
    }),
    ("bmm_nt_a", |r| {
        let b = random(&[2, 5, 4], r);
        (random(&[2, 3, 4], r), Box::new(move |g, v| g.bmm_nt(v, c(g, &b))))
    }),
    ("bmm_nt_b", |r| {
        let a = random(&[2, 3, 4], r);
        (random(&[2, 5, 4], r), Box::new(move |g, v| g.bmm_nt(c(g, &a), v)))
    }),
    ("softmax_last", |r| (random(&[3, 5], r), Box::new(|g, v| g.softmax(v, 1)))),
    ("softmax_inner", |r| (random(&[2, 4, 3], r), Box::new(|g, v| g.softmax(v, 1)))),
    ("layer_norm_x", |r| {
        let (gain, bias) = (random(&[6], r), random(&[6], r));
        (random(&[3, 6], r), Box::new(move |g, v| g.layer_norm(v, c(g, &gain), c(g, &bias), 1e-5)))
    }),
    ("layer_norm_gain", |r| {
        let (x, bias) = (random(&[3, 6], r), random(&[6], r));
        (random(&[6], r), Box::new(move |g, v| g.layer_norm(c(g, &x), v, c(g, &bias), 1e-5)))
    }),
    ("layer_norm_bias", |r| {
        let (x, gain) = (random(&[3, 6], r), random(&[6], r));
        (random(&[6], r), Box::new(move |g, v| g.layer_norm(c(g, &x), c(g, &gain), v, 1e-5)))
    }),
    ("attention_q", |r| attention_slot(r, 0)),
    ("attention_k", |r| attention_slot(r, 1)),
    ("attention_v", |r| attention_slot(r, 2)),
    ("reshape", |r| (random(&[2, 6], r), Box::new(|g, v| g.reshape(v, [3, 4])))),
    ("permute", |r| (random(&[2, 3, 4], r), Box::new(|g, v| g.permute(v, &[2, 0, 1])))),
    ("gather_rows", |r| (random(&[4, 3], r), Box::new(|g, v| g.gather_rows(v, &[3, 0, 0, 2, 3])))),
    ("concat_last", |r| {
        let o = random(&[2, 3, 2], r);
        (random(&[2, 3, 4], r), Box::new(move |g, v| g.concat_last(&[c(g, &o), v, v])))
    }),
    ("im2col", |r| (random(&[2, 3, 4, 2], r), Box::new(|g, v| g.im2col(v, 3, 1)))),
    ("sum_then_scale", |r| (random(&[3, 2], r), Box::new(|g, v| Ok(g.scale(g.sum(g.square(v)), 0.5))))),
    ("avg_pool2", |r| (random(&[2, 4, 6, 3], r), Box::new(|g, v| g.avg_pool2(v)))),
    ("upsample2", |r| (random(&[2, 2, 3, 3], r), Box::new(|g, v| g.upsample2(v)))),
    ("conv2d_x", |r| {
        let w = random(&[4, 3, 3, 3], r);
        (random(&[3, 4, 5], r), Box::new(move |g, v| g.conv2d(v, c(g, &w))))
    }),
    ("conv2d_w", |r| {
        let x = random(&[3, 4, 5], r);
        (random(&[2, 3, 3, 3], r), Box::new(move |g, v| g.conv2d(c(g, &x), v)))
    }),
    ("conv2d_nhwc_x", |r| {
        let w = random(&[4, 3, 3, 3], r);
        (random(&[2, 4, 5, 3], r), Box::new(move |g, v| g.conv2d_nhwc(v, c(g, &w))))
    }),
    ("conv2d_nhwc_w", |r| {
        let x = random(&[2, 4, 5, 3], r);
        (random(&[2, 3, 3, 3], r), Box::new(move |g, v| g.conv2d_nhwc(c(g, &x), v)))
    }),
    ("conv1d_x", |r| {
        let w = random(&[4, 3, 3], r);
        (random(&[2, 5, 3], r), Box::new(move |g, v| g.conv1d(v, c(g, &w))))
    }),
    ("conv1d_w", |r| {
        let x = random(&[2, 5, 3], r);
        (random(&[4, 3, 3], r), Box::new(move |g, v| g.conv1d(c(g, &x), v)))
    }),
    ("demodulate_w", |r| {
        let phi = positive(&[2, 3], r);
        (random(&[4, 3, 9], r), Box::new(move |g, v| g.demodulate(v, c(g, &phi), 1e-8)))
    }),
    ("demodulate_phi", |r| {
        let w = random(&[4, 3, 9], r);
        (positive(&[2, 3], r), Box::new(move |g, v| g.demodulate(c(g, &w), v, 1e-8)))
    }),
    ("modulated_conv2d_x", |r| {
        let (w, phi) = (random(&[3, 2, 3, 3], r), positive(&[2], r));
        (random(&[2, 4, 4], r), Box::new(move |g, v| g.modulated_conv2d(v, c(g, &w), c(g, &phi), 1e-8)))
    }),
    ("modulated_conv2d_nhwc_x", |r| {
        let (w, phi) = (random(&[3, 2, 3, 3], r), positive(&[2, 2], r));
        (random(&[2, 4, 4, 2], r), Box::new(move |g, v| g.modulated_conv2d_nhwc(v, c(g, &w), c(g, &phi), 1e-8)))
    }),
    ("modulated_conv2d_nhwc_w", |r| {
        let (x, phi) = (random(&[2, 4, 4, 2], r), positive(&[2, 2], r));
        (random(&[3, 2, 3, 3], r), Box::new(move |g, v| g.modulated_conv2d_nhwc(c(g, &x), v, c(g, &phi), 1e-8)))
    }),
    ("modulated_conv2d_nhwc_phi", |r| {
        let (x, w) = (random(&[2, 4, 4, 2], r), random(&[3, 2, 3, 3], r));
        (positive(&[2, 2], r), Box::new(move |g, v| g.modulated_conv2d_nhwc(c(g, &x), c(g, &w), v, 1e-8)))
    }),
];

/// Names of every swept operation, in sweep order.
pub fn op_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _)| *n).collect()
}

/// Contracts `y` with fixed weights in `[0.5, 1.5)` so no coordinate's gradient vanishes.
pub fn scalarize(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(Tensor::from_fn(g.shape(y), |_| r.random_range(0.5..1.5)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst relative error per operation over `trials` random draws.
pub fn op_sweep(trials: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    CASES
        .iter()
        .map(|(name, build)| {
            let mut worst: f64 = 0.0;
            for trial in 0..trials {
                let mut r = Xoshiro256PlusPlus::seed_from_u64(trial * 7919 + name.len() as u64);
                let (x, f) = build(&mut r);
                let err = finite_diff_check(|g, v| scalarize(g, f(g, v)?, trial), &x, h)?;
                worst = worst.max(err);
            }
            Ok((*name, worst))
        })
        .collect()
}
