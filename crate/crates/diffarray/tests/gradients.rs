//! Finite-difference sweeps over every differentiable operation (f64, h = 1e-5).

use diffarray::suite::{op_sweep, scalarize};
use diffarray::{finite_diff_check, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const TRIALS: u64 = 50;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], r: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

#[test]
fn finite_diff_trivial_square_sum() {
    let x = Tensor::new([1], vec![3.0]).unwrap();
    let err = finite_diff_check(
        |g, v| {
            let s = g.square(v);
            Ok(g.sum(s))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-9);
}

#[test]
fn every_op_matches_finite_differences() {
    let results = op_sweep(TRIALS, H).unwrap();
    assert_eq!(results.len(), diffarray::suite::op_names().len());
    for (name, worst) in results {
        assert!(worst < TOL, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn softmax_then_dot_with_constant() {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(99);
    let c = random(&[6], &mut r);
    let x = random(&[6], &mut r);
    let err = finite_diff_check(
        |g, v| {
            let s = g.softmax(v, 0)?;
            let p = g.mul(s, g.constant(c.clone()))?;
            Ok(g.sum(p))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn full_attention_block_scalarized() {
    use diffarray::{LayerNorm, MultiHeadAttention, ParamStore};
    let mut r = Xoshiro256PlusPlus::seed_from_u64(123);
    let mut store = ParamStore::<f64>::new();
    let mut normal = || r.random_range(-1.0..1.0) * 1.5;
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut normal).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 8).unwrap();
    let kv = random(&[1, 6, 8], &mut r);
    let x = random(&[2, 4, 8], &mut r);
    let err = finite_diff_check(
        |g, v| {
            let h = ln.forward(g, &store, v)?;
            let (a, _) = mha.forward(g, &store, h, g.constant(kv.clone()), g.constant(kv.clone()), 2)?;
            let y = g.add(v, a)?;
            let y = g.silu(y);
            scalarize(g, y, 5)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..24)) {
        let g = Graph::new();
        let n = values.len();
        let y = g.value(g.softmax(g.constant(Tensor::new([n], values).unwrap()), 0).unwrap());
        let total: f64 = y.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn demodulated_norms_stay_in_band(
        weights in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 9),
        phi in prop::collection::vec(0.05f64..3.0, 3),
    ) {
        let g = Graph::new();
        let w = Tensor::new([2, 3, 9], weights).unwrap();
        let out = g.value(g.demodulate(g.constant(w.clone()), g.constant(Tensor::new([1, 3], phi.clone()).unwrap()), 1e-8).unwrap());
        for j in 0..2 {
            let n2: f64 = (0..27).map(|idx| (phi[idx / 9] * w.data()[j * 27 + idx]).powi(2)).sum();
            let got: f64 = out.data()[j * 27..(j + 1) * 27].iter().map(|v| v * v).sum();
            prop_assert!(got <= 1.0);
            if n2 >= 1.0 {
                prop_assert!(got >= 0.999);
            }
        }
    }

    #[test]
    fn matmul_is_bit_deterministic(seed in any::<u64>()) {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
        let a = random(&[7, 9], &mut r);
        let b = random(&[9, 5], &mut r);
        let run = || {
            let g = Graph::new();
            let y = g.matmul(g.constant(a.clone()), g.constant(b.clone())).unwrap();
            let y = g.softmax(y, 1).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
