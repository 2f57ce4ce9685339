//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod grad_suite;

use pips::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for relative error so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Builds a scalar from `inputs` on a fresh tape. Non-scalar outputs are
/// reduced with a fixed random projection so every output element matters.
pub fn scalarize(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return tape.reshape(out, &[]).unwrap();
    }
    let mut r = rng(seed ^ 0x9e37_79b9);
    let proj = Tensor::<f64>::rand_uniform(&shape, -1.0, 1.0, &mut r);
    let p = tape.constant(proj);
    let m = tape.mul(out, p).unwrap();
    tape.sum_all(m).unwrap()
}

/// Max relative error between analytic gradients (reverse sweep) and central
/// finite differences computed from forward evaluations alone.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Uniform values kept at least `margin` away from any integer, so finite
/// differences never straddle a kink at a grid line or at zero.
pub fn away_from_integers<R: Rng>(rng: &mut R, lo: f64, hi: f64, margin: f64) -> f64 {
    loop {
        let v: f64 = rng.gen_range(lo..hi);
        let frac = v - v.floor();
        if frac > margin && frac < 1.0 - margin {
            return v;
        }
    }
}

/// Random values with magnitude at least `margin`, for ops kinked at zero.
pub fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}
