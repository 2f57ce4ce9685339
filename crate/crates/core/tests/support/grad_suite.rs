//! Finite-difference checks for every tape primitive and every loss, run on
//! random small instances.

use pips::losses::{self, LossWeights};
use pips::model::ScorePatches;
use pips::{Tape, Tensor, Var};
use rand::Rng;

use super::{away_from_integers, away_from_zero, grad_check, rng, scalarize};

pub const INSTANCES: u64 = 20;

type Check = fn(u64) -> f64;

fn uniform(seed: u64, shape: &[usize]) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn unary(seed: u64, shape: &[usize], op: fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    grad_check(&[uniform(seed, shape)], |t, v| {
        let y = op(t, v[0]);
        scalarize(t, y, seed)
    })
}

fn kinked(seed: u64, shape: &[usize], op: fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let x = away_from_zero(&mut rng(seed), shape, 1e-2);
    grad_check(&[x], |t, v| {
        let y = op(t, v[0]);
        scalarize(t, y, seed)
    })
}

fn binary(seed: u64, op: fn(&mut Tape<f64>, Var, Var) -> Var) -> f64 {
    let shape = [3, 4];
    grad_check(&[uniform(seed, &shape), uniform(seed + 1000, &shape)], |t, v| {
        let y = op(t, v[0], v[1]);
        scalarize(t, y, seed)
    })
}

fn sampling_coords(seed: u64, g: usize, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut r = rng(seed + 7);
    let mut data = Vec::with_capacity(g * n * 2);
    for _ in 0..g * n {
        data.push(away_from_integers(&mut r, 0.05, (w - 1) as f64 - 0.05, 1e-2));
        data.push(away_from_integers(&mut r, 0.05, (h - 1) as f64 - 0.05, 1e-2));
    }
    Tensor::new(&[g, n, 2], data).unwrap()
}

fn score_fixture(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let (m, t, radius, stride) = (2, 3, 1usize, 4.0);
    let mut r = rng(seed + 11);
    let scores = uniform(seed, &[m, t, 9]);
    let mut centers = Vec::new();
    let mut truth = Vec::new();
    let mut vis = Vec::new();
    for _ in 0..m * t {
        let c = [r.gen_range(5.0..20.0), r.gen_range(5.0..20.0)];
        // Mostly inside the patch footprint, occasionally outside.
        let reach = if r.gen_bool(0.8) { stride * radius as f64 } else { 3.0 * stride };
        centers.extend(c);
        truth.extend([c[0] + r.gen_range(-reach..reach), c[1] + r.gen_range(-reach..reach)]);
        vis.push(if r.gen_bool(0.8) { 1.0 } else { 0.0 });
    }
    (
        scores,
        Tensor::new(&[m, t, 2], centers).unwrap(),
        Tensor::new(&[m, t, 2], truth).unwrap(),
        Tensor::new(&[m, t], vis).unwrap(),
    )
}

fn main_fixture(seed: u64, iters: usize) -> (Vec<Tensor<f64>>, Tensor<f64>) {
    let target = Tensor::rand_uniform(&[2, 3, 2], 0.0, 10.0, &mut rng(seed));
    let mut r = rng(seed + 3);
    let xs = (0..iters)
        .map(|_| {
            let off = away_from_zero(&mut r, &[2, 3, 2], 1e-2);
            let data = target.data().iter().zip(off.data()).map(|(a, b)| a + 2.0 * b).collect();
            Tensor::new(&[2, 3, 2], data).unwrap()
        })
        .collect();
    (xs, target)
}

fn probabilities(seed: u64, n: usize) -> (Tensor<f64>, Vec<f64>) {
    let mut r = rng(seed + 5);
    // Away from 0 and 1, where ln p has a steep third derivative.
    let v = Tensor::rand_uniform(&[n], 0.15, 0.85, &mut r);
    let labels = (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    (v, labels)
}

fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("reshape", |s| unary(s, &[2, 3, 4], |t, x| t.reshape(x, &[6, 4]).unwrap())),
        ("permute", |s| unary(s, &[2, 3, 4], |t, x| t.permute(x, &[2, 0, 1]).unwrap())),
        ("transpose_last", |s| unary(s, &[2, 3, 4], |t, x| t.transpose_last(x).unwrap())),
        ("narrow", |s| unary(s, &[2, 5, 3], |t, x| t.narrow(x, 1, 1, 3).unwrap())),
        ("concat", |s| {
            grad_check(&[uniform(s, &[2, 3]), uniform(s + 1, &[2, 2])], |t, v| {
                let y = t.concat(&[v[0], v[1], v[0]], 1).unwrap();
                scalarize(t, y, s)
            })
        }),
        ("repeat_axis", |s| unary(s, &[2, 3], |t, x| t.repeat_axis(x, 1, 4).unwrap())),
        ("add", |s| binary(s, |t, a, b| t.add(a, b).unwrap())),
        ("sub", |s| binary(s, |t, a, b| t.sub(a, b).unwrap())),
        ("mul", |s| binary(s, |t, a, b| t.mul(a, b).unwrap())),
        ("scale", |s| unary(s, &[3, 4], |t, x| t.scale(x, -1.7).unwrap())),
        ("dense", |s| {
            grad_check(&[uniform(s, &[2, 3, 4]), uniform(s + 1, &[5, 4]), uniform(s + 2, &[5])], |t, v| {
                let y = t.dense(v[0], v[1], Some(v[2])).unwrap();
                scalarize(t, y, s)
            })
        }),
        ("dense_no_bias", |s| {
            grad_check(&[uniform(s, &[3, 4]), uniform(s + 1, &[2, 4])], |t, v| {
                let y = t.dense(v[0], v[1], None).unwrap();
                scalarize(t, y, s)
            })
        }),
        ("bmm", |s| {
            grad_check(&[uniform(s, &[2, 3, 4]), uniform(s + 1, &[2, 4, 2])], |t, v| {
                let y = t.bmm(v[0], v[1]).unwrap();
                scalarize(t, y, s)
            })
        }),
        ("conv2d", |s| {
            grad_check(&[uniform(s, &[1, 2, 4, 4]), uniform(s + 1, &[3, 2, 3, 3]), uniform(s + 2, &[3])], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
                scalarize(t, y, s)
            })
        }),
        ("conv2d_strided", |s| {
            grad_check(&[uniform(s, &[2, 2, 5, 5]), uniform(s + 1, &[2, 2, 3, 3])], |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1).unwrap();
                scalarize(t, y, s)
            })
        }),
        ("instance_norm", |s| unary(s, &[2, 2, 3, 3], |t, x| t.instance_norm(x, 1e-5).unwrap())),
        ("layer_norm", |s| {
            grad_check(&[uniform(s, &[3, 5]), uniform(s + 1, &[5]), uniform(s + 2, &[5])], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                scalarize(t, y, s)
            })
        }),
        ("relu", |s| kinked(s, &[3, 5], |t, x| t.relu(x).unwrap())),
        ("abs", |s| kinked(s, &[3, 5], |t, x| t.abs(x).unwrap())),
        ("gelu", |s| unary(s, &[3, 5], |t, x| t.gelu(x).unwrap())),
        ("sigmoid", |s| unary(s, &[3, 5], |t, x| t.sigmoid(x).unwrap())),
        ("softmax", |s| unary(s, &[3, 5], |t, x| t.softmax(x).unwrap())),
        ("sum_all", |s| unary(s, &[3, 5], |t, x| t.sum_all(x).unwrap())),
        ("mean_all", |s| unary(s, &[3, 5], |t, x| t.mean_all(x).unwrap())),
        ("mean_axis", |s| unary(s, &[2, 3, 4], |t, x| t.mean_axis(x, 1).unwrap())),
        ("avg_pool2", |s| unary(s, &[1, 2, 5, 4], |t, x| t.avg_pool2(x).unwrap())),
        ("bilinear_sample", |s| {
            let (g, c, h, w, n) = (2, 2, 4, 5, 3);
            grad_check(&[uniform(s, &[g, c, h, w]), sampling_coords(s, g, n, h, w)], |t, v| {
                let y = t.bilinear_sample(v[0], v[1]).unwrap();
                scalarize(t, y, s)
            })
        }),
        ("bce_mean", |s| {
            let (v, labels) = probabilities(s, 12);
            grad_check(&[v], |t, x| t.bce_mean(x[0], &labels, 1e-6).unwrap())
        }),
        ("softmax_ce", |s| {
            let targets = [Some(0), None, Some(4), Some(2)];
            grad_check(&[uniform(s, &[4, 5])], |t, x| t.softmax_ce(x[0], &targets).unwrap())
        }),
        ("loss_main", |s| {
            let (xs, target) = main_fixture(s, 3);
            grad_check(&xs, |t, v| {
                let tg = t.constant(target.clone());
                losses::loss_main(t, v, tg, 0.8).unwrap()
            })
        }),
        ("loss_visibility", |s| {
            let (v, labels) = probabilities(s, 10);
            let v = Tensor::new(&[2, 5], v.data().to_vec()).unwrap();
            grad_check(&[v], |t, x| losses::loss_visibility(t, x[0], &labels).unwrap())
        }),
        ("loss_score", |s| {
            let (a, centers, truth, vis) = score_fixture(s);
            let (b, ..) = score_fixture(s + 100);
            grad_check(&[a, b], |t, v| {
                let history: Vec<_> = v.iter().map(|&scores| ScorePatches { scores, centers: centers.clone() }).collect();
                losses::loss_score(t, &history, &truth, &vis, 1, 4).unwrap().loss
            })
        }),
        ("total_loss", |s| {
            let (xs, target) = main_fixture(s, 2);
            let (v, labels) = probabilities(s, 12);
            let (a, centers, truth, vis) = score_fixture(s);
            let mut inputs = xs;
            inputs.push(v);
            inputs.push(a);
            let w = LossWeights { main: 1.0, visibility: 0.5, score: 0.25 };
            grad_check(&inputs, |t, v| {
                let tg = t.constant(target.clone());
                let main = losses::loss_main(t, &v[..2], tg, 0.8).unwrap();
                let vis_loss = losses::loss_visibility(t, v[2], &labels).unwrap();
                let history = [ScorePatches { scores: v[3], centers: centers.clone() }];
                let score = losses::loss_score(t, &history, &truth, &vis, 1, 4).unwrap().loss;
                losses::total_loss(t, main, vis_loss, score, &w).unwrap()
            })
        }),
    ]
}

/// Worst relative error per check over all instances.
pub fn run() -> Vec<(&'static str, f64)> {
    checks()
        .into_iter()
        .map(|(name, check)| {
            let worst = (0..INSTANCES).map(|i| check(1 + 97 * i)).fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
