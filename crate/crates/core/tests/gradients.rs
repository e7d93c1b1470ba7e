//! Tape gradients against central finite differences (step 1e-5) at ten
//! random points per loss.

use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use tlrm::harmonium::{recurrent_gradient, recurrent_term, EfhParams, UnitKind};
use tlrm::rng::{rng_from_seed, Rng};
use tlrm::rvae::{free_energy, free_energy_grad, Emission, RvaeConfig, RvaeParams, RvaeVariant};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Components smaller than this are compared on an absolute scale, since
/// the finite-difference round-off alone is about 1e-10 here.
const FLOOR: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rvae_max_error(emission: Emission, seed: u64) -> f64 {
    let cfg = RvaeConfig {
        obs_dim: 4,
        latent: 3,
        hidden1: 6,
        hidden2: 5,
        emission,
        variant: RvaeVariant::Rvae,
        learn_trans_var: true,
    };
    let mut rng = rng_from_seed(seed);
    let mut p = RvaeParams::init(cfg, &mut rng).unwrap();
    for t in p.tensors.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let batch = 2;
    let x: Vec<f64> = match emission {
        Emission::Poisson => (0..batch * 4).map(|_| rng.random_range(0..5) as f64).collect(),
        Emission::Gaussian { .. } => (0..batch * 4).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let mut s = normals(batch * 6, &mut rng);
    for r in 0..batch {
        for c in 3..6 {
            s[r * 6 + c] = s[r * 6 + c].abs() + 0.1;
        }
    }
    let eps = normals(batch * 3, &mut rng);
    let (_, grads) = free_energy_grad(&p, &s, &x, &eps).unwrap();
    let mut worst: f64 = 0.0;
    for ti in 0..p.tensors.len() {
        for k in 0..p.tensors[ti].len() {
            let mut q = p.clone();
            q.tensors[ti].data_mut()[k] += H;
            let up = free_energy(&q, &s, &x, &eps).unwrap().total;
            q.tensors[ti].data_mut()[k] -= 2.0 * H;
            let down = free_energy(&q, &s, &x, &eps).unwrap().total;
            let fd = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(grads[ti].data()[k], fd));
        }
    }
    worst
}

#[test]
fn rvae_poisson_free_energy_gradient() {
    let worst = (0..10).map(|s| rvae_max_error(Emission::Poisson, 100 + s)).fold(0.0, f64::max);
    assert!(worst < TOL, "max relative error {worst}");
}

#[test]
fn rvae_gaussian_free_energy_gradient() {
    for bounded in [false, true] {
        let worst = (0..10)
            .map(|s| rvae_max_error(Emission::Gaussian { bounded }, 200 + s))
            .fold(0.0, f64::max);
        assert!(worst < TOL, "bounded={bounded}: max relative error {worst}");
    }
}

fn rtrbm_max_error(seed: u64) -> f64 {
    let (n_obs, h, batch) = (3, 4, 2);
    let mut rng = rng_from_seed(seed);
    let mut p = EfhParams::recurrent(n_obs, UnitKind::Poisson, h).unwrap();
    p.randomize(0.5, &mut rng);
    p.b_hid.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let mut window = VecDeque::new();
    for _ in 0..3 {
        let x: Vec<f64> = (0..batch * n_obs).map(|_| rng.random_range(0..4) as f64).collect();
        let z: Vec<f64> = (0..batch * h).map(|_| rng.random_range(0.0..1.0)).collect();
        window.push_back((x, z));
    }
    let coef: Vec<f64> = (0..batch * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = p.n_visible();
    let prev = p.prev_range();
    let mut w_prev_t = vec![0.0; h * h];
    for j in 0..h {
        for i in 0..h {
            w_prev_t[i * h + j] = p.w[j * v + prev.start + i];
        }
    }
    let g = recurrent_gradient(&p, &window, &coef, batch).unwrap();
    let mut worst: f64 = 0.0;
    for idx in 0..p.w.len() + h {
        let eval = |d: f64| {
            let mut q = p.clone();
            if idx < p.w.len() {
                q.w[idx] += d;
            } else {
                q.b_hid[idx - p.w.len()] += d;
            }
            recurrent_term(&q, &window, &coef, &w_prev_t, batch).unwrap()
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        let an = if idx < p.w.len() { g.w[idx] } else { g.b_hid[idx - p.w.len()] };
        worst = worst.max(rel_err(an, fd));
    }
    worst
}

#[test]
fn rtrbm_recurrent_term_gradient() {
    let worst = (0..10).map(|s| rtrbm_max_error(300 + s)).fold(0.0, f64::max);
    assert!(worst < TOL, "max relative error {worst}");
}
