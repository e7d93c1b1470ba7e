//! One-dimensional linear-Gaussian toy for the free energy.
//!
//! With `d = M = 1` the decoder is made exactly linear over the relevant
//! range by offsetting its ReLU layers by a large constant, and the encoder
//! outputs a fixed Gaussian through its bias heads. The exact free energy
//! is then an expectation over one standard-normal variable (done by
//! quadrature), and the marginal likelihood a one-dimensional integral.

use rand_distr::{Distribution, StandardNormal};
use tlrm::rng::rng_from_seed;
use tlrm::rvae::{free_energy, Emission, RvaeConfig, RvaeParams, RvaeVariant};

const OFFSET: f64 = 50.0;
const A: [f64; 2] = [0.8, -0.5];
const B: [f64; 2] = [0.1, 0.9];
const C: f64 = 1.3;
const BE: f64 = -0.2;
const VAR_T: f64 = 0.5;
const VAR_E: f64 = 0.3;

fn toy(mean: f64, sd: f64) -> RvaeParams {
    let cfg = RvaeConfig {
        obs_dim: 1,
        latent: 1,
        hidden1: 1,
        hidden2: 1,
        emission: Emission::Gaussian { bounded: false },
        variant: RvaeVariant::Rvae,
        learn_trans_var: true,
    };
    let mut p = RvaeParams::zeros(cfg).unwrap();
    let mut set = |name: &str, v: &[f64]| p.tensor_mut(name).unwrap().data_mut().copy_from_slice(v);
    set("enc.mu.b", &[mean]);
    set("enc.logvar.b", &[2.0 * sd.ln()]);
    set("dec.h1.w", &[1.0]);
    set("dec.h1.b", &[OFFSET]);
    set("dec.h2.w", &[1.0]);
    set("dec.emit.w", &[C]);
    set("dec.emit.b", &[BE - C * OFFSET]);
    set("dec.trans.w", &A);
    set("dec.trans.b", &[B[0] - A[0] * OFFSET, B[1] - A[1] * OFFSET]);
    set("log_var_emiss", &[VAR_E.ln()]);
    set("log_var_trans", &[VAR_T.ln()]);
    p
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

/// `-log p(s, x)` by trapezoid quadrature over `z`.
fn marginal_cross_entropy(s: [f64; 2], x: f64) -> f64 {
    let (lo, hi, n) = (-12.0, 12.0, 200_000);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for k in 0..=n {
        let z: f64 = lo + k as f64 * h;
        let lp = normal_logpdf(z, 0.0, 1.0)
            + normal_logpdf(s[0], A[0] * z + B[0], VAR_T)
            + normal_logpdf(s[1], A[1] * z + B[1], VAR_T)
            + normal_logpdf(x, C * z + BE, VAR_E);
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        acc += w * lp.exp();
    }
    -(acc * h).ln()
}

/// `E_eps[F(eps)]` by trapezoid quadrature against the standard normal.
fn exact_free_energy(p: &RvaeParams, s: [f64; 2], x: f64) -> f64 {
    let (lo, hi, n) = (-10.0, 10.0, 4000);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for k in 0..=n {
        let e: f64 = lo + k as f64 * h;
        let f = free_energy(p, &s, &[x], &[e]).unwrap().total;
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        acc += w * f * (-0.5 * e * e).exp() / (2.0 * std::f64::consts::PI).sqrt();
    }
    acc * h
}

/// The constant dropped from the free energy: Gaussian normalisers of the
/// emission, reverse transition and prior, minus the recognition entropy's.
fn dropped_constant() -> f64 {
    let (m, d) = (1.0, 1.0);
    0.5 * (m + 2.0 * d) * (2.0 * std::f64::consts::PI).ln() - 0.5 * d
}

fn exact_posterior(s: [f64; 2], x: f64) -> (f64, f64) {
    let prec = 1.0 + (A[0] * A[0] + A[1] * A[1]) / VAR_T + C * C / VAR_E;
    let lin = (A[0] * (s[0] - B[0]) + A[1] * (s[1] - B[1])) / VAR_T + C * (x - BE) / VAR_E;
    (lin / prec, prec.recip().sqrt())
}

const S: [f64; 2] = [0.6, 0.4];
const X: f64 = 0.7;

#[test]
fn free_energy_bounds_cross_entropy() {
    let target = marginal_cross_entropy(S, X);
    let (m, sd) = exact_posterior(S, X);
    let matched = exact_free_energy(&toy(m, sd), S, X) + dropped_constant();
    assert!((matched - target).abs() < 1e-6, "matched gap {}", matched - target);
    // Offsets in posterior standard deviations; the gap is KL(q || posterior).
    for (dm, ks) in [(0.3, 1.0), (-0.2, 1.3), (0.0, 0.7), (0.5, 1.4)] {
        let f = exact_free_energy(&toy(m + dm * sd, sd * ks), S, X) + dropped_constant();
        assert!(f - target > -1e-6, "bound violated by {}", target - f);
        assert!(f - target < 0.5, "gap {} for a mild mismatch", f - target);
    }
}

#[test]
fn single_sample_estimator_is_unbiased() {
    let p = toy(0.1, 0.8);
    let exact = exact_free_energy(&p, S, X);
    let mut rng = rng_from_seed(21);
    let n = 100_000;
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n {
        let e: f64 = StandardNormal.sample(&mut rng);
        let f = free_energy(&p, &S, &[X], &[e]).unwrap().total;
        sum += f;
        sum2 += f * f;
    }
    let mean = sum / n as f64;
    let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
}
