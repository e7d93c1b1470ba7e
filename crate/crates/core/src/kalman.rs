//! Kalman filtering, RTS smoothing and EM for one- and two-dimensional
//! linear-Gaussian state-space models observed through a scalar channel.
//!
//! Spike counts enter as Gaussian pseudo-observations: the center of mass
//! of the population response, with variance `sigma_tc^2 / total_count`.
//!
//! Matrices are stored as `Matrix2`/`Vector2`; a model of dimension `d = 1`
//! only ever touches the leading entry and keeps the rest exactly zero.

use nalgebra::{Matrix2, Vector2};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ppc::PopulationCode;
use crate::rng::{rng_from_seed, Rng};

const JITTER: f64 = 1e-9;

/// A position measurement with known reliability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoObs {
    pub value: f64,
    pub variance: f64,
    pub valid: bool,
}

impl PseudoObs {
    pub fn new(value: f64, variance: f64) -> Self {
        Self {
            value,
            variance,
            valid: true,
        }
    }

    pub fn missing() -> Self {
        Self {
            value: 0.0,
            variance: f64::INFINITY,
            valid: false,
        }
    }
}

/// Center of mass with variance `sigma_tc^2 / sum(counts)`; invalid when
/// no neuron fired.
pub fn to_pseudo_obs(code: &PopulationCode, counts: &[u16]) -> PseudoObs {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    match code.com_decode(counts) {
        Ok(v) => PseudoObs::new(v, code.sigma_tc * code.sigma_tc / total),
        Err(_) => PseudoObs::missing(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgdsParams {
    pub d: usize,
    pub a: Matrix2<f64>,
    pub q: Matrix2<f64>,
    /// Emission row; fixed at `[1]` or `[1, 0]`.
    pub c: Vector2<f64>,
    pub mu0: Vector2<f64>,
    pub s0: Matrix2<f64>,
}

impl LgdsParams {
    /// Builds a model, zeroing everything outside the leading `d x d` block.
    pub fn new(d: usize, a: Matrix2<f64>, q: Matrix2<f64>, mu0: Vector2<f64>, s0: Matrix2<f64>) -> Result<Self> {
        if !(d == 1 || d == 2) {
            return Err(Error::Domain(format!("state dimension {d} not in {{1, 2}}")));
        }
        let p = Self {
            d,
            a: mask(&a, d),
            q: symmetrize(&mask(&q, d)),
            c: Vector2::new(1.0, 0.0),
            mu0: mask_v(&mu0, d),
            s0: symmetrize(&mask(&s0, d)),
        };
        Ok(p)
    }

    /// Largest eigenvalue modulus of the transition.
    pub fn spectral_radius(&self) -> f64 {
        if self.d == 1 {
            return self.a[(0, 0)].abs();
        }
        let tr = self.a.trace();
        let det = self.a.determinant();
        let disc = tr * tr - 4.0 * det;
        if disc < 0.0 {
            det.abs().sqrt()
        } else {
            let s = disc.sqrt();
            f64::max(((tr + s) / 2.0).abs(), ((tr - s) / 2.0).abs())
        }
    }

    /// Checks the PSD and stability invariants.
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("Q", &self.q), ("S0", &self.s0)] {
            if min_eig(m) < -1e-10 {
                return Err(Error::Domain(format!("{name} is not positive semidefinite")));
            }
        }
        if self.spectral_radius() > 1.0 + 1e-6 {
            return Err(Error::Domain(format!(
                "spectral radius {} exceeds 1",
                self.spectral_radius()
            )));
        }
        Ok(())
    }
}

/// Gaussian belief over the latent state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Belief {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl Belief {
    pub fn prior(p: &LgdsParams) -> Self {
        Self {
            mean: p.mu0,
            cov: p.s0,
        }
    }

    pub fn position(&self) -> f64 {
        self.mean[0]
    }
}

fn mask(m: &Matrix2<f64>, d: usize) -> Matrix2<f64> {
    if d == 2 {
        *m
    } else {
        Matrix2::new(m[(0, 0)], 0.0, 0.0, 0.0)
    }
}

fn mask_v(v: &Vector2<f64>, d: usize) -> Vector2<f64> {
    if d == 2 {
        *v
    } else {
        Vector2::new(v[0], 0.0)
    }
}

fn symmetrize(m: &Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

fn min_eig(m: &Matrix2<f64>) -> f64 {
    let s = symmetrize(m);
    let tr = s.trace();
    let det = s.determinant();
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    tr / 2.0 - disc
}

/// Inverse of the leading `d x d` block, zero elsewhere. Retries once with
/// diagonal jitter before giving up.
fn inv_block(m: &Matrix2<f64>, d: usize) -> Result<Matrix2<f64>> {
    let try_inv = |m: &Matrix2<f64>| -> Option<Matrix2<f64>> {
        if d == 1 {
            let v = m[(0, 0)];
            (v.abs() > 1e-300).then(|| Matrix2::new(1.0 / v, 0.0, 0.0, 0.0))
        } else {
            let det = m.determinant();
            let scale = m.abs().max().powi(2);
            (det.abs() > 1e-14 * scale && det != 0.0).then(|| {
                Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det
            })
        }
    };
    if let Some(i) = try_inv(m) {
        return Ok(i);
    }
    let j = mask(&(Matrix2::identity() * JITTER), d);
    try_inv(&(m + j)).ok_or_else(|| Error::Singularity("covariance block not invertible".into()))
}

pub fn kf_predict(p: &LgdsParams, b: &Belief) -> Belief {
    Belief {
        mean: p.a * b.mean,
        cov: symmetrize(&(p.a * b.cov * p.a.transpose() + p.q)),
    }
}

/// Scalar Kalman update with observation noise `obs.variance`. Invalid
/// observations leave the belief untouched.
pub fn kf_update(p: &LgdsParams, b: &Belief, obs: &PseudoObs) -> Belief {
    update_with_innovation(p, b, obs).0
}

/// Returns the posterior plus the innovation log-density (0 if skipped).
fn update_with_innovation(p: &LgdsParams, b: &Belief, obs: &PseudoObs) -> (Belief, f64) {
    if !obs.valid || !obs.variance.is_finite() {
        return (*b, 0.0);
    }
    let pc = b.cov * p.c;
    let s = p.c.dot(&pc) + obs.variance;
    let e = obs.value - p.c.dot(&b.mean);
    let k = pc / s;
    let mean = b.mean + k * e;
    // Joseph form keeps the covariance PSD.
    let ikc = Matrix2::identity() - k * p.c.transpose();
    let cov = ikc * b.cov * ikc.transpose() + k * k.transpose() * obs.variance;
    let ll = -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + e * e / s);
    (
        Belief {
            mean: mask_v(&mean, p.d),
            cov: symmetrize(&mask(&cov, p.d)),
        },
        ll,
    )
}

/// Forward pass output; `predicted[t]` is the belief before seeing
/// observation `t` (so `predicted[0]` is the prior).
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub predicted: Vec<Belief>,
    pub filtered: Vec<Belief>,
    pub log_likelihood: f64,
}

pub fn kf_filter(p: &LgdsParams, obs: &[PseudoObs]) -> FilterRun {
    let mut predicted = Vec::with_capacity(obs.len());
    let mut filtered = Vec::with_capacity(obs.len());
    let mut ll = 0.0;
    let mut b = Belief::prior(p);
    for (t, o) in obs.iter().enumerate() {
        if t > 0 {
            b = kf_predict(p, &b);
        }
        predicted.push(b);
        let (post, l) = update_with_innovation(p, &b, o);
        ll += l;
        b = post;
        filtered.push(b);
    }
    FilterRun {
        predicted,
        filtered,
        log_likelihood: ll,
    }
}

/// Smoothed beliefs plus lag-one cross covariances
/// `cross[t] = Cov(x_t, x_{t-1} | all data)` (`cross[0]` is zero).
#[derive(Debug, Clone)]
pub struct Smoothed {
    pub beliefs: Vec<Belief>,
    pub cross: Vec<Matrix2<f64>>,
}

pub fn rts_smooth(p: &LgdsParams, filtered: &[Belief], predicted: &[Belief]) -> Result<Smoothed> {
    if filtered.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} filtered vs {} predicted beliefs",
            filtered.len(),
            predicted.len()
        )));
    }
    let n = filtered.len();
    let mut beliefs = filtered.to_vec();
    let mut cross = vec![Matrix2::zeros(); n];
    for t in (0..n.saturating_sub(1)).rev() {
        let f = &filtered[t];
        let pred = &predicted[t + 1];
        let j = f.cov * p.a.transpose() * inv_block(&pred.cov, p.d)?;
        let next = beliefs[t + 1];
        let mean = f.mean + j * (next.mean - pred.mean);
        let cov = f.cov + j * (next.cov - pred.cov) * j.transpose();
        cross[t + 1] = next.cov * j.transpose();
        beliefs[t] = Belief {
            mean: mask_v(&mean, p.d),
            cov: symmetrize(&mask(&cov, p.d)),
        };
    }
    Ok(Smoothed { beliefs, cross })
}

/// Result of [`em_fit`]: fitted parameters and the marginal log-likelihood
/// recorded at the E-step of every iteration.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: LgdsParams,
    pub log_likelihood: Vec<f64>,
}

/// Starting point: near-identity upper-triangular transition with a
/// velocity coupling of `dt` when `d = 2`.
pub fn em_init(d: usize, dt: f64, seed: u64) -> Result<LgdsParams> {
    let mut rng = rng_from_seed(seed);
    let mut u = || rng.random_range(0.0..1e-2);
    let a = if d == 2 {
        Matrix2::new(0.99 - u(), dt + u(), 0.0, 0.99 - u())
    } else {
        Matrix2::new(0.99 - u(), 0.0, 0.0, 0.0)
    };
    LgdsParams::new(d, a, Matrix2::identity() * 1e-2, Vector2::zeros(), Matrix2::identity())
}

/// Fits `A`, `Q`, `mu0`, `S0` by EM with the emission row and per-step
/// observation noise held fixed.
pub fn em_fit(seqs: &[Vec<PseudoObs>], init: LgdsParams, iters: usize) -> Result<EmFit> {
    if iters == 0 {
        return Err(Error::Domain("EM needs at least one iteration".into()));
    }
    let mut p = init;
    let d = p.d;
    let mut lls = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut ll = 0.0;
        let mut s11 = Matrix2::zeros(); // sum E[x_t x_t^T], t >= 1
        let mut s00 = Matrix2::zeros(); // sum E[x_{t-1} x_{t-1}^T], t >= 1
        let mut s10 = Matrix2::zeros(); // sum E[x_t x_{t-1}^T], t >= 1
        let mut first_mean = Vector2::zeros();
        let mut first_second = Matrix2::zeros();
        let mut pairs = 0usize;
        for obs in seqs.iter().filter(|o| !o.is_empty()) {
            let run = kf_filter(&p, obs);
            ll += run.log_likelihood;
            let sm = rts_smooth(&p, &run.filtered, &run.predicted)?;
            let second = |b: &Belief| b.cov + b.mean * b.mean.transpose();
            first_mean += sm.beliefs[0].mean;
            first_second += second(&sm.beliefs[0]);
            for t in 1..sm.beliefs.len() {
                let (cur, prev) = (&sm.beliefs[t], &sm.beliefs[t - 1]);
                s11 += second(cur);
                s00 += second(prev);
                s10 += sm.cross[t] + cur.mean * prev.mean.transpose();
                pairs += 1;
            }
        }
        lls.push(ll);
        let n_seq = seqs.iter().filter(|o| !o.is_empty()).count();
        if n_seq == 0 || pairs == 0 {
            return Err(Error::Domain("EM needs at least one sequence of length >= 2".into()));
        }
        let a = s10 * inv_block(&s00, d)?;
        let q = (s11 - a * s10.transpose()) / pairs as f64;
        let mu0 = first_mean / n_seq as f64;
        let s0 = first_second / n_seq as f64 - mu0 * mu0.transpose();
        p = LgdsParams::new(d, a, project_psd(&q, d), mu0, project_psd(&s0, d))?;
    }
    Ok(EmFit {
        params: p,
        log_likelihood: lls,
    })
}

/// Symmetrizes and lifts the smallest eigenvalue of the active block to at
/// least the jitter level.
fn project_psd(m: &Matrix2<f64>, d: usize) -> Matrix2<f64> {
    let s = mask(&symmetrize(m), d);
    let lo = if d == 1 { s[(0, 0)] } else { min_eig(&s) };
    if lo >= JITTER {
        s
    } else {
        s + mask(&(Matrix2::identity() * (JITTER - lo)), d)
    }
}

/// Filtered position MSE: `C mean_t` after the update at `t` against the
/// true positions, averaged over every step of every sequence.
pub fn kf_position_mse(p: &LgdsParams, seqs: &[Vec<PseudoObs>], truth: &[Vec<f64>]) -> Result<f64> {
    if seqs.len() != truth.len() {
        return Err(Error::Shape("observation and truth sequence counts differ".into()));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for (obs, pos) in seqs.iter().zip(truth) {
        if obs.len() != pos.len() {
            return Err(Error::Shape("observation and truth lengths differ".into()));
        }
        let run = kf_filter(p, obs);
        for (b, x) in run.filtered.iter().zip(pos) {
            se += (p.c.dot(&b.mean) - x).powi(2);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { se / n as f64 })
}

/// Draws a latent path and noisy scalar observations with constant
/// variance `r` from `p`.
pub fn simulate_lgds(p: &LgdsParams, r: f64, len: usize, rng: &mut Rng) -> (Vec<Vector2<f64>>, Vec<PseudoObs>) {
    let chol = |m: &Matrix2<f64>| {
        let l11 = m[(0, 0)].max(0.0).sqrt();
        let l21 = if l11 > 0.0 { m[(1, 0)] / l11 } else { 0.0 };
        let l22 = (m[(1, 1)] - l21 * l21).max(0.0).sqrt();
        Matrix2::new(l11, 0.0, l21, l22)
    };
    let (lq, l0) = (chol(&p.q), chol(&p.s0));
    let normal2 = |rng: &mut Rng| {
        Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    };
    let mut xs = Vec::with_capacity(len);
    let mut ys = Vec::with_capacity(len);
    let mut x = p.mu0 + l0 * normal2(rng);
    for t in 0..len {
        if t > 0 {
            x = p.a * x + lq * normal2(rng);
        }
        let y = p.c.dot(&x) + r.sqrt() * rng.sample::<f64, _>(StandardNormal);
        xs.push(mask_v(&x, p.d));
        ys.push(PseudoObs::new(y, r));
    }
    (xs, ys)
}
