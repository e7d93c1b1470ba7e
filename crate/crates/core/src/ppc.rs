//! Population-code dataset: a noise-driven damped oscillator whose position
//! is reported by Poisson neurons with Gaussian tuning curves.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

/// Exactly discretized `x'' = -omega^2 x - 2 zeta omega x' + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillatorModel {
    pub omega: f64,
    pub zeta: f64,
    pub dt: f64,
    pub q: f64,
    /// Transition over one step, state = (position, velocity).
    pub transition: Matrix2<f64>,
    /// Process-noise covariance accumulated over one step.
    pub noise_cov: Matrix2<f64>,
}

impl OscillatorModel {
    /// Discretizes the continuous system with Van Loan's method.
    pub fn new(omega: f64, zeta: f64, dt: f64, q: f64) -> Result<Self> {
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(Error::Domain(format!("zeta = {zeta} is not underdamped")));
        }
        if !(omega > 0.0 && dt > 0.0 && q >= 0.0) {
            return Err(Error::Domain(format!(
                "need omega > 0, dt > 0, q >= 0 (got {omega}, {dt}, {q})"
            )));
        }
        let f = Matrix2::new(0.0, 1.0, -omega * omega, -2.0 * zeta * omega);
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-f));
        m[(1, 3)] = q;
        m.fixed_view_mut::<2, 2>(2, 2).copy_from(&f.transpose());
        let e = (m * dt).exp();
        let transition = e.fixed_view::<2, 2>(2, 2).transpose();
        let g12 = e.fixed_view::<2, 2>(0, 2).into_owned();
        let noise_cov = transition * g12;
        let noise_cov = (noise_cov + noise_cov.transpose()) * 0.5;
        Ok(Self {
            omega,
            zeta,
            dt,
            q,
            transition,
            noise_cov,
        })
    }

    /// Chooses `q` so that the stationary position standard deviation is
    /// `pos_std`.
    pub fn with_stationary_std(omega: f64, zeta: f64, dt: f64, pos_std: f64) -> Result<Self> {
        let unit = Self::new(omega, zeta, dt, 1.0)?;
        let var = unit.stationary_cov()?[(0, 0)];
        Self::new(omega, zeta, dt, pos_std * pos_std / var)
    }

    /// Solves the discrete Lyapunov equation `S = A S A^T + Q`.
    pub fn stationary_cov(&self) -> Result<Matrix2<f64>> {
        let a = &self.transition;
        let mut k = Matrix4::identity();
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for r in 0..2 {
                        // vec index (column major): (row, col) -> col * 2 + row
                        k[(j * 2 + i, r * 2 + p)] -= a[(i, p)] * a[(j, r)];
                    }
                }
            }
        }
        let qv = Vector4::new(
            self.noise_cov[(0, 0)],
            self.noise_cov[(1, 0)],
            self.noise_cov[(0, 1)],
            self.noise_cov[(1, 1)],
        );
        let s = k
            .lu()
            .solve(&qv)
            .ok_or_else(|| Error::Singularity("Lyapunov system".into()))?;
        let s = Matrix2::new(s[0], s[2], s[1], s[3]);
        Ok((s + s.transpose()) * 0.5)
    }

    /// Eigenvalue modulus of the transition (both eigenvalues share it).
    pub fn spectral_radius(&self) -> f64 {
        self.transition.determinant().abs().sqrt()
    }
}

/// Position/velocity samples over time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn positions(&self) -> Vec<f64> {
        self.states.iter().map(|s| s[0]).collect()
    }
}

fn gaussian2(rng: &mut Rng, cov: &Matrix2<f64>) -> Vector2<f64> {
    let z = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
    // 2x2 Cholesky that tolerates a singular (e.g. all-zero) covariance.
    let l11 = cov[(0, 0)].max(0.0).sqrt();
    let l21 = if l11 > 0.0 { cov[(1, 0)] / l11 } else { 0.0 };
    let l22 = (cov[(1, 1)] - l21 * l21).max(0.0).sqrt();
    Vector2::new(l11 * z[0], l21 * z[0] + l22 * z[1])
}

/// Runs the latent dynamics for `len` steps from a stationary draw.
pub fn simulate_latent(model: &OscillatorModel, len: usize, rng: &mut Rng) -> Result<Trajectory> {
    let x0 = gaussian2(rng, &model.stationary_cov()?);
    Ok(simulate_latent_from(model, [x0[0], x0[1]], len, rng))
}

/// Runs the latent dynamics for `len` steps from a given state.
pub fn simulate_latent_from(model: &OscillatorModel, x0: [f64; 2], len: usize, rng: &mut Rng) -> Trajectory {
    let mut states = Vec::with_capacity(len);
    let mut x = Vector2::new(x0[0], x0[1]);
    for t in 0..len {
        if t > 0 {
            x = model.transition * x + gaussian2(rng, &model.noise_cov);
        }
        states.push([x[0], x[1]]);
    }
    Trajectory { states }
}

/// Gaussian-tuned Poisson population tiling an interval of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationCode {
    pub preferred: Vec<f64>,
    pub sigma_tc: f64,
    pub gain: f64,
}

impl PopulationCode {
    /// `n` centers evenly spanning `[lo, hi]`, tuning width equal to the
    /// center spacing.
    pub fn tiling(n: usize, lo: f64, hi: f64, gain: f64) -> Result<Self> {
        if n < 2 || hi <= lo {
            return Err(Error::Domain(format!("cannot tile [{lo}, {hi}] with {n} neurons")));
        }
        let spacing = (hi - lo) / (n - 1) as f64;
        Self::new((0..n).map(|i| lo + spacing * i as f64).collect(), spacing, gain)
    }

    pub fn new(preferred: Vec<f64>, sigma_tc: f64, gain: f64) -> Result<Self> {
        if !(sigma_tc > 0.0 && gain > 0.0) {
            return Err(Error::Domain("tuning width and gain must be positive".into()));
        }
        if preferred.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("preferred angles must be strictly increasing".into()));
        }
        Ok(Self {
            preferred,
            sigma_tc,
            gain,
        })
    }

    pub fn n_neurons(&self) -> usize {
        self.preferred.len()
    }

    pub fn tuning_rates(&self, position: f64) -> Vec<f64> {
        let s2 = 2.0 * self.sigma_tc * self.sigma_tc;
        self.preferred
            .iter()
            .map(|&p| self.gain * (-(position - p).powi(2) / s2).exp())
            .collect()
    }

    /// Center of mass of a spike-count vector.
    pub fn com_decode(&self, counts: &[u16]) -> Result<f64> {
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        if total == 0.0 {
            return Err(Error::NoSpikes);
        }
        let num: f64 = counts.iter().zip(&self.preferred).map(|(&c, &p)| c as f64 * p).sum();
        Ok(num / total)
    }

    /// Center of mass of a nonnegative real vector (e.g. model rates).
    pub fn com_decode_real(&self, values: &[f64]) -> Result<f64> {
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain("values must be finite and nonnegative".into()));
        }
        let total: f64 = values.iter().sum();
        if total == 0.0 {
            return Err(Error::NoSpikes);
        }
        let num: f64 = values.iter().zip(&self.preferred).map(|(&v, &p)| v * p).sum();
        Ok(num / total)
    }
}

/// Independent Poisson draws, one per rate.
pub fn emit_spikes(rates: &[f64], rng: &mut Rng) -> Result<Vec<u16>> {
    rates
        .iter()
        .map(|&r| {
            if r < 0.0 || !r.is_finite() {
                Err(Error::Domain(format!("invalid Poisson rate {r}")))
            } else if r == 0.0 {
                Ok(0)
            } else {
                let d = Poisson::new(r).map_err(|e| Error::Domain(e.to_string()))?;
                let c: f64 = d.sample(rng);
                Ok(c.min(u16::MAX as f64) as u16)
            }
        })
        .collect()
}

/// Spike counts over time, `len x n_neurons` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    pub n_neurons: usize,
    pub counts: Vec<u16>,
}

impl SpikeTrain {
    pub fn len(&self) -> usize {
        self.counts.len() / self.n_neurons
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[u16] {
        &self.counts[t * self.n_neurons..(t + 1) * self.n_neurons]
    }

    pub fn frame_f64(&self, t: usize) -> Vec<f64> {
        self.frame(t).iter().map(|&c| c as f64).collect()
    }
}

/// Generator constants for the PPC dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcConfig {
    pub omega: f64,
    pub zeta: f64,
    pub dt: f64,
    pub pos_std: f64,
    pub n_neurons: usize,
    pub lo: f64,
    pub hi: f64,
    pub gain: f64,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub steps: usize,
}

impl Default for PpcConfig {
    fn default() -> Self {
        Self {
            omega: 2.0 * std::f64::consts::PI * 0.2,
            zeta: 0.1,
            dt: 0.05,
            pos_std: 0.5,
            n_neurons: 15,
            lo: -2.0,
            hi: 2.0,
            gain: 4.0,
            train_trajectories: 40,
            test_trajectories: 10,
            steps: 1000,
        }
    }
}

impl PpcConfig {
    pub fn oscillator(&self) -> Result<OscillatorModel> {
        OscillatorModel::with_stationary_std(self.omega, self.zeta, self.dt, self.pos_std)
    }

    pub fn code(&self) -> Result<PopulationCode> {
        PopulationCode::tiling(self.n_neurons, self.lo, self.hi, self.gain)
    }
}

/// Paired latent trajectories and spike trains.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcDataset {
    pub trajectories: Vec<Trajectory>,
    pub spikes: Vec<SpikeTrain>,
}

impl PpcDataset {
    /// Draws `n` trajectories of `len` steps. Trajectory `i` uses its own
    /// sub-stream so the set is stable under changes of `n`.
    pub fn generate(
        model: &OscillatorModel,
        code: &PopulationCode,
        n: usize,
        len: usize,
        seeds: &SeedStream,
    ) -> Result<Self> {
        let mut trajectories = Vec::with_capacity(n);
        let mut spikes = Vec::with_capacity(n);
        for i in 0..n {
            let s = seeds.child(&format!("trajectory/{i}"));
            let traj = simulate_latent(model, len, &mut s.rng("latent"))?;
            let mut rng = s.rng("spikes");
            let mut counts = Vec::with_capacity(len * code.n_neurons());
            for st in &traj.states {
                counts.extend(emit_spikes(&code.tuning_rates(st[0]), &mut rng)?);
            }
            trajectories.push(traj);
            spikes.push(SpikeTrain {
                n_neurons: code.n_neurons(),
                counts,
            });
        }
        Ok(Self {
            trajectories,
            spikes,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.len())
    }

    /// Binary layout: `"PPC1"`, then `T`, `n_neurons`, `n_trajectories` as
    /// little-endian `u32`, then per trajectory `T x 2` `f64` states followed
    /// by `T x n_neurons` `u16` counts.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let n_neurons = self.spikes.first().map_or(0, |s| s.n_neurons);
        w.write_all(b"PPC1")?;
        for v in [self.steps(), n_neurons, self.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for (traj, sp) in self.trajectories.iter().zip(&self.spikes) {
            for s in &traj.states {
                w.write_all(&s[0].to_le_bytes())?;
                w.write_all(&s[1].to_le_bytes())?;
            }
            for c in &sp.counts {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("PPC1: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != b"PPC1" {
            return Err(Error::Format("missing PPC1 magic".into()));
        }
        let mut u = [0u8; 4];
        let mut hdr = [0usize; 3];
        for h in hdr.iter_mut() {
            r.read_exact(&mut u).map_err(fmt)?;
            *h = u32::from_le_bytes(u) as usize;
        }
        let [steps, n_neurons, n] = hdr;
        let mut trajectories = Vec::with_capacity(n);
        let mut spikes = Vec::with_capacity(n);
        let mut f = [0u8; 8];
        let mut c = [0u8; 2];
        for _ in 0..n {
            let mut states = Vec::with_capacity(steps);
            for _ in 0..steps {
                r.read_exact(&mut f).map_err(fmt)?;
                let p = f64::from_le_bytes(f);
                r.read_exact(&mut f).map_err(fmt)?;
                states.push([p, f64::from_le_bytes(f)]);
            }
            let mut counts = Vec::with_capacity(steps * n_neurons);
            for _ in 0..steps * n_neurons {
                r.read_exact(&mut c).map_err(fmt)?;
                counts.push(u16::from_le_bytes(c));
            }
            trajectories.push(Trajectory { states });
            spikes.push(SpikeTrain { n_neurons, counts });
        }
        Ok(Self {
            trajectories,
            spikes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_from(&mut f)
    }

    /// One row per (trajectory, step): `traj,t,position,velocity,c0..cN`.
    pub fn to_csv(&self) -> String {
        let n_neurons = self.spikes.first().map_or(0, |s| s.n_neurons);
        let mut out = String::from("trajectory,t,position,velocity");
        for i in 0..n_neurons {
            out.push_str(&format!(",n{i}"));
        }
        out.push('\n');
        for (k, (traj, sp)) in self.trajectories.iter().zip(&self.spikes).enumerate() {
            for (t, s) in traj.states.iter().enumerate() {
                out.push_str(&format!("{k},{t},{:.6e},{:.6e}", s[0], s[1]));
                for c in sp.frame(t) {
                    out.push_str(&format!(",{c}"));
                }
                out.push('\n');
            }
        }
        out
    }
}
