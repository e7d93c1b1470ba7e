//! Recurrent variational autoencoder trained one step at a time.
//!
//! At step `t` the recognition network maps `(s_{t-1}, x_t)` to a diagonal
//! Gaussian over `z_t`; its mean and variance, concatenated, become the
//! carried statistic `s_t`. The generative network maps `z_t` to the
//! emission distribution of `x_t` and, for the full model, back to a
//! Gaussian over `s_{t-1}` (the reverse transition). Gradients never cross
//! a step boundary: the incoming statistic is a stopped constant.

use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Adam, AdamState, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::ppc::PopulationCode;
use crate::rng::Rng;
use crate::seq::{batch_shape, gather_frames, Sequence};

/// Smallest variance the recognition model or a generated statistic may
/// carry.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emission {
    /// Isotropic Gaussian; `bounded` squashes the mean through a sigmoid.
    Gaussian { bounded: bool },
    /// Independent Poisson counts with a log-rate head.
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RvaeVariant {
    /// Full model with the reverse-transition term.
    Rvae,
    /// Same networks, reverse-transition term dropped.
    Tvae,
}

impl RvaeVariant {
    pub fn name(self) -> &'static str {
        match self {
            RvaeVariant::Rvae => "rvae",
            RvaeVariant::Tvae => "tvae",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RvaeConfig {
    pub obs_dim: usize,
    pub latent: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub emission: Emission,
    pub variant: RvaeVariant,
    /// When false the reverse-transition variance stays at its initial
    /// value `exp(0) = 1`.
    pub learn_trans_var: bool,
}

impl RvaeConfig {
    /// Layer sizes used for the population-code data.
    pub fn ppc(obs_dim: usize, variant: RvaeVariant) -> Self {
        Self {
            obs_dim,
            latent: 10,
            hidden1: 64,
            hidden2: 64,
            emission: Emission::Poisson,
            variant,
            learn_trans_var: true,
        }
    }

    /// Layer sizes used for video frames.
    pub fn balls(obs_dim: usize, variant: RvaeVariant) -> Self {
        Self {
            obs_dim,
            latent: 32,
            hidden1: 256,
            hidden2: 256,
            emission: Emission::Gaussian { bounded: true },
            variant,
            learn_trans_var: true,
        }
    }

    pub fn stat_dim(&self) -> usize {
        2 * self.latent
    }

    /// `(name, shape)` of every tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (m, d, h1, h2) = (self.obs_dim, self.latent, self.hidden1, self.hidden2);
        let dense = |w: &'static str, b: &'static str, out: usize, inp: usize| {
            [(w, vec![out, inp]), (b, vec![out])]
        };
        let mut v = Vec::with_capacity(N_TENSORS);
        v.extend(dense("enc.obs1.w", "enc.obs1.b", h1, m));
        v.extend(dense("enc.obs2.w", "enc.obs2.b", h2, h1));
        v.extend(dense("enc.post.w", "enc.post.b", h2, h2 + 2 * d));
        v.extend(dense("enc.mu.w", "enc.mu.b", d, h2));
        v.extend(dense("enc.logvar.w", "enc.logvar.b", d, h2));
        v.extend(dense("dec.h1.w", "dec.h1.b", h1, d));
        v.extend(dense("dec.h2.w", "dec.h2.b", h2, h1));
        v.extend(dense("dec.emit.w", "dec.emit.b", m, h2));
        v.extend(dense("dec.trans.w", "dec.trans.b", 2 * d, h2));
        v.push(("log_var_emiss", vec![1]));
        v.push(("log_var_trans", vec![1]));
        v
    }

    fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.latent == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::Domain("network sizes must be positive".into()));
        }
        Ok(())
    }
}

const N_TENSORS: usize = 20;
const ENC_OBS1: usize = 0;
const ENC_OBS2: usize = 2;
const ENC_POST: usize = 4;
const ENC_MU: usize = 6;
const ENC_LOGVAR: usize = 8;
const DEC_H1: usize = 10;
const DEC_H2: usize = 12;
const DEC_EMIT: usize = 14;
const DEC_TRANS: usize = 16;
const LOG_VAR_EMISS: usize = 18;
const LOG_VAR_TRANS: usize = 19;

#[derive(Debug, Clone, PartialEq)]
pub struct RvaeParams {
    pub config: RvaeConfig,
    /// Tensors in the order of [`RvaeConfig::tensor_shapes`].
    pub tensors: Vec<Tensor>,
}

impl RvaeParams {
    /// All weights, biases and log-variances zero.
    pub fn zeros(config: RvaeConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config.tensor_shapes().iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Ok(Self { config, tensors })
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases and log-variances zero.
    /// The recognition log-variance head starts at zero so that every
    /// posterior begins with unit variance: the carried variance is an
    /// encoder input, and a random head can amplify it step after step
    /// before training has any say.
    pub fn init(config: RvaeConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for (t, (name, shape)) in p.tensors.iter_mut().zip(config.tensor_shapes()) {
            if name.ends_with(".w") && name != "enc.logvar.w" {
                let sd = (1.0 / shape[1] as f64).sqrt();
                for x in t.data_mut() {
                    let e: f64 = StandardNormal.sample(rng);
                    *x = sd * e;
                }
            }
        }
        Ok(p)
    }

    pub fn from_tensors(config: RvaeConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if tensors.len() != shapes.len() || tensors.iter().zip(&shapes).any(|(t, (_, s))| t.shape() != s.as_slice()) {
            return Err(Error::Shape("tensor table does not match the network sizes".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        self.config.tensor_shapes().into_iter().map(|(n, _)| n).zip(&self.tensors)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.config.tensor_shapes().iter().position(|(n, _)| *n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn var_emiss(&self) -> f64 {
        self.tensors[LOG_VAR_EMISS].data()[0].exp()
    }

    pub fn var_trans(&self) -> f64 {
        self.tensors[LOG_VAR_TRANS].data()[0].exp()
    }

    /// `s_0`: the prior's mean and variance.
    pub fn initial_stats(&self) -> Vec<f64> {
        let d = self.config.latent;
        let mut s = vec![0.0; 2 * d];
        s[d..].fill(1.0);
        s
    }
}

/// The four parts of the per-step free energy, averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FreeEnergyTerms {
    pub recog_entropy_term: f64,
    pub prior_term: f64,
    pub trans_term: f64,
    pub emiss_term: f64,
    pub total: f64,
}

/// Nodes of one recorded free-energy evaluation.
#[derive(Debug, Clone)]
pub struct FreeEnergyGraph {
    pub leaves: Vec<NodeId>,
    pub mu: NodeId,
    pub sigma: NodeId,
    pub z: NodeId,
    pub emission: NodeId,
    pub trans: NodeId,
    pub recog_entropy: NodeId,
    pub prior: NodeId,
    pub trans_term: Option<NodeId>,
    pub emiss_term: NodeId,
    pub total: NodeId,
}

fn dense(tape: &mut Tape, leaves: &[NodeId], layer: usize, x: NodeId) -> Result<NodeId> {
    tape.affine(x, leaves[layer], leaves[layer + 1])
}

fn record_encode(tape: &mut Tape, leaves: &[NodeId], s_prev: NodeId, x: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
    let h = dense(tape, leaves, ENC_OBS1, x)?;
    let h = tape.relu(h)?;
    let h = dense(tape, leaves, ENC_OBS2, h)?;
    let h = tape.relu(h)?;
    let s = tape.stop_gradient(s_prev)?;
    let c = tape.concat(h, s)?;
    let h = dense(tape, leaves, ENC_POST, c)?;
    let h = tape.relu(h)?;
    let mu = dense(tape, leaves, ENC_MU, h)?;
    let lv = dense(tape, leaves, ENC_LOGVAR, h)?;
    let half = tape.scale(lv, 0.5)?;
    let log_sigma = tape.clamp_min(half, 0.5 * VAR_FLOOR.ln())?;
    let sigma = tape.exp(log_sigma)?;
    Ok((mu, sigma, log_sigma))
}

/// Emission output (Gaussian mean or Poisson log-rate) and the
/// reverse-transition mean.
fn record_decode(tape: &mut Tape, leaves: &[NodeId], emission: Emission, z: NodeId) -> Result<(NodeId, NodeId)> {
    let h = dense(tape, leaves, DEC_H1, z)?;
    let h = tape.relu(h)?;
    let h = dense(tape, leaves, DEC_H2, h)?;
    let h = tape.relu(h)?;
    let e = dense(tape, leaves, DEC_EMIT, h)?;
    let e = match emission {
        Emission::Gaussian { bounded: true } => tape.sigmoid(e)?,
        _ => e,
    };
    let t = dense(tape, leaves, DEC_TRANS, h)?;
    Ok((e, t))
}

fn push_leaves(tape: &mut Tape, params: &RvaeParams) -> Vec<NodeId> {
    params.tensors.iter().map(|t| tape.param(t.clone())).collect()
}

/// Records the single-sample free energy of a `batch`-row block on `tape`.
/// `s_prev` may be any node; it is read through a stop-gradient.
pub fn record_free_energy(
    tape: &mut Tape,
    params: &RvaeParams,
    s_prev: NodeId,
    x: NodeId,
    eps: Tensor,
) -> Result<FreeEnergyGraph> {
    let cfg = params.config;
    let batch = tape.value(x).rows();
    if tape.value(x).cols() != cfg.obs_dim || tape.value(s_prev).cols() != cfg.stat_dim() {
        return Err(Error::Shape(format!(
            "inputs of width {} and {} for a model with {} observations and {} statistics",
            tape.value(x).cols(),
            tape.value(s_prev).cols(),
            cfg.obs_dim,
            cfg.stat_dim()
        )));
    }
    if tape.value(s_prev).rows() != batch || eps.shape() != [batch, cfg.latent] {
        return Err(Error::Shape("batch sizes of s_prev, x and eps differ".into()));
    }
    let inv_b = 1.0 / batch as f64;
    let leaves = push_leaves(tape, params);
    let (mu, sigma, log_sigma) = record_encode(tape, &leaves, s_prev, x)?;
    let z = tape.reparam_sample(mu, sigma, eps)?;
    let (emission, trans) = record_decode(tape, &leaves, cfg.emission, z)?;

    let s = tape.sum(log_sigma)?;
    let recog_entropy = tape.scale(s, -inv_b)?;

    let mu2 = tape.square(mu)?;
    let mu2 = tape.sum(mu2)?;
    let sg2 = tape.square(sigma)?;
    let sg2 = tape.sum(sg2)?;
    let p = tape.add(mu2, sg2)?;
    let prior = tape.scale(p, 0.5 * inv_b)?;

    let trans_term = match cfg.variant {
        RvaeVariant::Tvae => None,
        RvaeVariant::Rvae => {
            let target = tape.stop_gradient(s_prev)?;
            let r = tape.sub(target, trans)?;
            let r = tape.square(r)?;
            let r = tape.sum(r)?;
            Some(gaussian_nll(tape, r, leaves[LOG_VAR_TRANS], cfg.stat_dim(), inv_b)?)
        }
    };

    let emiss_term = match cfg.emission {
        Emission::Gaussian { .. } => {
            let r = tape.sub(x, emission)?;
            let r = tape.square(r)?;
            let r = tape.sum(r)?;
            gaussian_nll(tape, r, leaves[LOG_VAR_EMISS], cfg.obs_dim, inv_b)?
        }
        Emission::Poisson => {
            let rate = tape.exp(emission)?;
            let rate = tape.sum(rate)?;
            let xe = tape.mul(x, emission)?;
            let xe = tape.sum(xe)?;
            let nll = tape.sub(rate, xe)?;
            tape.scale(nll, inv_b)?
        }
    };

    let mut total = tape.add(recog_entropy, prior)?;
    if let Some(t) = trans_term {
        total = tape.add(total, t)?;
    }
    total = tape.add(total, emiss_term)?;
    Ok(FreeEnergyGraph {
        leaves,
        mu,
        sigma,
        z,
        emission,
        trans,
        recog_entropy,
        prior,
        trans_term,
        emiss_term,
        total,
    })
}

/// `½ (n log v + sq / v)` per row, with `v = exp(log_var)`, for a batch
/// whose squared residuals sum to `sq`.
fn gaussian_nll(tape: &mut Tape, sq: NodeId, log_var: NodeId, n: usize, inv_b: f64) -> Result<NodeId> {
    let a = tape.scale(log_var, 0.5 * n as f64)?;
    let neg = tape.scale(log_var, -1.0)?;
    let prec = tape.exp(neg)?;
    let b = tape.mul(sq, prec)?;
    let b = tape.scale(b, 0.5 * inv_b)?;
    tape.add(a, b)
}

fn terms_of(tape: &Tape, g: &FreeEnergyGraph) -> FreeEnergyTerms {
    let v = |n: NodeId| tape.value(n).item();
    FreeEnergyTerms {
        recog_entropy_term: v(g.recog_entropy),
        prior_term: v(g.prior),
        trans_term: g.trans_term.map_or(0.0, v),
        emiss_term: v(g.emiss_term),
        total: v(g.total),
    }
}

fn check_block(params: &RvaeParams, s_prev: &[f64], x: &[f64]) -> Result<usize> {
    let cfg = params.config;
    let batch = x.len() / cfg.obs_dim;
    if batch == 0 || x.len() != batch * cfg.obs_dim || s_prev.len() != batch * cfg.stat_dim() {
        return Err(Error::Shape(format!(
            "{} observations and {} statistics do not form a batch for this model",
            x.len(),
            s_prev.len()
        )));
    }
    Ok(batch)
}

/// Recognition mean and standard deviation for each row.
pub fn encode(params: &RvaeParams, s_prev: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let batch = check_block(params, s_prev, x)?;
    let cfg = params.config;
    let mut tape = Tape::new();
    let leaves = push_leaves(&mut tape, params);
    let s = tape.input(Tensor::matrix(batch, cfg.stat_dim(), s_prev.to_vec())?);
    let xi = tape.input(Tensor::matrix(batch, cfg.obs_dim, x.to_vec())?);
    let (mu, sigma, _) = record_encode(&mut tape, &leaves, s, xi)?;
    Ok((tape.value(mu).data().to_vec(), tape.value(sigma).data().to_vec()))
}

/// Generative outputs for latent rows `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Gaussian mean, or Poisson rates.
    pub emission: Vec<f64>,
    /// Reverse-transition mean, `2d` per row.
    pub trans: Vec<f64>,
}

pub fn decode(params: &RvaeParams, z: &[f64]) -> Result<Decoded> {
    let cfg = params.config;
    if z.is_empty() || z.len() % cfg.latent != 0 {
        return Err(Error::Shape(format!("{} latent values for d = {}", z.len(), cfg.latent)));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("latent must be finite".into()));
    }
    let mut tape = Tape::new();
    let leaves = push_leaves(&mut tape, params);
    let zi = tape.input(Tensor::matrix(z.len() / cfg.latent, cfg.latent, z.to_vec())?);
    let (e, t) = record_decode(&mut tape, &leaves, cfg.emission, zi)?;
    let mut emission = tape.value(e).data().to_vec();
    if cfg.emission == Emission::Poisson {
        emission.iter_mut().for_each(|v| *v = v.exp());
    }
    Ok(Decoded {
        emission,
        trans: tape.value(t).data().to_vec(),
    })
}

/// Single-sample free energy for one batch and one noise draw `eps`.
pub fn free_energy(params: &RvaeParams, s_prev: &[f64], x: &[f64], eps: &[f64]) -> Result<FreeEnergyTerms> {
    let batch = check_block(params, s_prev, x)?;
    let cfg = params.config;
    let mut tape = Tape::new();
    let s = tape.input(Tensor::matrix(batch, cfg.stat_dim(), s_prev.to_vec())?);
    let xi = tape.input(Tensor::matrix(batch, cfg.obs_dim, x.to_vec())?);
    let g = record_free_energy(&mut tape, params, s, xi, Tensor::matrix(batch, cfg.latent, eps.to_vec())?)?;
    Ok(terms_of(&tape, &g))
}

/// Free energy and its gradient with respect to every tensor of `params`.
pub fn free_energy_grad(
    params: &RvaeParams,
    s_prev: &[f64],
    x: &[f64],
    eps: &[f64],
) -> Result<(FreeEnergyTerms, Vec<Tensor>)> {
    let batch = check_block(params, s_prev, x)?;
    let cfg = params.config;
    let mut tape = Tape::new();
    let s = tape.input(Tensor::matrix(batch, cfg.stat_dim(), s_prev.to_vec())?);
    let xi = tape.input(Tensor::matrix(batch, cfg.obs_dim, x.to_vec())?);
    let g = record_free_energy(&mut tape, params, s, xi, Tensor::matrix(batch, cfg.latent, eps.to_vec())?)?;
    let mut grads = tape.gradient(g.total)?;
    let gs = g
        .leaves
        .iter()
        .map(|&l| grads.take(l).expect("every tensor is a leaf"))
        .collect();
    Ok((terms_of(&tape, &g), gs))
}

/// `(mu, sigma)` rows into `(mu, sigma^2)` statistic rows.
fn to_stats(mu: &[f64], sigma: &[f64], d: usize) -> Vec<f64> {
    let mut s = Vec::with_capacity(2 * mu.len());
    for (m, sg) in mu.chunks(d).zip(sigma.chunks(d)) {
        s.extend_from_slice(m);
        s.extend(sg.iter().map(|v| v * v));
    }
    s
}

/// Adam state for one model.
#[derive(Debug, Clone)]
pub struct RvaeTrainer {
    pub adam: Adam,
    state: AdamState,
}

/// What one training step reports.
#[derive(Debug, Clone)]
pub struct TrainStep {
    /// Statistics for the next step, from the pre-update recognition model.
    pub stats: Vec<f64>,
    pub terms: FreeEnergyTerms,
}

impl RvaeTrainer {
    pub fn new(params: &RvaeParams, adam: Adam) -> Self {
        let refs: Vec<&Tensor> = params.tensors.iter().collect();
        Self {
            adam,
            state: AdamState::new(&refs),
        }
    }

    /// One Adam step on the free energy of `(s_prev, x_t)`, a block of
    /// rows from independent sequences. Nothing else about the sequence is
    /// visible here.
    pub fn train_step(&mut self, params: &mut RvaeParams, s_prev: &[f64], x_t: &[f64], rng: &mut Rng) -> Result<TrainStep> {
        let batch = check_block(params, s_prev, x_t)?;
        let d = params.config.latent;
        let eps: Vec<f64> = (0..batch * d).map(|_| StandardNormal.sample(rng)).collect();
        let cfg = params.config;
        let mut tape = Tape::new();
        let s = tape.input(Tensor::matrix(batch, cfg.stat_dim(), s_prev.to_vec())?);
        let xi = tape.input(Tensor::matrix(batch, cfg.obs_dim, x_t.to_vec())?);
        let g = record_free_energy(&mut tape, params, s, xi, Tensor::matrix(batch, d, eps)?)?;
        let stats = to_stats(tape.value(g.mu).data(), tape.value(g.sigma).data(), d);
        let terms = terms_of(&tape, &g);
        let mut grads = tape.gradient(g.total)?;
        let mut gs: Vec<Tensor> = g.leaves.iter().map(|&l| grads.take(l).expect("leaf")).collect();
        if !cfg.learn_trans_var {
            gs[LOG_VAR_TRANS].data_mut().fill(0.0);
        }
        if gs.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain("non-finite gradient".into()));
        }
        let grefs: Vec<&Tensor> = gs.iter().collect();
        let mut prefs: Vec<&mut Tensor> = params.tensors.iter_mut().collect();
        crate::diff::adam_step(&mut prefs, &grefs, &mut self.state, &self.adam)?;
        Ok(TrainStep { stats, terms })
    }
}

/// Runs equal-length sequences in lockstep from `s_0`, training at every
/// step when `trainer` is given. Returns `s_1..s_T` (one `batch x 2d`
/// block per step) and the mean free energy (zero without training).
pub fn run_sequences(
    params: &mut RvaeParams,
    seqs: &[&Sequence],
    mut trainer: Option<&mut RvaeTrainer>,
    rng: &mut Rng,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let (dim, len) = batch_shape(seqs)?;
    if dim != params.config.obs_dim {
        return Err(Error::Shape(format!("model expects {}-wide observations, got {dim}", params.config.obs_dim)));
    }
    let batch = seqs.len();
    let d = params.config.latent;
    let mut s = params.initial_stats().repeat(batch);
    let mut x = Vec::new();
    let mut out = Vec::with_capacity(len);
    let mut loss = 0.0;
    for t in 0..len {
        gather_frames(seqs, t, &mut x);
        s = match trainer.as_deref_mut() {
            Some(tr) => {
                let step = tr.train_step(params, &s, &x, rng)?;
                loss += step.terms.total;
                step.stats
            }
            None => {
                let (mu, sigma) = encode(params, &s, &x)?;
                to_stats(&mu, &sigma, d)
            }
        };
        out.push(s.clone());
    }
    Ok((out, loss / len as f64))
}

/// Single-sequence form of [`run_sequences`].
pub fn run_sequence(params: &mut RvaeParams, seq: &Sequence, trainer: Option<&mut RvaeTrainer>, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    Ok(run_sequences(params, &[seq], trainer, rng)?.0)
}

/// Position MSE decoded from the expected spike counts at the posterior
/// mean of each step.
pub fn ppc_eval(params: &RvaeParams, seqs: &[Sequence], code: &PopulationCode, truth: &[Vec<f64>]) -> Result<f64> {
    if params.config.emission != Emission::Poisson {
        return Err(Error::UnsupportedVariant("position decoding needs a Poisson emission".into()));
    }
    let d = params.config.latent;
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let mut p = params.clone();
    let (stats, _) = run_sequences(&mut p, &refs, None, &mut crate::rng::rng_from_seed(0))?;
    let mut se = 0.0;
    let mut n = 0usize;
    for (t, s) in stats.iter().enumerate() {
        let z: Vec<f64> = s.chunks(2 * d).flat_map(|r| r[..d].to_vec()).collect();
        let rates = decode(params, &z)?.emission;
        for (b, r) in rates.chunks(params.config.obs_dim).enumerate() {
            let pos = code.com_decode_real(r)?;
            se += (pos - truth[b][t]).powi(2);
            n += 1;
        }
    }
    Ok(se / n.max(1) as f64)
}

/// Samples a sequence backwards from `z_T ~ N(0, I)`: emit the noiseless
/// emission mean, read the previous statistic off the reverse transition
/// (variances floored), draw the previous latent from it, and repeat.
/// Frame 0 of the result is `x_T`.
pub fn generate_backward(params: &RvaeParams, len: usize, rng: &mut Rng) -> Result<Sequence> {
    if params.config.variant == RvaeVariant::Tvae {
        return Err(Error::UnsupportedVariant(
            "tvae has no reverse transition to generate from".into(),
        ));
    }
    if len == 0 {
        return Err(Error::Domain("need at least one frame".into()));
    }
    let d = params.config.latent;
    let mut z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut frames = Vec::with_capacity(len * params.config.obs_dim);
    for t in 0..len {
        let out = decode(params, &z)?;
        frames.extend_from_slice(&out.emission);
        if t + 1 < len {
            for c in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                z[c] = out.trans[c] + out.trans[d + c].max(VAR_FLOOR).sqrt() * e;
            }
        }
    }
    Sequence::new(params.config.obs_dim, frames)
}
