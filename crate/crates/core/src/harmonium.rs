//! Exponential-family harmoniums with a partitioned visible layer.
//!
//! The visible vector at time `t` is `[obs_t ; zbar_{t-1}]`, where
//! `zbar_{t-1}` is the hidden-mean vector computed at the previous step.
//! Three training regimes share the architecture:
//!
//! * **rEFH** models the carried hidden means as ordinary visibles, so the
//!   negative phase reconstructs them too.
//! * **TRBM** only conditions on them: the carried block stays clamped.
//! * **RTRBM** is the TRBM plus gradients through the hidden recursion,
//!   truncated to a fixed number of past steps.
//!
//! Hidden units are Bernoulli. Visible blocks are Poisson (natural
//! parameter `log rate`) or real-valued Bernoulli means.

use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};

use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{gemm, sigmoid};
use crate::ppc::PopulationCode;
use crate::rng::Rng;
use crate::seq::{batch_shape, gather_frames, Sequence};

/// Poisson natural parameters are clamped here before exponentiation.
pub const MAX_NATURAL: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Poisson,
    RealBernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    Observation,
    PrevSuffStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisibleBlock {
    pub size: usize,
    pub kind: UnitKind,
    pub role: BlockRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EfhVariantTag {
    Trbm,
    Refh,
    Rtrbm,
}

impl EfhVariantTag {
    pub fn name(self) -> &'static str {
        match self {
            EfhVariantTag::Trbm => "trbm",
            EfhVariantTag::Refh => "refh",
            EfhVariantTag::Rtrbm => "rtrbm",
        }
    }

    /// Blocks held fixed during the negative phase.
    pub fn clamp_roles(self) -> &'static [BlockRole] {
        match self {
            EfhVariantTag::Refh => &[],
            EfhVariantTag::Trbm | EfhVariantTag::Rtrbm => &[BlockRole::PrevSuffStats],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfhVariant {
    pub tag: EfhVariantTag,
    pub cd_k: usize,
    /// Past steps differentiated through (RTRBM only).
    pub bptt_horizon: usize,
}

impl EfhVariant {
    pub fn new(tag: EfhVariantTag, cd_k: usize, bptt_horizon: usize) -> Result<Self> {
        if cd_k == 0 {
            return Err(Error::Domain("cd_k must be at least 1".into()));
        }
        Ok(Self {
            tag,
            cd_k,
            bptt_horizon: if tag == EfhVariantTag::Rtrbm { bptt_horizon } else { 0 },
        })
    }
}

/// Weights `W` (`H x V`, row-major) and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct EfhParams {
    pub layout: Vec<VisibleBlock>,
    pub n_hidden: usize,
    pub w: Vec<f64>,
    pub b_vis: Vec<f64>,
    pub b_hid: Vec<f64>,
}

/// Visible means for a hidden vector, with the number of Poisson units
/// whose natural parameter had to be clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibleMeans {
    pub values: Vec<f64>,
    pub clamped: usize,
}

impl EfhParams {
    /// All-zero parameters for `layout`.
    pub fn new(layout: Vec<VisibleBlock>, n_hidden: usize) -> Result<Self> {
        let prev: Vec<_> = layout.iter().filter(|b| b.role == BlockRole::PrevSuffStats).collect();
        if prev.len() != 1 || prev[0].size != n_hidden {
            return Err(Error::Domain(format!(
                "layout needs exactly one carried block of size {n_hidden}"
            )));
        }
        if prev[0].kind != UnitKind::RealBernoulli {
            return Err(Error::Domain("carried block must hold Bernoulli means".into()));
        }
        if layout.iter().any(|b| b.size == 0) || n_hidden == 0 {
            return Err(Error::Domain("empty block".into()));
        }
        let v: usize = layout.iter().map(|b| b.size).sum();
        Ok(Self {
            layout,
            n_hidden,
            w: vec![0.0; n_hidden * v],
            b_vis: vec![0.0; v],
            b_hid: vec![0.0; n_hidden],
        })
    }

    /// `[obs (n_obs units of `kind`) ; carried hidden means (n_hidden)]`.
    pub fn recurrent(n_obs: usize, kind: UnitKind, n_hidden: usize) -> Result<Self> {
        Self::new(
            vec![
                VisibleBlock {
                    size: n_obs,
                    kind,
                    role: BlockRole::Observation,
                },
                VisibleBlock {
                    size: n_hidden,
                    kind: UnitKind::RealBernoulli,
                    role: BlockRole::PrevSuffStats,
                },
            ],
            n_hidden,
        )
    }

    /// Gaussian weights with standard deviation `scale`.
    pub fn randomize(&mut self, scale: f64, rng: &mut Rng) {
        let d = Normal::new(0.0, scale).expect("finite scale");
        self.w.iter_mut().for_each(|w| *w = d.sample(rng));
    }

    pub fn n_visible(&self) -> usize {
        self.b_vis.len()
    }

    /// Column range of the first block with `role`.
    pub fn block_range(&self, role: BlockRole) -> std::ops::Range<usize> {
        let mut start = 0;
        for b in &self.layout {
            if b.role == role {
                return start..start + b.size;
            }
            start += b.size;
        }
        0..0
    }

    pub fn obs_range(&self) -> std::ops::Range<usize> {
        self.block_range(BlockRole::Observation)
    }

    pub fn prev_range(&self) -> std::ops::Range<usize> {
        self.block_range(BlockRole::PrevSuffStats)
    }

    /// The carried statistic at the start of a sequence.
    pub fn initial_suffstats(&self) -> Vec<f64> {
        self.b_hid.iter().map(|&b| sigmoid(b)).collect()
    }

    pub fn hidden_means(&self, visible: &[f64]) -> Vec<f64> {
        self.hidden_batch(visible, 1)
    }

    /// `sigmoid(V W^T + b_hid)` for a `batch x V` block.
    pub fn hidden_batch(&self, visible: &[f64], batch: usize) -> Vec<f64> {
        let (h, v) = (self.n_hidden, self.n_visible());
        assert_eq!(visible.len(), batch * v, "visible batch width");
        let mut out = Vec::with_capacity(batch * h);
        for _ in 0..batch {
            out.extend_from_slice(&self.b_hid);
        }
        gemm(batch, v, h, 1.0, visible, false, &self.w, true, 1.0, &mut out);
        out.iter_mut().for_each(|x| *x = sigmoid(*x));
        out
    }

    /// `H W + b_vis` for a `batch x H` block.
    fn visible_natural(&self, hidden: &[f64], batch: usize) -> Vec<f64> {
        let (h, v) = (self.n_hidden, self.n_visible());
        assert_eq!(hidden.len(), batch * h, "hidden batch width");
        let mut out = Vec::with_capacity(batch * v);
        for _ in 0..batch {
            out.extend_from_slice(&self.b_vis);
        }
        gemm(batch, h, v, 1.0, hidden, false, &self.w, false, 1.0, &mut out);
        out
    }

    /// Blockwise means: `exp` for Poisson, `sigmoid` for Bernoulli.
    pub fn visible_means(&self, hidden: &[f64]) -> VisibleMeans {
        self.visible_means_batch(hidden, 1)
    }

    pub fn visible_means_batch(&self, hidden: &[f64], batch: usize) -> VisibleMeans {
        let mut values = self.visible_natural(hidden, batch);
        let v = self.n_visible();
        let mut clamped = 0;
        for row in values.chunks_mut(v) {
            let mut start = 0;
            for b in &self.layout {
                for x in &mut row[start..start + b.size] {
                    *x = match b.kind {
                        UnitKind::Poisson => {
                            if *x > MAX_NATURAL {
                                clamped += 1;
                                MAX_NATURAL.exp()
                            } else {
                                x.exp()
                            }
                        }
                        UnitKind::RealBernoulli => sigmoid(*x),
                    };
                }
                start += b.size;
            }
        }
        VisibleMeans { values, clamped }
    }

    /// Bernoulli hidden sample given one visible vector.
    pub fn sample_hidden(&self, visible: &[f64], rng: &mut Rng) -> Vec<f64> {
        sample_bernoulli(&self.hidden_means(visible), rng)
    }

    pub fn sample_visible(&self, hidden: &[f64], rng: &mut Rng) -> Vec<f64> {
        let mut m = self.visible_means(hidden).values;
        self.sample_from_means(&mut m, rng);
        m
    }

    fn sample_from_means(&self, means: &mut [f64], rng: &mut Rng) {
        let v = self.n_visible();
        for row in means.chunks_mut(v) {
            let mut start = 0;
            for b in &self.layout {
                for x in &mut row[start..start + b.size] {
                    *x = sample_unit(b.kind, *x, rng);
                }
                start += b.size;
            }
        }
    }
}

fn sample_unit(kind: UnitKind, mean: f64, rng: &mut Rng) -> f64 {
    match kind {
        UnitKind::Poisson => {
            if mean <= 0.0 {
                0.0
            } else {
                Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(0.0)
            }
        }
        UnitKind::RealBernoulli => {
            if rng.random::<f64>() < mean {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn sample_bernoulli(p: &[f64], rng: &mut Rng) -> Vec<f64> {
    p.iter()
        .map(|&q| if rng.random::<f64>() < q { 1.0 } else { 0.0 })
        .collect()
}

/// A parameter-shaped increment.
#[derive(Debug, Clone, PartialEq)]
pub struct EfhDelta {
    pub w: Vec<f64>,
    pub b_vis: Vec<f64>,
    pub b_hid: Vec<f64>,
}

impl EfhDelta {
    pub fn zeros_like(p: &EfhParams) -> Self {
        Self {
            w: vec![0.0; p.w.len()],
            b_vis: vec![0.0; p.b_vis.len()],
            b_hid: vec![0.0; p.b_hid.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.w
            .iter()
            .chain(&self.b_vis)
            .chain(&self.b_hid)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn axpy(&mut self, a: f64, other: &EfhDelta) {
        for (x, y) in self.w.iter_mut().zip(&other.w) {
            *x += a * y;
        }
        for (x, y) in self.b_vis.iter_mut().zip(&other.b_vis) {
            *x += a * y;
        }
        for (x, y) in self.b_hid.iter_mut().zip(&other.b_hid) {
            *x += a * y;
        }
    }
}

/// Output of one contrastive-divergence step.
#[derive(Debug, Clone)]
pub struct CdStep {
    /// `lr * (<h v^T>_data - <h v^T>_recon)` and the matching bias terms,
    /// averaged over the batch.
    pub update: EfhDelta,
    /// Hidden means of the data (`batch x H`), i.e. the carried statistic.
    pub data_hidden: Vec<f64>,
    /// Hidden means of the final reconstruction.
    pub recon_hidden: Vec<f64>,
    /// Mean squared reconstruction error over observation units.
    pub recon_error: f64,
    pub clamped: usize,
}

/// CD-k on a `batch x V` block. Blocks whose role is in `clamp` keep their
/// data values throughout the negative phase, so they contribute no
/// visible-side gradient.
pub fn cd_step(
    params: &EfhParams,
    batch: &[f64],
    batch_size: usize,
    k: usize,
    lr: f64,
    clamp: &[BlockRole],
    rng: &mut Rng,
) -> Result<CdStep> {
    let v = params.n_visible();
    if k == 0 {
        return Err(Error::Domain("cd_k must be at least 1".into()));
    }
    if batch.len() != batch_size * v || batch_size == 0 {
        return Err(Error::Shape(format!(
            "batch of {} values is not {batch_size} x {v}",
            batch.len()
        )));
    }
    let h = params.n_hidden;
    let pos_h = params.hidden_batch(batch, batch_size);
    let mut hs = sample_bernoulli(&pos_h, rng);
    let mut recon = Vec::new();
    let mut neg_h = Vec::new();
    let mut clamped = 0;
    for step in 0..k {
        let means = params.visible_means_batch(&hs, batch_size);
        clamped += means.clamped;
        recon = means.values;
        for (r, row) in recon.chunks_mut(v).enumerate() {
            let data = &batch[r * v..(r + 1) * v];
            let mut start = 0;
            for b in &params.layout {
                let cols = start..start + b.size;
                if clamp.contains(&b.role) {
                    row[cols.clone()].copy_from_slice(&data[cols]);
                } else if b.kind == UnitKind::Poisson {
                    for x in &mut row[cols] {
                        *x = sample_unit(UnitKind::Poisson, *x, rng);
                    }
                }
                start += b.size;
            }
        }
        neg_h = params.hidden_batch(&recon, batch_size);
        if step + 1 < k {
            hs = sample_bernoulli(&neg_h, rng);
        }
    }

    let scale = lr / batch_size as f64;
    let mut dw = vec![0.0; h * v];
    gemm(h, batch_size, v, scale, &pos_h, true, batch, false, 0.0, &mut dw);
    gemm(h, batch_size, v, -scale, &neg_h, true, &recon, false, 1.0, &mut dw);
    let mut db_vis = vec![0.0; v];
    for (d, r) in batch.chunks(v).zip(recon.chunks(v)) {
        for j in 0..v {
            db_vis[j] += scale * (d[j] - r[j]);
        }
    }
    let mut db_hid = vec![0.0; h];
    for (p, n) in pos_h.chunks(h).zip(neg_h.chunks(h)) {
        for j in 0..h {
            db_hid[j] += scale * (p[j] - n[j]);
        }
    }
    let obs = params.obs_range();
    let mut err = 0.0;
    for (d, r) in batch.chunks(v).zip(recon.chunks(v)) {
        err += obs.clone().map(|j| (d[j] - r[j]).powi(2)).sum::<f64>();
    }
    let n_obs = (obs.len() * batch_size).max(1);
    Ok(CdStep {
        update: EfhDelta {
            w: dw,
            b_vis: db_vis,
            b_hid: db_hid,
        },
        data_hidden: pos_h,
        recon_hidden: neg_h,
        recon_error: err / n_obs as f64,
        clamped,
    })
}

/// Training hyperparameters for the harmonium family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfhHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub init_scale: f64,
}

impl Default for EfhHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 20,
            init_scale: 0.01,
        }
    }
}

/// Momentum SGD state plus the regime being trained.
#[derive(Debug, Clone)]
pub struct EfhTrainer {
    pub variant: EfhVariant,
    pub hyper: EfhHyper,
    velocity: EfhDelta,
}

/// Per-step summary returned by [`EfhTrainer::step`].
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Hidden means of `[obs_t ; prev]` under the pre-update parameters.
    pub suffstats: Vec<f64>,
    pub recon_error: f64,
}

/// Aggregates over one pass through a batch of sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub recon_error: f64,
    pub steps: usize,
    pub clamped: usize,
}

impl EfhTrainer {
    pub fn new(params: &EfhParams, variant: EfhVariant, hyper: EfhHyper) -> Self {
        Self {
            variant,
            hyper,
            velocity: EfhDelta::zeros_like(params),
        }
    }

    fn apply(&mut self, params: &mut EfhParams, update: &EfhDelta) {
        let mu = self.hyper.momentum;
        let decay = self.hyper.lr * self.hyper.weight_decay;
        for (i, vel) in self.velocity.w.iter_mut().enumerate() {
            *vel = mu * *vel + update.w[i] - decay * params.w[i];
            params.w[i] += *vel;
        }
        for (i, vel) in self.velocity.b_vis.iter_mut().enumerate() {
            *vel = mu * *vel + update.b_vis[i];
            params.b_vis[i] += *vel;
        }
        for (i, vel) in self.velocity.b_hid.iter_mut().enumerate() {
            *vel = mu * *vel + update.b_hid[i];
            params.b_hid[i] += *vel;
        }
    }

    /// One temporally local update from `(obs_t, prev)` only; both are
    /// `batch`-row blocks. The returned statistic is what the next step
    /// receives as `prev`.
    pub fn step(
        &mut self,
        params: &mut EfhParams,
        obs_t: &[f64],
        prev: &[f64],
        batch: usize,
        rng: &mut Rng,
    ) -> Result<StepOutcome> {
        let visible = stack_visible(params, obs_t, prev, batch)?;
        let cd = cd_step(
            params,
            &visible,
            batch,
            self.variant.cd_k,
            self.hyper.lr,
            self.variant.tag.clamp_roles(),
            rng,
        )?;
        self.apply(params, &cd.update);
        Ok(StepOutcome {
            suffstats: cd.data_hidden,
            recon_error: cd.recon_error,
        })
    }

    /// Trains on a batch of equal-length sequences advanced in lockstep,
    /// one update per time step. Returns the carried statistics for every
    /// step (`len` blocks of `batch x H`).
    pub fn train_sequences(
        &mut self,
        params: &mut EfhParams,
        seqs: &[&Sequence],
        rng: &mut Rng,
    ) -> Result<(EpochStats, Vec<Vec<f64>>)> {
        let (dim, len) = batch_shape(seqs)?;
        check_obs_width(params, dim)?;
        if self.variant.tag == EfhVariantTag::Rtrbm && self.variant.bptt_horizon > 0 {
            return self.train_rtrbm(params, seqs, rng);
        }
        let batch = seqs.len();
        let mut prev = params.initial_suffstats().repeat(batch);
        let mut obs = Vec::with_capacity(batch * dim);
        let mut stats = EpochStats::default();
        let mut all = Vec::with_capacity(len);
        for t in 0..len {
            gather_frames(seqs, t, &mut obs);
            let out = self.step(params, &obs, &prev, batch, rng)?;
            stats.recon_error += out.recon_error;
            stats.steps += 1;
            prev = out.suffstats;
            all.push(prev.clone());
        }
        stats.recon_error /= len.max(1) as f64;
        Ok((stats, all))
    }

    /// RTRBM pass: the TRBM contrastive-divergence update at each step plus
    /// the gradient that reaches the parameters through the recomputed
    /// hidden states of the last `bptt_horizon` steps.
    fn train_rtrbm(
        &mut self,
        params: &mut EfhParams,
        seqs: &[&Sequence],
        rng: &mut Rng,
    ) -> Result<(EpochStats, Vec<Vec<f64>>)> {
        let (dim, len) = batch_shape(seqs)?;
        let batch = seqs.len();
        let horizon = self.variant.bptt_horizon;
        let h = params.n_hidden;
        // (obs_j, stored hidden state entering step j)
        let mut window: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(horizon + 1);
        let mut stored_prev = params.initial_suffstats().repeat(batch);
        let mut obs = Vec::with_capacity(batch * dim);
        let mut stats = EpochStats::default();
        let mut all = Vec::with_capacity(len);
        for t in 0..len {
            gather_frames(seqs, t, &mut obs);
            let prev = if window.is_empty() {
                stored_prev.clone()
            } else {
                recompute_hidden(params, &window, batch)?
            };
            let visible = stack_visible(params, &obs, &prev, batch)?;
            let cd = cd_step(
                params,
                &visible,
                batch,
                self.variant.cd_k,
                self.hyper.lr,
                self.variant.tag.clamp_roles(),
                rng,
            )?;
            let mut update = cd.update;
            if !window.is_empty() {
                let coef: Vec<f64> = cd
                    .data_hidden
                    .iter()
                    .zip(&cd.recon_hidden)
                    .map(|(p, n)| (p - n) * self.hyper.lr / batch as f64)
                    .collect();
                let corr = recurrent_gradient(params, &window, &coef, batch)?;
                update.axpy(1.0, &corr);
            }
            self.apply(params, &update);
            stats.recon_error += cd.recon_error;
            stats.steps += 1;
            window.push_back((obs.clone(), stored_prev));
            if window.len() > horizon {
                window.pop_front();
            }
            stored_prev = cd.data_hidden;
            debug_assert_eq!(stored_prev.len(), batch * h);
            all.push(stored_prev.clone());
        }
        stats.recon_error /= len.max(1) as f64;
        Ok((stats, all))
    }
}

fn check_obs_width(params: &EfhParams, dim: usize) -> Result<()> {
    if params.obs_range().len() != dim {
        return Err(Error::Shape(format!(
            "model expects {}-wide observations, got {dim}",
            params.obs_range().len()
        )));
    }
    Ok(())
}

/// `[obs ; prev]` row by row for the two-block layout.
fn stack_visible(params: &EfhParams, obs: &[f64], prev: &[f64], batch: usize) -> Result<Vec<f64>> {
    let (o, p) = (params.obs_range(), params.prev_range());
    if o.start != 0 || p.start != o.end || p.end != params.n_visible() {
        return Err(Error::Domain("expected layout [observation ; carried]".into()));
    }
    if obs.len() != batch * o.len() || prev.len() != batch * p.len() {
        return Err(Error::Shape(format!(
            "obs {} / prev {} values for batch {batch}",
            obs.len(),
            prev.len()
        )));
    }
    let mut v = Vec::with_capacity(batch * params.n_visible());
    for r in 0..batch {
        v.extend_from_slice(&obs[r * o.len()..(r + 1) * o.len()]);
        v.extend_from_slice(&prev[r * p.len()..(r + 1) * p.len()]);
    }
    Ok(v)
}

/// Builds the hidden recursion over `window` on a tape. Returns the tape,
/// the parameter leaves `(W, b_hid)` and the final hidden node.
fn unroll(
    params: &EfhParams,
    window: &VecDeque<(Vec<f64>, Vec<f64>)>,
    batch: usize,
) -> Result<(Tape, crate::diff::NodeId, crate::diff::NodeId, crate::diff::NodeId)> {
    let (h, v) = (params.n_hidden, params.n_visible());
    let n_obs = params.obs_range().len();
    let mut tape = Tape::new();
    let w = tape.param(Tensor::matrix(h, v, params.w.clone())?);
    let b = tape.param(Tensor::vector(params.b_hid.clone())?);
    let (_, first_prev) = window.front().expect("non-empty window");
    let mut hid = tape.input(Tensor::matrix(batch, h, first_prev.clone())?);
    for (x, _) in window {
        let xi = tape.input(Tensor::matrix(batch, n_obs, x.clone())?);
        let vis = tape.concat(xi, hid)?;
        let pre = tape.affine(vis, w, b)?;
        hid = tape.sigmoid(pre)?;
    }
    Ok((tape, w, b, hid))
}

/// Hidden state entering the current step, recomputed with the current
/// parameters from the start of the window.
fn recompute_hidden(params: &EfhParams, window: &VecDeque<(Vec<f64>, Vec<f64>)>, batch: usize) -> Result<Vec<f64>> {
    let (tape, _, _, hid) = unroll(params, window, batch)?;
    Ok(tape.value(hid).data().to_vec())
}

/// Gradient of `sum(coef * (h_prev W_prev^T))` with the `W_prev` factor
/// held constant: the part of the hidden-bias derivative that flows back
/// through the recursion.
pub fn recurrent_gradient(
    params: &EfhParams,
    window: &VecDeque<(Vec<f64>, Vec<f64>)>,
    coef: &[f64],
    batch: usize,
) -> Result<EfhDelta> {
    let (tape_obj, w, b, hid) = unroll(params, window, batch)?;
    let mut tape = tape_obj;
    let h = params.n_hidden;
    let prev = params.prev_range();
    let v = params.n_visible();
    // W_prev^T as an H x H constant: (W_prev^T)[i][j] = W[j][prev.start + i]
    let mut wpt = vec![0.0; h * h];
    for j in 0..h {
        for i in 0..h {
            wpt[i * h + j] = params.w[j * v + prev.start + i];
        }
    }
    let wpt = tape.input(Tensor::matrix(h, h, wpt)?);
    let drive = tape.matmul(hid, wpt)?;
    let c = tape.input(Tensor::matrix(batch, h, coef.to_vec())?);
    let weighted = tape.mul(drive, c)?;
    let s = tape.sum(weighted)?;
    let mut g = tape.gradient(s)?;
    Ok(EfhDelta {
        w: g.take(w).expect("W leaf").into_data(),
        b_vis: vec![0.0; v],
        b_hid: g.take(b).expect("bias leaf").into_data(),
    })
}

/// Scalar whose gradient [`recurrent_gradient`] returns; exposed for
/// finite-difference checks.
pub fn recurrent_term(
    params: &EfhParams,
    window: &VecDeque<(Vec<f64>, Vec<f64>)>,
    coef: &[f64],
    w_prev_t: &[f64],
    batch: usize,
) -> Result<f64> {
    let hid = recompute_hidden(params, window, batch)?;
    let h = params.n_hidden;
    let mut s = 0.0;
    for r in 0..batch {
        for j in 0..h {
            let drive: f64 = (0..h).map(|i| hid[r * h + i] * w_prev_t[i * h + j]).sum();
            s += coef[r * h + j] * drive;
        }
    }
    Ok(s)
}

/// Runs the hidden recursion without learning; returns `zbar_1..zbar_T`.
pub fn infer_suffstats(params: &EfhParams, seq: &Sequence) -> Result<Vec<Vec<f64>>> {
    check_obs_width(params, seq.dim())?;
    let mut prev = params.initial_suffstats();
    let mut out = Vec::with_capacity(seq.len());
    for x in seq.frames() {
        let v = stack_visible(params, x, &prev, 1)?;
        prev = params.hidden_means(&v);
        out.push(prev.clone());
    }
    Ok(out)
}

/// Next-frame prediction by clamped Gibbs sampling. The carried block is
/// pinned to `suffstats`, the observation block starts at `init_obs`, and
/// after `sweeps` alternations the observation means given the last hidden
/// sample are returned.
pub fn predict_next(
    params: &EfhParams,
    suffstats: &[f64],
    init_obs: &[f64],
    sweeps: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    Ok(predict_next_batch(params, suffstats, init_obs, 1, sweeps, rng)?.0)
}

/// Batched [`predict_next`]; also returns the final visible state so the
/// clamp contract can be inspected.
pub fn predict_next_batch(
    params: &EfhParams,
    suffstats: &[f64],
    init_obs: &[f64],
    batch: usize,
    sweeps: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if sweeps == 0 {
        return Err(Error::Domain("need at least one Gibbs sweep".into()));
    }
    let mut vis = stack_visible(params, init_obs, suffstats, batch)?;
    let v = params.n_visible();
    let obs = params.obs_range();
    let mut hs = Vec::new();
    for _ in 0..sweeps {
        let hp = params.hidden_batch(&vis, batch);
        hs = sample_bernoulli(&hp, rng);
        let mut means = params.visible_means_batch(&hs, batch).values;
        params.sample_from_means(&mut means, rng);
        for r in 0..batch {
            vis[r * v + obs.start..r * v + obs.end].copy_from_slice(&means[r * v + obs.start..r * v + obs.end]);
        }
    }
    let means = params.visible_means_batch(&hs, batch).values;
    let mut out = Vec::with_capacity(batch * obs.len());
    for r in 0..batch {
        out.extend_from_slice(&means[r * v + obs.start..r * v + obs.end]);
    }
    Ok((out, vis))
}

/// Position decoded from the model's expected observations: at each step
/// the Poisson means given the carried hidden means, read out by center of
/// mass.
pub fn decode_positions(params: &EfhParams, code: &PopulationCode, seq: &Sequence) -> Result<Vec<f64>> {
    let obs = params.obs_range();
    infer_suffstats(params, seq)?
        .iter()
        .map(|z| {
            let m = params.visible_means(z).values;
            code.com_decode_real(&m[obs.clone()])
        })
        .collect()
}

/// Mean squared position error of [`decode_positions`] over all steps.
pub fn ppc_mse(params: &EfhParams, code: &PopulationCode, seqs: &[Sequence], truth: &[Vec<f64>]) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0;
    for (s, x) in seqs.iter().zip(truth) {
        for (p, q) in decode_positions(params, code, s)?.iter().zip(x) {
            se += (p - q).powi(2);
            n += 1;
        }
    }
    Ok(se / n.max(1) as f64)
}

/// Mean squared next-frame error: for every `t < T - 1`, the prediction
/// made from `(zbar_t, frame_t)` against `frame_{t+1}`, averaged over
/// pixels and steps. Sequences are advanced in lockstep.
pub fn next_frame_mse(params: &EfhParams, seqs: &[Sequence], sweeps: usize, rng: &mut Rng) -> Result<f64> {
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let (dim, len) = batch_shape(&refs)?;
    check_obs_width(params, dim)?;
    let batch = seqs.len();
    let mut prev = params.initial_suffstats().repeat(batch);
    let mut obs = Vec::new();
    let mut next = Vec::new();
    let mut se = 0.0;
    let mut n = 0usize;
    for t in 0..len {
        gather_frames(&refs, t, &mut obs);
        let v = stack_visible(params, &obs, &prev, batch)?;
        prev = params.hidden_batch(&v, batch);
        if t + 1 < len {
            let (pred, _) = predict_next_batch(params, &prev, &obs, batch, sweeps, rng)?;
            gather_frames(&refs, t + 1, &mut next);
            se += pred.iter().zip(&next).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n += pred.len();
        }
    }
    Ok(se / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn small(n_obs: usize, kind: UnitKind, h: usize, seed: u64) -> EfhParams {
        let mut p = EfhParams::recurrent(n_obs, kind, h).unwrap();
        let mut rng = rng_from_seed(seed);
        p.randomize(0.3, &mut rng);
        for b in p.b_vis.iter_mut().chain(p.b_hid.iter_mut()) {
            *b = rng.random_range(-0.5..0.5);
        }
        p
    }

    #[test]
    fn layout_invariants() {
        assert!(EfhParams::recurrent(4, UnitKind::Poisson, 3).is_ok());
        let bad = vec![VisibleBlock {
            size: 4,
            kind: UnitKind::Poisson,
            role: BlockRole::Observation,
        }];
        assert!(EfhParams::new(bad, 3).is_err());
        let wrong_size = vec![VisibleBlock {
            size: 2,
            kind: UnitKind::RealBernoulli,
            role: BlockRole::PrevSuffStats,
        }];
        assert!(EfhParams::new(wrong_size, 3).is_err());
        assert!(EfhVariant::new(EfhVariantTag::Refh, 0, 0).is_err());
    }

    #[test]
    fn hidden_means_cases() {
        let mut p = EfhParams::recurrent(3, UnitKind::Poisson, 2).unwrap();
        let v = [1.0, 2.0, 3.0, 0.5, 0.5];
        assert_eq!(p.hidden_means(&v), vec![0.5, 0.5]);
        p.b_hid = vec![1.0, -2.0];
        assert_eq!(p.hidden_means(&v), vec![sigmoid(1.0), sigmoid(-2.0)]);
        p.w[1] = 0.7; // hidden 0, visible 1
        let lo = p.hidden_means(&v)[0];
        let mut v2 = v;
        v2[1] += 1.0;
        let hi = p.hidden_means(&v2)[0];
        assert!(hi > lo);
        let q = small(5, UnitKind::Poisson, 4, 1);
        for h in q.hidden_means(&[10.0, -5.0, 3.0, 0.0, 1.0, 0.2, 0.9, 0.1, 0.5]) {
            assert!(h > 0.0 && h < 1.0);
        }
    }

    #[test]
    fn visible_means_cases() {
        let mut p = EfhParams::recurrent(3, UnitKind::Poisson, 2).unwrap();
        let m = p.visible_means(&[1.0, 0.0]);
        assert_eq!(&m.values[..3], &[1.0, 1.0, 1.0]);
        assert_eq!(&m.values[3..], &[0.5, 0.5]);
        p.b_vis[0] = 31.0;
        let m = p.visible_means(&[0.0, 0.0]);
        assert_eq!(m.clamped, 1);
        assert_eq!(m.values[0], MAX_NATURAL.exp());
        p.b_vis[0] = -700.0;
        assert!(p.visible_means(&[0.0, 0.0]).values[0] >= 0.0);
        let q = small(4, UnitKind::Poisson, 3, 2);
        assert!(q.visible_means(&[1.0, 0.0, 1.0]).values[..4].iter().all(|&r| r > 0.0));
    }

    #[test]
    fn sampler_degenerate_units() {
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            assert_eq!(sample_unit(UnitKind::Poisson, 0.0, &mut rng), 0.0);
            assert_eq!(sample_unit(UnitKind::RealBernoulli, 1.0, &mut rng), 1.0);
            assert_eq!(sample_unit(UnitKind::RealBernoulli, 0.0, &mut rng), 0.0);
        }
    }

    #[test]
    fn cd_with_zero_weights_reduces_to_bias_terms() {
        let mut p = EfhParams::recurrent(2, UnitKind::RealBernoulli, 1).unwrap();
        p.b_hid = vec![0.4];
        p.b_vis = vec![0.2, -0.3, 0.1];
        let data = [1.0, 0.0, 0.3, 0.0, 1.0, 0.8];
        let mut rng = rng_from_seed(4);
        let cd = cd_step(&p, &data, 2, 1, 1.0, &[], &mut rng).unwrap();
        assert_eq!(cd.data_hidden, cd.recon_hidden);
        let sh = sigmoid(0.4);
        let recon: Vec<f64> = p.b_vis.iter().map(|&b| sigmoid(b)).collect();
        for j in 0..3 {
            let mean_v = (data[j] + data[3 + j]) / 2.0;
            let want = sh * (mean_v - recon[j]);
            assert!((cd.update.w[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn clamped_blocks_survive_gibbs() {
        let p = small(6, UnitKind::RealBernoulli, 4, 5);
        let z = [0.1, 0.9, 0.33, 0.5];
        let mut rng = rng_from_seed(6);
        for sweeps in [1, 5, 50] {
            let (_, vis) = predict_next_batch(&p, &z, &[0.0; 6], 1, sweeps, &mut rng).unwrap();
            assert_eq!(&vis[6..], &z);
        }
    }

    #[test]
    fn zero_weights_predict_bias_means() {
        let mut p = EfhParams::recurrent(3, UnitKind::RealBernoulli, 2).unwrap();
        p.b_vis = vec![0.5, -1.0, 2.0, 0.0, 0.0];
        let mut rng = rng_from_seed(7);
        for z in [[0.0, 1.0], [0.7, 0.2]] {
            let out = predict_next(&p, &z, &[1.0, 1.0, 0.0], 3, &mut rng).unwrap();
            let want: Vec<f64> = p.b_vis[..3].iter().map(|&b| sigmoid(b)).collect();
            assert_eq!(out, want);
        }
    }

    #[test]
    fn single_step_sequence() {
        let mut p = small(3, UnitKind::Poisson, 2, 8);
        let v = EfhVariant::new(EfhVariantTag::Refh, 1, 0).unwrap();
        let mut tr = EfhTrainer::new(&p, v, EfhHyper::default());
        let s = Sequence::new(3, vec![1.0, 0.0, 2.0]).unwrap();
        let (_, z) = tr.train_sequences(&mut p, &[&s], &mut rng_from_seed(1)).unwrap();
        assert_eq!(z.len(), 1);
    }

    #[test]
    fn rtrbm_horizon_zero_is_trbm() {
        let p0 = small(4, UnitKind::Poisson, 3, 9);
        let seq = Sequence::new(4, (0..40).map(|i| (i % 5) as f64).collect()).unwrap();
        let hyper = EfhHyper {
            lr: 0.05,
            ..EfhHyper::default()
        };
        let run = |tag| {
            let mut p = p0.clone();
            let mut tr = EfhTrainer::new(&p, EfhVariant::new(tag, 1, 0).unwrap(), hyper);
            let (_, z) = tr.train_sequences(&mut p, &[&seq], &mut rng_from_seed(3)).unwrap();
            (p, z)
        };
        let (a, za) = run(EfhVariantTag::Trbm);
        let (b, zb) = run(EfhVariantTag::Rtrbm);
        assert_eq!(a, b);
        assert_eq!(za, zb);
    }

    #[test]
    fn recurrent_gradient_matches_finite_differences() {
        let p = small(3, UnitKind::Poisson, 4, 10);
        let batch = 2;
        let mut rng = rng_from_seed(11);
        let mut window = VecDeque::new();
        for _ in 0..3 {
            let x: Vec<f64> = (0..batch * 3).map(|_| rng.random_range(0.0..3.0)).collect();
            let z: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(0.0..1.0)).collect();
            window.push_back((x, z));
        }
        let coef: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (h, v) = (4, p.n_visible());
        let prev = p.prev_range();
        let mut wpt = vec![0.0; h * h];
        for j in 0..h {
            for i in 0..h {
                wpt[i * h + j] = p.w[j * v + prev.start + i];
            }
        }
        let g = recurrent_gradient(&p, &window, &coef, batch).unwrap();
        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for idx in 0..p.w.len() + p.b_hid.len() {
            let bump = |d: f64| {
                let mut q = p.clone();
                if idx < q.w.len() {
                    q.w[idx] += d;
                } else {
                    q.b_hid[idx - p.w.len()] += d;
                }
                recurrent_term(&q, &window, &coef, &wpt, batch).unwrap()
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let an = if idx < p.w.len() { g.w[idx] } else { g.b_hid[idx - p.w.len()] };
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }
}
