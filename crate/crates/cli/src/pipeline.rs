//! Datasets, model training and evaluation shared by the subcommands and
//! the table reproductions.
//!
//! Seed scheme: a run with root seed `s` draws its data from
//! `SeedStream(s).child("data").child(<dataset>).child("train"|"test")` and
//! each model from `SeedStream(s).child("model").child(<tag>)`, whose
//! `"init"`, `"train"` and `"eval"` streams feed initialisation, training
//! noise and evaluation-time sampling respectively.

use tlrm::balls::{BallDataset, BallsConfig};
use tlrm::diff::{Adam, Tensor};
use tlrm::harmonium::{
    next_frame_mse, ppc_mse, EfhParams, EfhTrainer, EfhVariant, EfhVariantTag, UnitKind,
};
use tlrm::kalman::{em_fit, em_init, kf_position_mse, to_pseudo_obs, LgdsParams, PseudoObs};
use nalgebra::{Matrix2, Vector2};
use tlrm::ppc::{PopulationCode, PpcDataset, SpikeTrain};
use tlrm::rng::SeedStream;
use tlrm::rvae::{ppc_eval, run_sequences, Emission, RvaeConfig, RvaeParams, RvaeTrainer, RvaeVariant};
use tlrm::seq::Sequence;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelTag {
    Refh,
    Trbm,
    Rtrbm,
    Rvae,
    Tvae,
    Kf1,
    Kf2,
}

impl ModelTag {
    pub const ALL: [ModelTag; 7] = [
        ModelTag::Refh,
        ModelTag::Trbm,
        ModelTag::Rtrbm,
        ModelTag::Rvae,
        ModelTag::Tvae,
        ModelTag::Kf1,
        ModelTag::Kf2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelTag::Refh => "refh",
            ModelTag::Trbm => "trbm",
            ModelTag::Rtrbm => "rtrbm",
            ModelTag::Rvae => "rvae",
            ModelTag::Tvae => "tvae",
            ModelTag::Kf1 => "kf1",
            ModelTag::Kf2 => "kf2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    fn efh_tag(self) -> Option<EfhVariantTag> {
        match self {
            ModelTag::Refh => Some(EfhVariantTag::Refh),
            ModelTag::Trbm => Some(EfhVariantTag::Trbm),
            ModelTag::Rtrbm => Some(EfhVariantTag::Rtrbm),
            _ => None,
        }
    }
}

pub struct PpcData {
    pub code: PopulationCode,
    pub train: PpcDataset,
    pub test: PpcDataset,
}

impl PpcData {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let p = &cfg.ppc;
        let model = p.oscillator()?;
        let code = p.code()?;
        let s = SeedStream::new(seed).child("data").child("ppc");
        let train = PpcDataset::generate(&model, &code, p.train_trajectories, p.steps, &s.child("train"))?;
        let test = PpcDataset::generate(&model, &code, p.test_trajectories, p.steps, &s.child("test"))?;
        Ok(Self { code, train, test })
    }

    pub fn test_truth(&self) -> Vec<Vec<f64>> {
        self.test.trajectories.iter().map(|t| t.positions()).collect()
    }
}

pub fn spike_sequences(ds: &PpcDataset) -> Result<Vec<Sequence>> {
    ds.spikes
        .iter()
        .map(|s| Ok(Sequence::new(s.n_neurons, s.counts.iter().map(|&c| c as f64).collect())?))
        .collect()
}

fn pseudo_obs(code: &PopulationCode, ds: &PpcDataset) -> Vec<Vec<PseudoObs>> {
    ds.spikes
        .iter()
        .map(|s| (0..s.len()).map(|t| to_pseudo_obs(code, s.frame(t))).collect())
        .collect()
}

pub struct BallsData {
    pub train: BallDataset,
    pub test: BallDataset,
}

impl BallsData {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let b: &BallsConfig = &cfg.balls;
        let s = SeedStream::new(seed).child("data").child("balls");
        let train = BallDataset::generate(&b.world, b.res, b.train_trajectories, b.steps, &s.child("train"))?;
        let test = BallDataset::generate(&b.world, b.res, b.test_trajectories, b.steps, &s.child("test"))?;
        Ok(Self { train, test })
    }
}

pub enum Data {
    Ppc(PpcData),
    Balls(BallsData),
}

impl Data {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        Ok(match cfg.dataset {
            DatasetKind::Ppc => Data::Ppc(PpcData::generate(cfg, seed)?),
            DatasetKind::Balls => Data::Balls(BallsData::generate(cfg, seed)?),
        })
    }

    pub fn kind(&self) -> DatasetKind {
        match self {
            Data::Ppc(_) => DatasetKind::Ppc,
            Data::Balls(_) => DatasetKind::Balls,
        }
    }

    fn train_sequences(&self) -> Result<Vec<Sequence>> {
        match self {
            Data::Ppc(d) => spike_sequences(&d.train),
            Data::Balls(d) => Ok(d.train.videos.clone()),
        }
    }
}

/// Order-0 PPC baseline: the center of mass of each frame's spike counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Order0 {
    pub mse: f64,
    /// Frames with no spikes, excluded from the mean.
    pub skipped: usize,
}

pub fn order0_ppc(code: &PopulationCode, spikes: &[SpikeTrain], truth: &[Vec<f64>]) -> Result<Order0> {
    if spikes.len() != truth.len() {
        return Err(tlrm::Error::Shape("spike and truth sequence counts differ".into()).into());
    }
    let mut se = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for (s, x) in spikes.iter().zip(truth) {
        if s.len() != x.len() {
            return Err(tlrm::Error::Shape("spike and truth lengths differ".into()).into());
        }
        for (t, &pos) in x.iter().enumerate() {
            match code.com_decode(s.frame(t)) {
                Ok(est) => {
                    se += (est - pos).powi(2);
                    n += 1;
                }
                Err(tlrm::Error::NoSpikes) => skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(Order0 {
        mse: if n == 0 { 0.0 } else { se / n as f64 },
        skipped,
    })
}

/// One row of a training log. `metric` is the held-out decode MSE where
/// the dataset has one per epoch, NaN otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub objective: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Trained {
    Efh(EfhParams),
    Rvae(RvaeParams),
    Kalman(LgdsParams),
}

fn model_streams(seed: u64, tag: ModelTag) -> SeedStream {
    SeedStream::new(seed).child("model").child(tag.name())
}

fn decayed(lr: f64, decay: f64, epoch: usize) -> f64 {
    lr / (1.0 + epoch as f64 / decay)
}

pub fn rvae_config(cfg: &ExperimentConfig, kind: DatasetKind, obs_dim: usize, tag: ModelTag) -> Result<RvaeConfig> {
    let variant = match tag {
        ModelTag::Rvae => RvaeVariant::Rvae,
        ModelTag::Tvae => RvaeVariant::Tvae,
        _ => return Err(CliError::Config(format!("{} is not a VAE", tag.name()))),
    };
    let s = cfg.rvae(kind);
    let emission = match kind {
        DatasetKind::Ppc => Emission::Poisson,
        DatasetKind::Balls => Emission::Gaussian { bounded: true },
    };
    Ok(RvaeConfig {
        obs_dim,
        latent: s.latent,
        hidden1: s.hidden1,
        hidden2: s.hidden2,
        emission,
        variant,
        learn_trans_var: s.learn_trans_var,
    })
}

fn efh_kind(kind: DatasetKind) -> UnitKind {
    match kind {
        DatasetKind::Ppc => UnitKind::Poisson,
        DatasetKind::Balls => UnitKind::RealBernoulli,
    }
}

/// Trains (or, for the Kalman baselines, fits) `tag` on the training split.
pub fn train_model(cfg: &ExperimentConfig, data: &Data, tag: ModelTag, seed: u64, log: &mut Vec<LogRow>) -> Result<Trained> {
    let streams = model_streams(seed, tag);
    let kind = data.kind();
    if let Some(efh_tag) = tag.efh_tag() {
        let sec = cfg.efh(kind);
        let seqs = data.train_sequences()?;
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let mut p = EfhParams::recurrent(seqs[0].dim(), efh_kind(kind), sec.hidden)?;
        p.randomize(sec.hyper.init_scale, &mut streams.rng("init"));
        let mut trainer = EfhTrainer::new(&p, EfhVariant::new(efh_tag, sec.cd_k, sec.horizon)?, sec.hyper);
        let mut rng = streams.rng("train");
        for epoch in 0..sec.hyper.epochs {
            trainer.hyper.lr = decayed(sec.hyper.lr, sec.lr_decay, epoch);
            let chunk = if sec.batch == 0 { refs.len() } else { sec.batch };
            let mut recon = 0.0;
            for group in refs.chunks(chunk) {
                let (stats, _) = trainer.train_sequences(&mut p, group, &mut rng)?;
                recon += stats.recon_error * group.len() as f64;
            }
            let metric = match data {
                Data::Ppc(d) => ppc_mse(&p, &d.code, &spike_sequences(&d.test)?, &d.test_truth())?,
                Data::Balls(_) => f64::NAN,
            };
            log.push(LogRow {
                epoch,
                objective: recon / refs.len() as f64,
                metric,
            });
        }
        return Ok(Trained::Efh(p));
    }
    match tag {
        ModelTag::Rvae | ModelTag::Tvae => {
            let sec = cfg.rvae(kind);
            let seqs = data.train_sequences()?;
            let refs: Vec<&Sequence> = seqs.iter().collect();
            let rc = rvae_config(cfg, kind, seqs[0].dim(), tag)?;
            let mut p = RvaeParams::init(rc, &mut streams.rng("init"))?;
            p.tensor_mut("log_var_trans")
                .expect("every VAE has a transition variance")
                .data_mut()[0] = sec.trans_var.ln();
            let mut trainer = RvaeTrainer::new(
                &p,
                Adam {
                    lr: sec.lr,
                    ..Adam::default()
                },
            );
            let mut rng = streams.rng("train");
            for epoch in 0..sec.epochs {
                trainer.adam.lr = decayed(sec.lr, sec.lr_decay, epoch);
                let (_, loss) = run_sequences(&mut p, &refs, Some(&mut trainer), &mut rng)?;
                let metric = match data {
                    Data::Ppc(d) => ppc_eval(&p, &spike_sequences(&d.test)?, &d.code, &d.test_truth())?,
                    Data::Balls(_) => f64::NAN,
                };
                log.push(LogRow {
                    epoch,
                    objective: loss,
                    metric,
                });
            }
            Ok(Trained::Rvae(p))
        }
        ModelTag::Kf1 | ModelTag::Kf2 => {
            let Data::Ppc(d) = data else {
                return Err(tlrm::Error::UnsupportedVariant("Kalman baselines need the PPC dataset".into()).into());
            };
            let dim = if tag == ModelTag::Kf1 { 1 } else { 2 };
            let init = em_init(dim, cfg.ppc.dt, streams.derive("init"))?;
            let fit = em_fit(&pseudo_obs(&d.code, &d.train), init, cfg.em.iters)?;
            let obs = pseudo_obs(&d.code, &d.test);
            let truth = d.test_truth();
            let mse = kf_position_mse(&fit.params, &obs, &truth)?;
            for (epoch, ll) in fit.log_likelihood.iter().enumerate() {
                log.push(LogRow {
                    epoch,
                    objective: *ll,
                    metric: if epoch + 1 == fit.log_likelihood.len() { mse } else { f64::NAN },
                });
            }
            Ok(Trained::Kalman(fit.params))
        }
        _ => unreachable!("harmonium tags handled above"),
    }
}

/// Held-out error of a trained model: position MSE on PPC, next-frame
/// MSE on balls.
pub fn evaluate(cfg: &ExperimentConfig, data: &Data, tag: ModelTag, model: &Trained, seed: u64) -> Result<f64> {
    let mut rng = model_streams(seed, tag).rng("eval");
    match (data, model) {
        (Data::Ppc(d), Trained::Efh(p)) => Ok(ppc_mse(p, &d.code, &spike_sequences(&d.test)?, &d.test_truth())?),
        (Data::Balls(d), Trained::Efh(p)) => Ok(next_frame_mse(p, &d.test.videos, cfg.eval.sweeps, &mut rng)?),
        (Data::Ppc(d), Trained::Rvae(p)) => Ok(ppc_eval(p, &spike_sequences(&d.test)?, &d.code, &d.test_truth())?),
        (Data::Balls(_), Trained::Rvae(_)) => Err(tlrm::Error::UnsupportedVariant(
            "VAE models have no next-frame predictor on video".into(),
        )
        .into()),
        (Data::Ppc(d), Trained::Kalman(p)) => Ok(kf_position_mse(p, &pseudo_obs(&d.code, &d.test), &d.test_truth())?),
        (Data::Balls(_), Trained::Kalman(_)) => {
            Err(tlrm::Error::UnsupportedVariant("Kalman baselines need the PPC dataset".into()).into())
        }
    }
}

fn mat2(m: &Matrix2<f64>) -> Vec<f64> {
    vec![m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]
}

fn tensor_data<'a>(ck: &'a Checkpoint, name: &str, shape: &[usize]) -> Result<&'a [f64]> {
    let t = ck.tensor(name)?;
    if t.shape != shape {
        return Err(CliError::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            t.shape
        )));
    }
    Ok(&t.data)
}

pub fn checkpoint_tag(tag: ModelTag, kind: DatasetKind) -> String {
    format!("{}@{}", tag.name(), kind.name())
}

pub fn parse_checkpoint_tag(s: &str) -> Result<(ModelTag, DatasetKind)> {
    let bad = || CliError::Checkpoint(format!("unrecognised model tag {s:?}"));
    let (m, d) = s.split_once('@').ok_or_else(bad)?;
    let tag = ModelTag::parse(m).ok_or_else(bad)?;
    let kind = match d {
        "ppc" => DatasetKind::Ppc,
        "balls" => DatasetKind::Balls,
        _ => return Err(bad()),
    };
    Ok((tag, kind))
}

pub fn to_checkpoint(cfg: &ExperimentConfig, tag: ModelTag, model: &Trained, seed: u64) -> Result<Checkpoint> {
    let tensors = match model {
        Trained::Efh(p) => vec![
            NamedTensor::new("w", vec![p.n_hidden, p.n_visible()], p.w.clone())?,
            NamedTensor::new("b_vis", vec![p.n_visible()], p.b_vis.clone())?,
            NamedTensor::new("b_hid", vec![p.n_hidden], p.b_hid.clone())?,
        ],
        Trained::Rvae(p) => p
            .named()
            .map(|(name, t)| NamedTensor::new(name, t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<_>>()?,
        Trained::Kalman(p) => vec![
            NamedTensor::new("a", vec![2, 2], mat2(&p.a))?,
            NamedTensor::new("q", vec![2, 2], mat2(&p.q))?,
            NamedTensor::new("mu0", vec![2], vec![p.mu0[0], p.mu0[1]])?,
            NamedTensor::new("s0", vec![2, 2], mat2(&p.s0))?,
        ],
    };
    Ok(Checkpoint {
        tag: checkpoint_tag(tag, cfg.dataset),
        seed,
        config: cfg.to_text(),
        tensors,
    })
}

/// Rebuilds a model and the config it was trained under.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ModelTag, ExperimentConfig, Trained)> {
    let (tag, kind) = parse_checkpoint_tag(&ck.tag)?;
    let cfg = ExperimentConfig::parse(&ck.config)?;
    if cfg.dataset != kind {
        return Err(CliError::Checkpoint("tag and config snapshot disagree on the dataset".into()));
    }
    let model = match tag {
        ModelTag::Refh | ModelTag::Trbm | ModelTag::Rtrbm => {
            let w = ck.tensor("w")?;
            let [h, v] = w.shape[..] else {
                return Err(CliError::Checkpoint("w must be a matrix".into()));
            };
            if v <= h {
                return Err(CliError::Checkpoint("visible layer narrower than the carried block".into()));
            }
            let mut p = EfhParams::recurrent(v - h, efh_kind(kind), h)?;
            p.w = w.data.clone();
            p.b_vis = tensor_data(ck, "b_vis", &[v])?.to_vec();
            p.b_hid = tensor_data(ck, "b_hid", &[h])?.to_vec();
            Trained::Efh(p)
        }
        ModelTag::Rvae | ModelTag::Tvae => {
            let obs_dim = *ck.tensor("enc.obs1.w")?.shape.get(1).ok_or_else(|| {
                CliError::Checkpoint("enc.obs1.w must be a matrix".into())
            })?;
            let rc = rvae_config(&cfg, kind, obs_dim, tag)?;
            let tensors = rc
                .tensor_shapes()
                .into_iter()
                .map(|(name, shape)| Ok(Tensor::new(shape.clone(), tensor_data(ck, name, &shape)?.to_vec())?))
                .collect::<Result<Vec<_>>>()?;
            Trained::Rvae(RvaeParams::from_tensors(rc, tensors)?)
        }
        ModelTag::Kf1 | ModelTag::Kf2 => {
            let m = |name| -> Result<Matrix2<f64>> {
                let d = tensor_data(ck, name, &[2, 2])?;
                Ok(Matrix2::new(d[0], d[1], d[2], d[3]))
            };
            let mu0 = tensor_data(ck, "mu0", &[2])?;
            let dim = if tag == ModelTag::Kf1 { 1 } else { 2 };
            Trained::Kalman(LgdsParams::new(dim, m("a")?, m("q")?, Vector2::new(mu0[0], mu0[1]), m("s0")?)?)
        }
    };
    Ok((tag, cfg, model))
}
