//! Flat `section.key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, and unknown keys are rejected so that typos fail loudly.

use std::fmt::Write as _;
use std::path::Path;

use tlrm::balls::{BallWorld, BallsConfig};
use tlrm::harmonium::EfhHyper;
use tlrm::ppc::PpcConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Ppc,
    Balls,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Ppc => "ppc",
            DatasetKind::Balls => "balls",
        }
    }
}

/// Harmonium-family training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfhSection {
    pub hidden: usize,
    pub hyper: EfhHyper,
    /// Learning rate at epoch `e` is `lr / (1 + e / lr_decay)`; `inf` keeps it constant.
    pub lr_decay: f64,
    pub cd_k: usize,
    /// Truncation horizon of the RTRBM recurrent gradient.
    pub horizon: usize,
    /// Trajectories advanced in lockstep per update; 0 takes them all.
    pub batch: usize,
}

/// Recurrent VAE training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvaeSection {
    pub latent: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    /// Initial reverse-transition variance.
    pub trans_var: f64,
    pub learn_trans_var: bool,
}

/// EM settings for the Kalman baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmSection {
    pub iters: usize,
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSection {
    /// Clamped Gibbs sweeps per next-frame prediction.
    pub sweeps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub table1_seeds: Vec<u64>,
    pub table2_seeds: Vec<u64>,
    pub ppc: PpcConfig,
    pub balls: BallsConfig,
    pub efh_ppc: EfhSection,
    pub efh_balls: EfhSection,
    pub rvae_ppc: RvaeSection,
    pub rvae_balls: RvaeSection,
    pub em: EmSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Ppc,
            table1_seeds: vec![1, 2, 3, 4, 5],
            table2_seeds: vec![1, 2, 3],
            ppc: PpcConfig::default(),
            balls: BallsConfig::default(),
            efh_ppc: EfhSection {
                hidden: 60,
                hyper: EfhHyper {
                    lr: 1e-3,
                    momentum: 0.9,
                    weight_decay: 0.0,
                    epochs: 60,
                    init_scale: 0.01,
                },
                lr_decay: f64::INFINITY,
                cd_k: 1,
                horizon: 4,
                batch: 0,
            },
            efh_balls: EfhSection {
                hidden: 400,
                hyper: EfhHyper {
                    lr: 1e-4,
                    momentum: 0.9,
                    weight_decay: 0.0,
                    epochs: 20,
                    init_scale: 0.01,
                },
                lr_decay: f64::INFINITY,
                cd_k: 1,
                horizon: 4,
                batch: 1,
            },
            rvae_ppc: RvaeSection {
                latent: 10,
                hidden1: 64,
                hidden2: 64,
                lr: 1e-3,
                lr_decay: 10.0,
                epochs: 40,
                trans_var: 0.1,
                learn_trans_var: false,
            },
            rvae_balls: RvaeSection {
                latent: 32,
                hidden1: 256,
                hidden2: 256,
                lr: 1e-3,
                lr_decay: 10.0,
                epochs: 20,
                trans_var: 0.1,
                learn_trans_var: false,
            },
            em: EmSection { iters: 50 },
            eval: EvalSection { sweeps: 25 },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = value
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(CliError::Config(format!("{key}: empty seed list")));
    }
    Ok(seeds)
}

fn join_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

impl EfhSection {
    fn set(&mut self, key: &str, full: &str, value: &str) -> Result<()> {
        match key {
            "hidden" => self.hidden = parse_num(full, value)?,
            "lr" => self.hyper.lr = parse_num(full, value)?,
            "lr_decay" => self.lr_decay = parse_num(full, value)?,
            "momentum" => self.hyper.momentum = parse_num(full, value)?,
            "weight_decay" => self.hyper.weight_decay = parse_num(full, value)?,
            "epochs" => self.hyper.epochs = parse_num(full, value)?,
            "init_scale" => self.hyper.init_scale = parse_num(full, value)?,
            "cd_k" => self.cd_k = parse_num(full, value)?,
            "horizon" => self.horizon = parse_num(full, value)?,
            "batch" => self.batch = parse_num(full, value)?,
            _ => return Err(CliError::Config(format!("unknown key {full}"))),
        }
        Ok(())
    }

    fn write(&self, out: &mut String, section: &str) {
        let h = &self.hyper;
        let _ = writeln!(out, "{section}.hidden = {}", self.hidden);
        let _ = writeln!(out, "{section}.lr = {:?}", h.lr);
        let _ = writeln!(out, "{section}.lr_decay = {:?}", self.lr_decay);
        let _ = writeln!(out, "{section}.momentum = {:?}", h.momentum);
        let _ = writeln!(out, "{section}.weight_decay = {:?}", h.weight_decay);
        let _ = writeln!(out, "{section}.epochs = {}", h.epochs);
        let _ = writeln!(out, "{section}.init_scale = {:?}", h.init_scale);
        let _ = writeln!(out, "{section}.cd_k = {}", self.cd_k);
        let _ = writeln!(out, "{section}.horizon = {}", self.horizon);
        let _ = writeln!(out, "{section}.batch = {}", self.batch);
    }
}

impl RvaeSection {
    fn set(&mut self, key: &str, full: &str, value: &str) -> Result<()> {
        match key {
            "latent" => self.latent = parse_num(full, value)?,
            "hidden1" => self.hidden1 = parse_num(full, value)?,
            "hidden2" => self.hidden2 = parse_num(full, value)?,
            "lr" => self.lr = parse_num(full, value)?,
            "lr_decay" => self.lr_decay = parse_num(full, value)?,
            "epochs" => self.epochs = parse_num(full, value)?,
            "trans_var" => self.trans_var = parse_num(full, value)?,
            "learn_trans_var" => self.learn_trans_var = parse_bool(full, value)?,
            _ => return Err(CliError::Config(format!("unknown key {full}"))),
        }
        Ok(())
    }

    fn write(&self, out: &mut String, section: &str) {
        let _ = writeln!(out, "{section}.latent = {}", self.latent);
        let _ = writeln!(out, "{section}.hidden1 = {}", self.hidden1);
        let _ = writeln!(out, "{section}.hidden2 = {}", self.hidden2);
        let _ = writeln!(out, "{section}.lr = {:?}", self.lr);
        let _ = writeln!(out, "{section}.lr_decay = {:?}", self.lr_decay);
        let _ = writeln!(out, "{section}.epochs = {}", self.epochs);
        let _ = writeln!(out, "{section}.trans_var = {:?}", self.trans_var);
        let _ = writeln!(out, "{section}.learn_trans_var = {}", self.learn_trans_var);
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `section.key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, full: &str, value: &str) -> Result<()> {
        let (section, key) = full
            .split_once('.')
            .ok_or_else(|| CliError::Config(format!("key {full:?} lacks a section")))?;
        let unknown = || CliError::Config(format!("unknown key {full}"));
        match section {
            "run" => match key {
                "dataset" => {
                    self.dataset = match value {
                        "ppc" => DatasetKind::Ppc,
                        "balls" => DatasetKind::Balls,
                        _ => return Err(CliError::Config(format!("{full}: expected ppc or balls, got {value:?}"))),
                    }
                }
                "table1_seeds" => self.table1_seeds = parse_seeds(full, value)?,
                "table2_seeds" => self.table2_seeds = parse_seeds(full, value)?,
                _ => return Err(unknown()),
            },
            "ppc" => {
                let p = &mut self.ppc;
                match key {
                    "omega" => p.omega = parse_num(full, value)?,
                    "zeta" => p.zeta = parse_num(full, value)?,
                    "dt" => p.dt = parse_num(full, value)?,
                    "pos_std" => p.pos_std = parse_num(full, value)?,
                    "n_neurons" => p.n_neurons = parse_num(full, value)?,
                    "lo" => p.lo = parse_num(full, value)?,
                    "hi" => p.hi = parse_num(full, value)?,
                    "gain" => p.gain = parse_num(full, value)?,
                    "train" => p.train_trajectories = parse_num(full, value)?,
                    "test" => p.test_trajectories = parse_num(full, value)?,
                    "steps" => p.steps = parse_num(full, value)?,
                    _ => return Err(unknown()),
                }
            }
            "balls" => {
                let b = &mut self.balls;
                match key {
                    "n_balls" => b.world.n_balls = parse_num(full, value)?,
                    "radius" => b.world.radius = parse_num(full, value)?,
                    "box_size" => b.world.box_size = parse_num(full, value)?,
                    "speed" => b.world.speed = parse_num(full, value)?,
                    "dt" => b.world.dt = parse_num(full, value)?,
                    "res" => b.res = parse_num(full, value)?,
                    "train" => b.train_trajectories = parse_num(full, value)?,
                    "test" => b.test_trajectories = parse_num(full, value)?,
                    "steps" => b.steps = parse_num(full, value)?,
                    _ => return Err(unknown()),
                }
            }
            "efh_ppc" => self.efh_ppc.set(key, full, value)?,
            "efh_balls" => self.efh_balls.set(key, full, value)?,
            "rvae_ppc" => self.rvae_ppc.set(key, full, value)?,
            "rvae_balls" => self.rvae_balls.set(key, full, value)?,
            "em" => match key {
                "iters" => self.em.iters = parse_num(full, value)?,
                _ => return Err(unknown()),
            },
            "eval" => match key {
                "sweeps" => self.eval.sweeps = parse_num(full, value)?,
                _ => return Err(unknown()),
            },
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Range checks that the model constructors would otherwise report
    /// much later.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CliError::Config(msg.into()));
        if self.ppc.train_trajectories == 0 || self.ppc.test_trajectories == 0 || self.ppc.steps < 2 {
            return bad("ppc needs at least one train and test trajectory of two or more steps");
        }
        if self.balls.train_trajectories == 0 || self.balls.test_trajectories == 0 || self.balls.steps < 2 {
            return bad("balls needs at least one train and test trajectory of two or more steps");
        }
        for e in [&self.efh_ppc, &self.efh_balls] {
            if e.hidden == 0 || e.cd_k == 0 || !(e.hyper.lr > 0.0) || !(e.lr_decay > 0.0) {
                return bad("efh sections need hidden, cd_k, lr and lr_decay positive");
            }
        }
        for r in [&self.rvae_ppc, &self.rvae_balls] {
            if r.latent == 0 || r.hidden1 == 0 || r.hidden2 == 0 {
                return bad("rvae layer sizes must be positive");
            }
            if !(r.lr > 0.0) || !(r.lr_decay > 0.0) || !(r.trans_var > 0.0) {
                return bad("rvae lr, lr_decay and trans_var must be positive");
            }
        }
        if self.em.iters == 0 || self.eval.sweeps == 0 {
            return bad("em.iters and eval.sweeps must be positive");
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run.dataset = {}", self.dataset.name());
        let _ = writeln!(out, "run.table1_seeds = {}", join_seeds(&self.table1_seeds));
        let _ = writeln!(out, "run.table2_seeds = {}", join_seeds(&self.table2_seeds));
        let p = &self.ppc;
        let _ = writeln!(out, "ppc.omega = {:?}", p.omega);
        let _ = writeln!(out, "ppc.zeta = {:?}", p.zeta);
        let _ = writeln!(out, "ppc.dt = {:?}", p.dt);
        let _ = writeln!(out, "ppc.pos_std = {:?}", p.pos_std);
        let _ = writeln!(out, "ppc.n_neurons = {}", p.n_neurons);
        let _ = writeln!(out, "ppc.lo = {:?}", p.lo);
        let _ = writeln!(out, "ppc.hi = {:?}", p.hi);
        let _ = writeln!(out, "ppc.gain = {:?}", p.gain);
        let _ = writeln!(out, "ppc.train = {}", p.train_trajectories);
        let _ = writeln!(out, "ppc.test = {}", p.test_trajectories);
        let _ = writeln!(out, "ppc.steps = {}", p.steps);
        let b = &self.balls;
        let w: &BallWorld = &b.world;
        let _ = writeln!(out, "balls.n_balls = {}", w.n_balls);
        let _ = writeln!(out, "balls.radius = {:?}", w.radius);
        let _ = writeln!(out, "balls.box_size = {:?}", w.box_size);
        let _ = writeln!(out, "balls.speed = {:?}", w.speed);
        let _ = writeln!(out, "balls.dt = {:?}", w.dt);
        let _ = writeln!(out, "balls.res = {}", b.res);
        let _ = writeln!(out, "balls.train = {}", b.train_trajectories);
        let _ = writeln!(out, "balls.test = {}", b.test_trajectories);
        let _ = writeln!(out, "balls.steps = {}", b.steps);
        self.efh_ppc.write(&mut out, "efh_ppc");
        self.efh_balls.write(&mut out, "efh_balls");
        self.rvae_ppc.write(&mut out, "rvae_ppc");
        self.rvae_balls.write(&mut out, "rvae_balls");
        let _ = writeln!(out, "em.iters = {}", self.em.iters);
        let _ = writeln!(out, "eval.sweeps = {}", self.eval.sweeps);
        out
    }

    pub fn efh(&self, dataset: DatasetKind) -> &EfhSection {
        match dataset {
            DatasetKind::Ppc => &self.efh_ppc,
            DatasetKind::Balls => &self.efh_balls,
        }
    }

    pub fn rvae(&self, dataset: DatasetKind) -> &RvaeSection {
        match dataset {
            DatasetKind::Ppc => &self.rvae_ppc,
            DatasetKind::Balls => &self.rvae_balls,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_and_survive_round_trip() {
        let text = "# comment\nrun.dataset = balls\nrun.table1_seeds = 7, 8\nppc.gain = 8\nefh_balls.hidden = 50\nrvae_ppc.learn_trans_var = true\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.dataset, DatasetKind::Balls);
        assert_eq!(cfg.table1_seeds, vec![7, 8]);
        assert_eq!(cfg.ppc.gain, 8.0);
        assert_eq!(cfg.efh_balls.hidden, 50);
        assert!(cfg.rvae_ppc.learn_trans_var);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(ExperimentConfig::parse("ppc.gian = 3").is_err());
        assert!(ExperimentConfig::parse("nosection = 3").is_err());
        assert!(ExperimentConfig::parse("ppc.gain 3").is_err());
        assert!(ExperimentConfig::parse("ppc.gain = x").is_err());
        assert!(ExperimentConfig::parse("run.dataset = mnist").is_err());
        assert!(ExperimentConfig::parse("em.iters = 0").is_err());
    }
}
