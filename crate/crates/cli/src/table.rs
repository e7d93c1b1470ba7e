//! Results tables, CSV output and the two table reproductions.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use tlrm::balls::order0_mse;

use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::Result;
use crate::pipeline::{evaluate, order0_ppc, train_model, BallsData, Data, ModelTag, PpcData};

/// `printf("%.6e")` formatting: six fraction digits and a signed exponent
/// of at least two digits.
pub fn sci(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{v:.6e}");
    let (mant, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
}

/// One cell of a table: a model's error on one seed, or why it failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub model: &'static str,
    pub seed: u64,
    pub mse: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub model: &'static str,
    pub mse_mean: f64,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub mse_std: f64,
    pub n_seeds: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<Row>,
    pub cells: Vec<Cell>,
}

impl ResultsTable {
    /// Aggregates cells into rows, in the order `models` lists them.
    pub fn from_cells(models: &[&'static str], cells: Vec<Cell>) -> Self {
        let rows = models
            .iter()
            .map(|&m| {
                let ok: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.model == m)
                    .filter_map(|c| c.mse.as_ref().ok().copied())
                    .collect();
                let n_failed = cells.iter().filter(|c| c.model == m && c.mse.is_err()).count();
                let n = ok.len();
                let mean = if n == 0 { f64::NAN } else { ok.iter().sum::<f64>() / n as f64 };
                let std = if n < 2 {
                    if n == 1 {
                        0.0
                    } else {
                        f64::NAN
                    }
                } else {
                    (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                };
                Row {
                    model: m,
                    mse_mean: mean,
                    mse_std: std,
                    n_seeds: n,
                    n_failed,
                }
            })
            .collect();
        Self { rows, cells }
    }

    pub fn row(&self, model: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Per-seed error of `model`, if that cell succeeded.
    pub fn cell(&self, model: &str, seed: u64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.seed == seed)
            .and_then(|c| c.mse.as_ref().ok().copied())
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.cells.iter().map(|c| c.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,mse_mean,mse_std,n_seeds,n_failed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.model,
                sci(r.mse_mean),
                sci(r.mse_std),
                r.n_seeds,
                r.n_failed
            );
        }
        out
    }

    /// One line per cell; failed cells carry `nan` and the error message.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("model,seed,mse,status\n");
        for c in &self.cells {
            let (mse, status) = match &c.mse {
                Ok(v) => (sci(*v), "ok".to_string()),
                Err(e) => ("nan".to_string(), format!("\"failed: {}\"", e.replace('"', "'"))),
            };
            let _ = writeln!(out, "{},{},{},{}", c.model, c.seed, mse, status);
        }
        out
    }
}

/// Worker count: `TLRM_THREADS` if set to a positive integer, otherwise
/// the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("TLRM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs independent jobs on up to `threads` workers; results come back in
/// job order whatever the scheduling.
pub fn run_pool<T: Send>(jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>, threads: usize) -> Vec<T> {
    let n = jobs.len();
    let queue: Mutex<Vec<Option<Box<dyn FnOnce() -> T + Send + '_>>>> =
        Mutex::new(jobs.into_iter().map(Some).collect());
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let job = queue.lock().expect("queue lock")[i].take().expect("each job runs once");
                let r = job();
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Row order of the PPC table.
pub const TABLE1_ROWS: [&str; 8] = ["order0", "tvae", "trbm", "kf1", "rvae", "refh", "rtrbm", "kf2"];
/// Row order of the bouncing-ball table.
pub const TABLE2_ROWS: [&str; 4] = ["order0", "trbm", "refh", "rtrbm"];

fn model_cell(cfg: &ExperimentConfig, data: &Data, tag: ModelTag, seed: u64) -> Cell {
    let mse = train_model(cfg, data, tag, seed, &mut Vec::new())
        .and_then(|m| evaluate(cfg, data, tag, &m, seed))
        .map_err(|e| e.to_string());
    Cell {
        model: tag.name(),
        seed,
        mse,
    }
}

fn run_table(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    kind: DatasetKind,
    rows: &'static [&'static str],
    models: &[ModelTag],
) -> Result<ResultsTable> {
    let cfg = ExperimentConfig {
        dataset: kind,
        ..cfg.clone()
    };
    let threads = worker_count();
    let data_jobs: Vec<Box<dyn FnOnce() -> Result<Data> + Send + '_>> = seeds
        .iter()
        .map(|&s| {
            let cfg = &cfg;
            Box::new(move || match kind {
                DatasetKind::Ppc => PpcData::generate(cfg, s).map(Data::Ppc),
                DatasetKind::Balls => BallsData::generate(cfg, s).map(Data::Balls),
            }) as Box<dyn FnOnce() -> Result<Data> + Send + '_>
        })
        .collect();
    let data: Vec<Data> = run_pool(data_jobs, threads).into_iter().collect::<Result<_>>()?;
    let mut jobs: Vec<Box<dyn FnOnce() -> Cell + Send + '_>> = Vec::new();
    for (d, &seed) in data.iter().zip(seeds) {
        let cfg = &cfg;
        jobs.push(Box::new(move || Cell {
            model: "order0",
            seed,
            mse: order0_cell(d).map_err(|e| e.to_string()),
        }));
        for &tag in models {
            jobs.push(Box::new(move || model_cell(cfg, d, tag, seed)));
        }
    }
    let cells = run_pool(jobs, threads);
    Ok(ResultsTable::from_cells(rows, cells))
}

fn order0_cell(data: &Data) -> Result<f64> {
    match data {
        Data::Ppc(d) => Ok(order0_ppc(&d.code, &d.test.spikes, &d.test_truth())?.mse),
        Data::Balls(d) => Ok(order0_mse(&d.test.videos)?),
    }
}

/// PPC position-recovery table: data generated once per seed, then every
/// model trained and scored on it.
pub fn reproduce_table1(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<ResultsTable> {
    run_table(
        cfg,
        seeds,
        DatasetKind::Ppc,
        &TABLE1_ROWS,
        &[
            ModelTag::Tvae,
            ModelTag::Trbm,
            ModelTag::Kf1,
            ModelTag::Rvae,
            ModelTag::Refh,
            ModelTag::Rtrbm,
            ModelTag::Kf2,
        ],
    )
}

/// Bouncing-ball next-frame prediction table.
pub fn reproduce_table2(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<ResultsTable> {
    run_table(
        cfg,
        seeds,
        DatasetKind::Balls,
        &TABLE2_ROWS,
        &[ModelTag::Trbm, ModelTag::Refh, ModelTag::Rtrbm],
    )
}
