//! Argument parsing and subcommand dispatch.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tlrm::balls::pgm_bytes;
use tlrm::harmonium::{predict_next, EfhParams};
use tlrm::rvae::generate_backward;
use tlrm::seq::Sequence;

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::pipeline::{
    evaluate, from_checkpoint, spike_sequences, to_checkpoint, train_model, BallsData, Data, LogRow, ModelTag,
    Trained,
};
use crate::table::{reproduce_table1, reproduce_table2, sci, ResultsTable};

#[derive(Debug, Parser)]
#[command(name = "tlrm", about = "Train and evaluate temporally local recurrent generative models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train and test splits of the configured dataset.
    GenData(Common),
    /// Train a model and write its checkpoint and training log.
    Train(WithModel),
    /// Score a trained checkpoint on its test split.
    Eval(WithModel),
    /// Next-frame predictions of a harmonium checkpoint on the first test sequence.
    Predict(WithModel),
    /// Generate a sequence backwards in time from a VAE checkpoint.
    Generate(WithModel),
    /// Reproduce the population-code table.
    Table1(Common),
    /// Reproduce the bouncing-ball table.
    Table2(Common),
    /// Write the first bouncing-ball test video as PGM frames.
    DumpFrames(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `section.key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed. Tables use the configured seed list when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    model: ModelArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Refh,
    Trbm,
    Rtrbm,
    Rvae,
    Tvae,
    Kf1,
    Kf2,
}

impl From<ModelArg> for ModelTag {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Refh => ModelTag::Refh,
            ModelArg::Trbm => ModelTag::Trbm,
            ModelArg::Rtrbm => ModelTag::Rtrbm,
            ModelArg::Rvae => ModelTag::Rvae,
            ModelArg::Tvae => ModelTag::Tvae,
            ModelArg::Kf1 => ModelTag::Kf1,
            ModelArg::Kf2 => ModelTag::Kf2,
        }
    }
}

const DEFAULT_SEED: u64 = 1;

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        Ok(&self.out)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn frames_csv(seq: &Sequence, first: &str) -> String {
    let mut out = String::from(first);
    for i in 0..seq.dim() {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
    for (t, f) in seq.frames().enumerate() {
        let _ = write!(out, "{t}");
        for v in f {
            let _ = write!(out, ",{}", sci(*v));
        }
        out.push('\n');
    }
    out
}

fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,objective,metric\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.epoch, sci(r.objective), sci(r.metric));
    }
    out
}

fn checkpoint_path(out: &Path, tag: ModelTag) -> PathBuf {
    out.join(format!("{}.tlrm", tag.name()))
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out_dir()?;
    match Data::generate(&cfg, c.seed())? {
        Data::Ppc(d) => {
            d.train.save(&out.join("ppc_train.ppc1"))?;
            d.test.save(&out.join("ppc_test.ppc1"))?;
            write(&out.join("ppc_test.csv"), d.test.to_csv())?;
        }
        Data::Balls(d) => {
            d.train.save(&out.join("balls_train.bbl1"))?;
            d.test.save(&out.join("balls_test.bbl1"))?;
        }
    }
    Ok(())
}

fn train(a: &WithModel) -> Result<()> {
    let cfg = a.common.config()?;
    let seed = a.common.seed();
    let out = a.common.out_dir()?;
    let tag = ModelTag::from(a.model);
    let data = Data::generate(&cfg, seed)?;
    let mut log = Vec::new();
    let model = train_model(&cfg, &data, tag, seed, &mut log)?;
    to_checkpoint(&cfg, tag, &model, seed)?.save(&checkpoint_path(out, tag))?;
    write(&out.join(format!("{}_train.csv", tag.name())), log_csv(&log))
}

/// Loads `<out>/<model>.tlrm` and regenerates the data it was trained on.
fn load_trained(a: &WithModel) -> Result<(ModelTag, ExperimentConfig, Trained, u64)> {
    let tag = ModelTag::from(a.model);
    let ck = Checkpoint::load(&checkpoint_path(&a.common.out, tag))?;
    let (stored, cfg, model) = from_checkpoint(&ck)?;
    if stored != tag {
        return Err(CliError::Checkpoint(format!(
            "checkpoint holds {}, not {}",
            stored.name(),
            tag.name()
        )));
    }
    Ok((tag, cfg, model, ck.seed))
}

fn eval(a: &WithModel) -> Result<()> {
    let (tag, cfg, model, seed) = load_trained(a)?;
    let data = Data::generate(&cfg, seed)?;
    let mse = evaluate(&cfg, &data, tag, &model, seed)?;
    let csv = format!(
        "model,dataset,seed,mse\n{},{},{},{}\n",
        tag.name(),
        cfg.dataset.name(),
        seed,
        sci(mse)
    );
    write(&a.common.out.join(format!("{}_eval.csv", tag.name())), csv)
}

fn predict(a: &WithModel) -> Result<()> {
    let (tag, cfg, model, seed) = load_trained(a)?;
    let Trained::Efh(p) = model else {
        return Err(tlrm::Error::UnsupportedVariant(format!(
            "{} has no clamped-Gibbs next-frame predictor",
            tag.name()
        ))
        .into());
    };
    let data = Data::generate(&cfg, seed)?;
    let seq = match &data {
        Data::Ppc(d) => spike_sequences(&d.test)?.swap_remove(0),
        Data::Balls(d) => d.test.videos[0].clone(),
    };
    let preds = predict_sequence(&p, &seq, cfg.eval.sweeps, a.common.seed())?;
    write(
        &a.common.out.join(format!("{}_predict.csv", tag.name())),
        frames_csv(&preds, "t"),
    )
}

/// Row `t` predicts frame `t + 1` from frames `0..=t`.
fn predict_sequence(p: &EfhParams, seq: &Sequence, sweeps: usize, seed: u64) -> Result<Sequence> {
    let mut rng = tlrm::rng::SeedStream::new(seed).rng("predict");
    let stats = tlrm::harmonium::infer_suffstats(p, seq)?;
    let mut frames = Vec::with_capacity(seq.len().saturating_sub(1));
    for t in 0..seq.len().saturating_sub(1) {
        frames.push(predict_next(p, &stats[t], seq.frame(t), sweeps, &mut rng)?);
    }
    Ok(Sequence::from_frames(seq.dim(), &frames)?)
}

fn generate(a: &WithModel) -> Result<()> {
    let (tag, cfg, model, _) = load_trained(a)?;
    let Trained::Rvae(p) = model else {
        return Err(tlrm::Error::UnsupportedVariant(format!("{} is not a VAE", tag.name())).into());
    };
    let len = match cfg.dataset {
        DatasetKind::Ppc => cfg.ppc.steps,
        DatasetKind::Balls => cfg.balls.steps,
    };
    let mut rng = tlrm::rng::SeedStream::new(a.common.seed()).rng("generate");
    let seq = generate_backward(&p, len, &mut rng)?;
    let out = &a.common.out;
    write(
        &out.join(format!("{}_generated.csv", tag.name())),
        frames_csv(&seq, "step"),
    )?;
    if cfg.dataset == DatasetKind::Balls {
        write_pgms(&out.join(format!("{}_generated", tag.name())), &seq, cfg.balls.res)?;
    }
    Ok(())
}

fn write_pgms(dir: &Path, seq: &Sequence, res: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (t, f) in seq.frames().enumerate() {
        write(&dir.join(format!("frame_{t:04}.pgm")), pgm_bytes(f, res))?;
    }
    Ok(())
}

fn dump_frames(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out_dir()?;
    let d = BallsData::generate(&cfg, c.seed())?;
    write_pgms(&out.join("frames"), &d.test.videos[0], cfg.balls.res)
}

fn table(c: &Common, name: &str, run: fn(&ExperimentConfig, &[u64]) -> Result<ResultsTable>) -> Result<()> {
    let cfg = c.config()?;
    let out = c.out_dir()?;
    let seeds = match c.seed {
        Some(s) => vec![s],
        None if name == "table1" => cfg.table1_seeds.clone(),
        None => cfg.table2_seeds.clone(),
    };
    let t = run(&cfg, &seeds)?;
    write(&out.join(format!("{name}.csv")), t.summary_csv())?;
    write(&out.join(format!("{name}_cells.csv")), t.cells_csv())?;
    print!("{}", t.summary_csv());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Generate(a) => generate(a),
        Command::Table1(c) => table(c, "table1", reproduce_table1),
        Command::Table2(c) => table(c, "table2", reproduce_table2),
        Command::DumpFrames(c) => dump_frames(c),
    }
}

/// Runs the harness on `argv` (program name first) and returns the exit
/// code: 0 on success, 1 for usage errors, 2 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
