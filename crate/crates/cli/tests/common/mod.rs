//! Helpers shared by the harness integration tests.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Small enough that every subcommand finishes in a few seconds.
pub const TINY: &str = "\
run.table1_seeds = 1,2
run.table2_seeds = 1
ppc.train = 3
ppc.test = 2
ppc.steps = 40
balls.train = 2
balls.test = 1
balls.steps = 12
balls.res = 8
efh_ppc.hidden = 8
efh_ppc.epochs = 2
efh_balls.hidden = 16
efh_balls.epochs = 2
rvae_ppc.latent = 2
rvae_ppc.hidden1 = 8
rvae_ppc.hidden2 = 8
rvae_ppc.epochs = 2
rvae_balls.latent = 3
rvae_balls.hidden1 = 8
rvae_balls.hidden2 = 8
rvae_balls.epochs = 2
em.iters = 3
eval.sweeps = 2
";

/// Writes `TINY` plus `extra` lines to `dir/tiny.cfg`.
pub fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

pub fn tlrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlrm"))
        .args(args)
        .env("TLRM_THREADS", "2")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}
