#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ptse_testkit::RegimeFixture;

/// A bundled dataset: `<name>_train.csv` and, when `holdout_rows > 0`,
/// `<name>_holdout.csv`.
pub struct Bundled {
    pub name: &'static str,
    pub fixture: RegimeFixture,
}

fn regime(members: usize, train_rows: usize, holdout_rows: usize, q: f64, seed: u64) -> RegimeFixture {
    RegimeFixture {
        members,
        train_rows,
        holdout_rows,
        q,
        switch_prob: 0.1,
        bias: 2.0,
        noise: 1.0,
        seed,
    }
}

pub fn bundled() -> Vec<Bundled> {
    vec![
        Bundled { name: "toy_k2", fixture: regime(2, 96, 24, 0.5, 11) },
        Bundled { name: "toy_k3", fixture: regime(3, 120, 24, 0.5, 12) },
        Bundled { name: "k4_t168", fixture: regime(4, 168, 0, 0.5, 13) },
        Bundled { name: "regime_q50", fixture: regime(2, 600, 200, 0.5, 21) },
        Bundled { name: "regime_q90", fixture: regime(2, 600, 200, 0.9, 22) },
    ]
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(file: &str) -> PathBuf {
    fixtures_dir().join(file)
}

pub fn updating() -> bool {
    std::env::var_os("UPDATE_FIXTURES").is_some()
}

/// Runs the `ptse` binary with `PTSE_SEED` cleared.
pub fn ptse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptse"))
        .args(args)
        .env_remove("PTSE_SEED")
        .output()
        .expect("spawn ptse")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}
