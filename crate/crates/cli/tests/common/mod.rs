#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL: &str = r#"
[experiment]
core_budget = 20
n_batches = 4
seeds = [3, 4]

[experiment.train]
learning_rate = 0.05
epochs = 8
batch_size = 32
seed = 0

[experiment.bitflip_train]
learning_rate = 0.05
epochs = 5
batch_size = 64
seed = 0

[experiment.drift]
dim = 16
classes = 4
n_source = 400
n_target = 200
shift = 3.0
seed = 0
"#;

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, format!("{SMALL}\n{extra}")).unwrap();
    path
}

pub fn qcore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcore"))
        .args(args)
        .env_remove("QCORE_LOG")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    stdout(&o)
}

pub fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}
