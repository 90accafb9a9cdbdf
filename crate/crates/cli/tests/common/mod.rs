#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Runs the `demt` binary with `args` and optional extra environment.
pub fn demt(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_demt"));
    cmd.args(args).env_remove("DEMT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn demt")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Fails with both streams when the command did not exit 0.
pub fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stdout:\n{}\nstderr:\n{}",
        stdout(&out),
        stderr(&out)
    );
    out
}

/// Writes a small, fast configuration into `dir` and returns its path.
pub fn tiny_config(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let mut text = format!(
        "# small run\n\
         data.dir = {}\n\
         data.count = 6\n\
         data.val_count = 2\n\
         data.height = 32\n\
         data.width = 32\n\
         model.trunk_widths = 4,4,4,4\n\
         model.reduced_channels = 4\n\
         model.scales = 4,8\n\
         train.steps = 4\n\
         train.checkpoint_every = 2\n",
        data.display()
    );
    for line in extra {
        text.push_str(line);
        text.push('\n');
    }
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
