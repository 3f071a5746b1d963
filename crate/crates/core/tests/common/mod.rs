#![allow(dead_code)]

pub mod oracle;

use std::path::Path;
use std::process::{Command, Output};

pub fn magtrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magtrack"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn magtrack")
}

pub fn magtrack_ok(args: &[&str], cwd: &Path) -> String {
    let out = magtrack(args, cwd);
    assert!(
        out.status.success(),
        "magtrack {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}
