#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

pub const BASE_CONFIG: &str = r#"
[run]
id = "t"
seed = 3
out = "out"

[corpus]
kind = "synthetic"
path = "synthetic20"
granularity = "intra"

[endpoints.gen]
base_url = "mock://"
model = "mock-generator"
mock_spec = "mock/generator.json"

[endpoints.target]
base_url = "mock://"
model = "mock-target"
mock_spec = "mock/target.json"
logprobs = true

[roles]
generator = "gen"
target = "target"
subject = "target"

[generate]
demos = "demos"
"#;

/// A scratch copy of the fixture tree with `config` written as `run.toml`.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(config: &str) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        copy_dir(&fixtures(), dir.path());
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Workspace { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config(&self) -> PathBuf {
        self.path().join("run.toml")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.path().join("out/runs/t")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.run_dir().join(name)
    }

    pub fn cli(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_eci-cot"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .env_remove("RUST_LOG")
            .output()
            .unwrap()
    }

    /// Runs a subcommand and asserts its exit code.
    pub fn expect(&self, args: &[&str], code: i32) -> Output {
        let out = self.cli(args);
        assert_eq!(
            out.status.code(),
            Some(code),
            "{args:?}\nstderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    pub fn jsonl(&self, name: &str) -> Vec<serde_json::Value> {
        std::fs::read_to_string(self.file(name))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}
