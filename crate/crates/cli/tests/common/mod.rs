#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distrank::mcq::write_dataset;
use distrank::prompt::render_completion;
use distrank::{Distractor, Mcq};

pub fn fixture_mcqs(n: usize) -> Vec<Mcq> {
    (0..n)
        .map(|i| Mcq {
            id: format!("q{i}"),
            stem: format!("What is {i} plus {i}?"),
            key: format!("{}", 2 * i),
            key_explanation: format!("{i} + {i} = {}", 2 * i),
            key_selection: 0.4,
            distractors: vec![
                Distractor::new(format!("{i}{i}"), "concatenated", 0.30),
                Distractor::new(format!("{}", i * i + 1000), "multiplied", 0.20),
                Distractor::new(format!("{}", i + 500), "ignored the second term", 0.10),
            ],
        })
        .collect()
}

/// A fixed CoT-shaped completion with twelve distinct distractors.
pub fn generic_completion() -> String {
    let pairs: Vec<(String, String)> = (0..12)
        .map(|j| (format!("misconception {j}"), format!("answer-{j}")))
        .collect();
    render_completion(&pairs)
}

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(n_mcqs: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path().join("data.jsonl"), &fixture_mcqs(n_mcqs)).unwrap();
        let generator = serde_json::json!({ "default_text": generic_completion() });
        fs::write(dir.path().join("gen.json"), generator.to_string()).unwrap();
        fs::write(
            dir.path().join("score.json"),
            r#"{"default_score": "hashed"}"#,
        )
        .unwrap();
        let config = format!(
            "dataset = \"{d}/data.jsonl\"\noutput_dir = \"{d}/out\"\ncache_dir = \"{d}/cache\"\nseed = 7\n\
             generator_kind = \"mock\"\ngenerator_mock_script = \"{d}/gen.json\"\ngenerator_model = \"gen\"\n\
             scorer_kind = \"mock\"\nscorer_mock_script = \"{d}/score.json\"\nscorer_model = \"rank\"\n",
            d = dir.path().display()
        );
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join("out").join(name)
    }

    pub fn run(&self, args: &[&str]) -> Output {
        let config = self.path("run.toml");
        Command::new(env!("CARGO_BIN_EXE_distrank"))
            .arg("--config")
            .arg(&config)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }
}

pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Byte contents of every file under `dir`, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}
