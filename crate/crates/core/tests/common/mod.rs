#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use ilearner::backends::{HashEmbedding, ScriptedMock};
use ilearner::ingest::{parse_dataset, DatasetFormat};
use ilearner::refine::Backends;
use ilearner::types::Mcq;

pub fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn load(name: &str) -> Vec<Mcq> {
    let parsed = parse_dataset(std::fs::File::open(data(name)).unwrap(), &DatasetFormat::Jsonl).unwrap();
    assert!(parsed.errors.is_empty(), "{:?}", parsed.errors);
    parsed.mcqs
}

/// The same backends `tests/data/mock.toml` describes.
pub fn scripted_backends() -> Backends {
    let script = || ScriptedMock::from_reader("scripted", std::fs::File::open(data("script.jsonl")).unwrap()).unwrap();
    Backends {
        generator: Arc::new(script()),
        evaluator: Arc::new(script()),
        embedder: Some(Arc::new(HashEmbedding::new("hash-embed", 32, 11))),
    }
}

pub fn ilearner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilearner"))
        .args(args)
        .env_remove("ILEARNER_LOG")
        .output()
        .expect("binary runs")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Compares `actual` with a file under `tests/data/golden`. Set
/// `ILEARNER_UPDATE_GOLDEN=1` to rewrite the file instead.
pub fn assert_golden(name: &str, actual: &str) {
    let path = data("golden").join(name);
    if std::env::var_os("ILEARNER_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| {
        panic!(
            "missing golden file {}; rerun with ILEARNER_UPDATE_GOLDEN=1",
            path.display()
        )
    });
    assert_eq!(actual, expected, "output differs from {}", path.display());
}

/// Plain unit-norm vector with a single non-zero coordinate.
pub fn basis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}
