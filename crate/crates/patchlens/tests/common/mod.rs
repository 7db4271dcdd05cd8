// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use patchlens::archive::archive_bytes;
use patchlens::RunArgs;
use patchlens_testkit::{desk_corpus, fixture, random_model, RawModel, TinyConfig};
use tempfile::TempDir;

pub const VOCAB_SIZE: usize = 307;

/// A temporary directory holding a tiny model, the fixture vocab and a synthetic corpus.
pub struct Desk {
    pub dir: TempDir,
    pub raw: RawModel,
}

impl Desk {
    pub fn new(n_queries: usize, n_docs: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let raw = random_model(TinyConfig::tiny(VOCAB_SIZE), seed);
        write_model(&raw, &dir.path().join("model.safetensors"));
        fs::copy(fixture("vocab.txt"), dir.path().join("vocab.txt")).unwrap();
        let (queries, docs) = desk_corpus(n_queries, n_docs, seed);
        write_tsv(&dir.path().join("queries.tsv"), &queries);
        write_tsv(&dir.path().join("corpus.tsv"), &docs);
        Self { dir, raw }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Arguments for a run writing into `out` under the desk.
    pub fn args(&self, out: &str) -> RunArgs {
        RunArgs {
            model_archive: Some(self.path("model.safetensors")),
            vocab: Some(self.path("vocab.txt")),
            corpus: Some(self.path("corpus.tsv")),
            queries: Some(self.path("queries.tsv")),
            output_dir: Some(self.path(out)),
            k: Some(10),
            n_queries: Some(5),
            max_len: Some(64),
            ..RunArgs::default()
        }
    }
}

pub fn write_model(raw: &RawModel, path: &Path) {
    let bytes = archive_bytes(raw.tensors.iter().map(|(n, (s, d))| (n.as_str(), s.as_slice(), d.as_slice())));
    fs::write(path, bytes).unwrap();
    let c = raw.cfg;
    let config = format!(
        "{{\"dim\": {}, \"n_layers\": {}, \"n_heads\": {}, \"hidden_dim\": {}, \"vocab_size\": {}, \"max_position_embeddings\": {}}}\n",
        c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size, c.max_positions
    );
    fs::write(path.with_file_name("config.json"), config).unwrap();
}

pub fn write_tsv(path: &Path, rows: &[(String, String)]) {
    let mut s = String::new();
    for (id, text) in rows {
        writeln!(s, "{id}\t{text}").unwrap();
    }
    fs::write(path, s).unwrap();
}

/// Every file under `dir` with its bytes, by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
