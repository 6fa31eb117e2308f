//! Sample records and the on-disk dataset layout:
//! `<tag>/{train,val,test}.jsonl.gz` plus `<tag>/manifest.json`.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AdjMatrix, EdgeKind};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("dataset at {path} was built by generator {found}, expected {expected}")]
    StaleDataset { path: PathBuf, found: String, expected: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfgGraph {
    /// Per block, per instruction, the token texts.
    pub blocks: Vec<Vec<Vec<String>>>,
    pub edges: Vec<(usize, usize, EdgeKind)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CctNodeRecord {
    pub proc: String,
    /// Value tokens of each snapshot.
    pub snapshots: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CctGraph {
    pub nodes: Vec<CctNodeRecord>,
    /// Parent to child.
    pub edges: Vec<(usize, usize)>,
}

impl CctGraph {
    pub fn nodes_of(&self, proc_: &str) -> Vec<usize> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.proc == proc_).map(|(i, _)| i).collect()
    }
}

/// One procedure of one generated program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub program_id: String,
    pub procedure: String,
    pub config: String,
    pub cfg: CfgGraph,
    pub adjacency: Vec<String>,
    pub cct: CctGraph,
    pub label: u8,
    /// Whether the procedure ran under the profiling input. Metadata only;
    /// models never read it.
    pub exercised: bool,
    /// Instructions the oracle executed inside this procedure.
    pub cost: u64,
    /// Program text in the record's dialect.
    pub program: String,
    /// Initial memory of the labelling run.
    pub inputs: Vec<(u64, i64)>,
}

impl SampleRecord {
    pub fn adjacency_matrix(&self) -> AdjMatrix {
        AdjMatrix::from_row_strings(&self.adjacency).unwrap_or_else(|| AdjMatrix::zeros(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
}

impl ClassCounts {
    pub fn of(samples: &[SampleRecord]) -> ClassCounts {
        let positive = samples.iter().filter(|s| s.label == 1).count();
        ClassCounts { positive, negative: samples.len() - positive }
    }

    pub fn total(&self) -> usize {
        self.positive + self.negative
    }

    pub fn positive_ratio(&self) -> f64 {
        self.positive as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tag: String,
    pub seed: u64,
    pub generator_version: String,
    pub ratios: [f64; 3],
    pub train: ClassCounts,
    pub val: ClassCounts,
    pub test: ClassCounts,
    /// Programs generated to fill the splits, including rejected ones.
    pub programs_generated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub tag: String,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub manifest: Manifest,
}

impl DatasetSplit {
    pub fn roles(&self) -> [(&'static str, &Vec<SampleRecord>); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let res = fs::File::create(&tmp).and_then(|mut f| {
        f.write_all(bytes)?;
        f.sync_all()
    });
    if let Err(e) = res.and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(DatasetError::Io { path: path.to_path_buf(), source: e });
    }
    Ok(())
}

pub fn encode_jsonl_gz(samples: &[SampleRecord]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    for s in samples {
        serde_json::to_writer(&mut enc, s).expect("records serialize");
        enc.write_all(b"\n").expect("in-memory write");
    }
    enc.finish().expect("in-memory write")
}

pub fn write_jsonl_gz(path: &Path, samples: &[SampleRecord]) -> Result<(), DatasetError> {
    write_atomic(path, &encode_jsonl_gz(samples))
}

pub fn read_jsonl_gz(path: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(GzDecoder::new(f)).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_split(root: &Path, split: &DatasetSplit) -> Result<PathBuf, DatasetError> {
    let dir = root.join(&split.tag);
    for (role, samples) in split.roles() {
        write_jsonl_gz(&dir.join(format!("{role}.jsonl.gz")), samples)?;
    }
    let manifest = serde_json::to_vec_pretty(&split.manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| DatasetError::Parse { path, line: 0, reason: e.to_string() })
}

/// Loads `<dir>/{train,val,test}.jsonl.gz`, rejecting datasets from another
/// generator version.
pub fn read_split(dir: &Path, expected_version: &str) -> Result<DatasetSplit, DatasetError> {
    let manifest = read_manifest(dir)?;
    if manifest.generator_version != expected_version {
        return Err(DatasetError::StaleDataset {
            path: dir.to_path_buf(),
            found: manifest.generator_version,
            expected: expected_version.to_string(),
        });
    }
    Ok(DatasetSplit {
        tag: manifest.tag.clone(),
        train: read_jsonl_gz(&dir.join("train.jsonl.gz"))?,
        val: read_jsonl_gz(&dir.join("val.jsonl.gz"))?,
        test: read_jsonl_gz(&dir.join("test.jsonl.gz"))?,
        manifest,
    })
}
