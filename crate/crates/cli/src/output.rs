//! Artifact files. Every file opens with a provenance line naming the tool
//! version, the config hash and, where randomness is involved, the seed.
//! Nothing time-dependent is written, so identical inputs give identical bytes.
use crate::error::CliError;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl Provenance {
    /// Header line without the comment marker.
    pub fn line(&self) -> String {
        let mut s = format!("mvflow {VERSION} config_hash={}", self.config_hash);
        if let Some(seed) = self.seed {
            write!(s, " seed={seed}").unwrap();
        }
        s
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            config_hash: self.config_hash.clone(),
            seed: Some(seed),
        }
    }
}

pub struct ArtifactDir {
    pub root: PathBuf,
    pub provenance: Provenance,
    written: Vec<PathBuf>,
}

impl ArtifactDir {
    pub fn create(root: &Path, provenance: Provenance) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            provenance,
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// A CSV table; floats use the shortest representation that round-trips.
    pub fn csv(
        &mut self,
        name: &str,
        columns: &[&str],
        rows: &[Vec<Cell>],
    ) -> Result<PathBuf, CliError> {
        let mut text = format!("# {}\n{}\n", self.provenance.line(), columns.join(","));
        for row in rows {
            debug_assert_eq!(row.len(), columns.len());
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        self.text(name, &text)
    }

    /// Writes `body` verbatim after a header carried by `comment`, e.g. `#`.
    pub fn with_header(
        &mut self,
        name: &str,
        comment: &str,
        body: &str,
    ) -> Result<PathBuf, CliError> {
        let text = format!("{comment} {}\n{body}", self.provenance.line());
        self.text(name, &text)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        fs::write(&path, text)?;
        self.written.push(path.clone());
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Real(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format!("{v:?}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

#[macro_export]
macro_rules! row {
    ($($v:expr),* $(,)?) => { vec![$($crate::output::Cell::from($v)),*] };
}
