//! Dataset wire format: JSON Lines, one user per line.
//!
//! ```text
//! {"user": 7, "rec": [[product, ts], ...], "search": [[product, ts, [word, ...]], ...]}
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Search,
    Rec,
}

impl Scenario {
    pub const BOTH: [Scenario; 2] = [Scenario::Search, Scenario::Rec];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Search => "search",
            Scenario::Rec => "rec",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "search" => Ok(Scenario::Search),
            "rec" | "recommendation" => Ok(Scenario::Rec),
            other => Err(Error::config(format!("unknown scenario {other:?}"))),
        }
    }
}

/// One interaction, flattened out of a [`UserRecord`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: u64,
    pub product: u64,
    pub timestamp: i64,
    pub scenario: Scenario,
    pub query: Vec<u64>,
}

/// All interactions of one user, as stored on disk.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRecord {
    pub user: u64,
    #[serde(default)]
    pub rec: Vec<(u64, i64)>,
    #[serde(default)]
    pub search: Vec<(u64, i64, Vec<u64>)>,
}

impl UserRecord {
    pub fn interactions(&self) -> impl Iterator<Item = InteractionRecord> + '_ {
        let rec = self.rec.iter().map(move |&(product, timestamp)| InteractionRecord {
            user: self.user,
            product,
            timestamp,
            scenario: Scenario::Rec,
            query: Vec::new(),
        });
        let search = self.search.iter().map(move |(product, timestamp, words)| InteractionRecord {
            user: self.user,
            product: *product,
            timestamp: *timestamp,
            scenario: Scenario::Search,
            query: words.clone(),
        });
        rec.chain(search)
    }

    pub fn len(&self) -> usize {
        self.rec.len() + self.search.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rec.is_empty() && self.search.is_empty()
    }

    /// Search records must carry at least one query word.
    pub fn validate(&self) -> Result<()> {
        if let Some((p, ts, _)) = self.search.iter().find(|(_, _, w)| w.is_empty()) {
            return Err(Error::data(format!(
                "user {}: search interaction with product {p} at {ts} has no query words",
                self.user
            )));
        }
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<UserRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UserRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), lineno + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
