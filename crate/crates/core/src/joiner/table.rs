use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::TrainingRow;
use crate::clock::day_stamp;
use crate::error::Result;

/// Append-only NDJSON training table, one file per usecase and UTC day:
/// `<root>/<usecase>/<YYYY-MM-DD>.ndjson`.
pub struct TrainingTable {
    root: PathBuf,
    lock: Mutex<()>,
}

impl TrainingTable {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root, lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn append(&self, rows: &[TrainingRow]) -> Result<()> {
        let _g = self.lock.lock();
        let mut i = 0;
        while i < rows.len() {
            let usecase = &rows[i].usecase;
            let day = day_stamp(rows[i].ts);
            let dir = self.root.join(usecase);
            fs::create_dir_all(&dir)?;
            let f = OpenOptions::new().create(true).append(true).open(dir.join(format!("{day}.ndjson")))?;
            let mut w = BufWriter::new(f);
            while i < rows.len() && &rows[i].usecase == usecase && day_stamp(rows[i].ts) == day {
                serde_json::to_writer(&mut w, &rows[i])?;
                w.write_all(b"\n")?;
                i += 1;
            }
            w.flush()?;
        }
        Ok(())
    }

    /// Replaces every stored row of `usecase` with `rows`.
    pub fn rewrite_usecase(&self, usecase: &str, rows: &[TrainingRow]) -> Result<()> {
        {
            let _g = self.lock.lock();
            let dir = self.root.join(usecase);
            if dir.exists() {
                for e in fs::read_dir(&dir)? {
                    let p = e?.path();
                    if p.extension().is_some_and(|x| x == "ndjson") {
                        fs::remove_file(p)?;
                    }
                }
            }
        }
        let mut sorted = rows.to_vec();
        sorted.sort_by_key(|r| day_stamp(r.ts));
        self.append(&sorted)
    }

    /// All rows of a usecase in file (day) order.
    pub fn read_usecase(&self, usecase: &str) -> Result<Vec<TrainingRow>> {
        let dir = self.root.join(usecase);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
            .collect();
        files.sort();
        let mut rows = Vec::new();
        for f in files {
            rows.extend(read_rows(File::open(f)?)?);
        }
        Ok(rows)
    }
}

/// Appends one JSON document per line.
pub fn append_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an NDJSON file; a missing file reads as empty.
pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_rows(r: impl Read) -> Result<Vec<TrainingRow>> {
    let mut rows = Vec::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}
