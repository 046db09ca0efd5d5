//! JSON Lines datasets: one `{"state": ..., "text": ...}` object per line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{ClspError, Result};
use crate::state::StateTextPair;
use crate::text::tokenize;

fn line_error(path: &Path, line: usize, reason: impl Into<String>) -> ClspError {
    ClspError::Dataset {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

pub fn write_dataset(path: &Path, pairs: &[StateTextPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(ClspError::Config("refusing to write an empty dataset".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| ClspError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| ClspError::io(path, e))?;
    }
    w.flush().map_err(|e| ClspError::io(path, e))
}

/// Streams validated records to `f` without holding the file in memory.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn for_each_pair(path: &Path, mut f: impl FnMut(StateTextPair) -> Result<()>) -> Result<usize> {
    let file = std::fs::File::open(path).map_err(|e| ClspError::io(path, e))?;
    let mut count = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ClspError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let pair: StateTextPair = serde_json::from_str(&line).map_err(|e| line_error(path, n, e.to_string()))?;
        pair.state.validate().map_err(|e| line_error(path, n, e.to_string()))?;
        tokenize(&pair.text).map_err(|e| line_error(path, n, e.to_string()))?;
        f(pair)?;
        count += 1;
    }
    Ok(count)
}

pub fn read_dataset(path: &Path) -> Result<Vec<StateTextPair>> {
    let mut out = Vec::new();
    for_each_pair(path, |p| {
        out.push(p);
        Ok(())
    })?;
    if out.is_empty() {
        return Err(ClspError::Config(format!("{} holds no records", path.display())));
    }
    Ok(out)
}
