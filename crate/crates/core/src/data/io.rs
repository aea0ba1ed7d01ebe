//! JSON Lines persistence.
//!
//! Line 1 is the header `{"version":1,"d_s":..,"d_a":..}`; every following
//! line is one transition `{"traj","t","s","a","r","s2","done"}`. Lines of one
//! trajectory are contiguous and ordered by `t`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Trajectory, Transition};
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    d_s: usize,
    d_a: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    traj: i64,
    t: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    r: f64,
    s2: Vec<f64>,
    done: bool,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses a dataset from JSONL text and validates it.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.split('\n').enumerate().peekable();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(parse_err(1, format!("unsupported version {}", header.version)));
    }

    let mut trajectories: Vec<Trajectory> = Vec::new();
    while let Some((i, line)) = lines.next() {
        let lineno = i + 1;
        if line.is_empty() {
            if lines.peek().is_none() {
                break;
            }
            return Err(parse_err(lineno, "empty line"));
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.s.len() != header.d_s || rec.s2.len() != header.d_s {
            return Err(parse_err(lineno, format!("state width differs from d_s = {}", header.d_s)));
        }
        if rec.a.len() != header.d_a {
            return Err(parse_err(lineno, format!("action width differs from d_a = {}", header.d_a)));
        }
        let x = Transition {
            traj_id: rec.traj,
            t: rec.t,
            state: rec.s,
            action: rec.a,
            reward: rec.r,
            next_state: rec.s2,
            done: rec.done,
        };
        match trajectories.last_mut() {
            Some(tr) if tr.traj_id == x.traj_id => tr.transitions.push(x),
            _ => trajectories.push(Trajectory {
                traj_id: x.traj_id,
                transitions: vec![x],
            }),
        }
    }
    Dataset::new(header.d_s, header.d_a, trajectories)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text)
}

/// Serializes a dataset; doubles use the shortest representation that
/// round-trips exactly.
pub fn to_jsonl(dataset: &Dataset) -> Result<String> {
    let mut out = serde_json::to_string(&Header {
        version: FORMAT_VERSION,
        d_s: dataset.d_s(),
        d_a: dataset.d_a(),
    })?;
    out.push('\n');
    for x in dataset.transitions() {
        let rec = Record {
            traj: x.traj_id,
            t: x.t,
            s: x.state.clone(),
            a: x.action.clone(),
            r: x.reward,
            s2: x.next_state.clone(),
            done: x.done,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes to a temporary sibling file and renames it over `path`.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), to_jsonl(dataset)?.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(e)
    })
}
