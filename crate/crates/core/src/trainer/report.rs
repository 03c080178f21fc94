use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{EpochRecord, Metrics};
use crate::data::{ClassIndex, NUM_CLASSES};
use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str = "epoch,l_ce,l_ctc,l_scl,l_acl,total";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        writeln!(out, "{},{},{},{},{},{}", r.epoch, r.ce, r.ctc, r.scl, r.acl, r.total).unwrap();
    }
    out
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_csv(metrics: &Metrics) -> String {
    let names: Vec<&str> = (0..NUM_CLASSES).map(|c| ClassIndex::new(c).unwrap().name()).collect();
    let mut out = format!("true\\pred,{}\n", names.join(","));
    for (c, row) in metrics.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{}", names[c], cells.join(",")).unwrap();
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write(path, &history_csv(history))
}

pub fn write_confusion_csv(path: &Path, metrics: &Metrics) -> Result<()> {
    write(path, &confusion_csv(metrics))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write(path, &s)
}
