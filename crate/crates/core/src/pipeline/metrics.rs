//! Tab-separated training log, one row per transformer set per optimizer step.
//!
//! The first line is [`METRICS_HEADER`], the second names the columns. Floats
//! use the shortest representation that parses back exactly; a missing patch
//! term is written as `-`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "# hctx metrics v1";
pub const METRICS_COLUMNS: &str = "stage\tepoch\tstep\tset\ttotal\tdino\tclass\tpatch\tlr\tlr_surrogates\tema";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    /// 1-based transformer set.
    pub set: usize,
    pub total: f64,
    pub dino: f64,
    pub class: f64,
    pub patch: Option<f64>,
    pub lr: f64,
    pub lr_surrogates: f64,
    pub ema: f64,
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        let patch = self.patch.map_or_else(|| "-".to_string(), |p| p.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.stage,
            self.epoch,
            self.step,
            self.set,
            self.total,
            self.dino,
            self.class,
            patch,
            self.lr,
            self.lr_surrogates,
            self.ema
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 11 {
            return Err(bad(format!("expected 11 fields, found {}", fields.len())));
        }
        let int = |i: usize| fields[i].parse::<u64>().map_err(|_| bad(format!("field {} is not an integer: {:?}", i + 1, fields[i])));
        let float = |i: usize| {
            fields[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("field {} is not a finite number: {:?}", i + 1, fields[i])))
        };
        let stage = u8::try_from(int(0)?).map_err(|_| bad("stage out of range"))?;
        Ok(MetricsRow {
            stage,
            epoch: int(1)? as usize,
            step: int(2)?,
            set: int(3)? as usize,
            total: float(4)?,
            dino: float(5)?,
            class: float(6)?,
            patch: if fields[7] == "-" { None } else { Some(float(7)?) },
            lr: float(8)?,
            lr_surrogates: float(9)?,
            ema: float(10)?,
        })
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("metrics log", detail)
}

/// Parses a whole log, header included.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad("missing header line"));
    }
    if lines.next() != Some(METRICS_COLUMNS) {
        return Err(bad("missing column line"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| MetricsRow::parse_line(l).map_err(|e| bad(format!("row {}: {e}", i + 1))))
        .collect()
}

/// Appends rows to a log file, writing the header when the file is new.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter { out: BufWriter::new(file) };
        if fresh {
            w.raw(&format!("{METRICS_HEADER}\n{METRICS_COLUMNS}\n"))?;
        }
        Ok(w)
    }

    fn raw(&mut self, s: &str) -> Result<()> {
        self.out
            .write_all(s.as_bytes())
            .map_err(|e| Error::io(Path::new("metrics log"), e))
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.raw(&row.to_line())?;
        self.raw("\n")
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(Path::new("metrics log"), e))
    }
}
