//! Metrics CSV: `epoch,lr,drop_fraction,train_loss,test_acc` followed by
//! `density_l{i}_n{size},dropped_l{i},inserted_l{i}` for every layer `i`.
//! Floats are written in shortest round-trip form, so parsing is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{LayerEpoch, MetricsRecord};
use crate::error::{Error, Result};

const FIXED: [&str; 5] = ["epoch", "lr", "drop_fraction", "train_loss", "test_acc"];

fn header(sizes: &[usize]) -> String {
    let mut h = FIXED.join(",");
    for (i, n) in sizes.iter().enumerate() {
        write!(h, ",density_l{i}_n{n},dropped_l{i},inserted_l{i}").unwrap();
    }
    h
}

pub fn metrics_csv_string(records: &[MetricsRecord]) -> Result<String> {
    let sizes: Vec<usize> = records
        .first()
        .map(|r| r.layers.iter().map(|l| l.size).collect())
        .unwrap_or_default();
    let mut out = header(&sizes);
    out.push('\n');
    for r in records {
        if r.layers.len() != sizes.len() || r.layers.iter().zip(&sizes).any(|(l, &s)| l.size != s) {
            return Err(Error::Contract(format!("epoch {} has a different layer layout", r.epoch)));
        }
        write!(out, "{},{},{},{},{}", r.epoch, r.lr, r.drop_fraction, r.train_loss, r.test_acc).unwrap();
        for l in &r.layers {
            write!(out, ",{},{},{}", l.density, l.dropped, l.inserted).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_csv_string(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text)
}

fn parse_header(line: &str) -> Result<Vec<usize>> {
    let cols: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
    let bad = |detail: String| Error::Csv { line: 1, detail };
    if cols.len() < FIXED.len() || cols[..FIXED.len()] != FIXED {
        return Err(bad(format!("header must start with {}", FIXED.join(","))));
    }
    let rest = &cols[FIXED.len()..];
    if !rest.len().is_multiple_of(3) {
        return Err(bad("per-layer columns must come in triplets".into()));
    }
    rest.chunks(3)
        .enumerate()
        .map(|(i, t)| {
            let prefix = format!("density_l{i}_n");
            let size = t[0]
                .strip_prefix(&prefix)
                .and_then(|n| n.parse::<usize>().ok())
                .ok_or_else(|| bad(format!("expected `{prefix}<size>`, found `{}`", t[0])))?;
            if t[1] != format!("dropped_l{i}") || t[2] != format!("inserted_l{i}") {
                return Err(bad(format!("bad column names for layer {i}: `{}`, `{}`", t[1], t[2])));
            }
            Ok(size)
        })
        .collect()
}

fn field<T: std::str::FromStr>(v: &str, name: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Csv {
        line,
        detail: format!("`{v}` is not a valid {name}"),
    })
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let sizes = parse_header(lines.next().ok_or(Error::Csv {
        line: 1,
        detail: "empty file".into(),
    })?)?;
    let width = FIXED.len() + 3 * sizes.len();
    let mut records = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let v: Vec<&str> = raw.split(',').collect();
        if v.len() != width {
            return Err(Error::Csv {
                line,
                detail: format!("expected {width} fields, found {}", v.len()),
            });
        }
        let layers = sizes
            .iter()
            .enumerate()
            .map(|(l, &size)| {
                let b = FIXED.len() + 3 * l;
                Ok(LayerEpoch {
                    size,
                    density: field(v[b], "density", line)?,
                    dropped: field(v[b + 1], "drop count", line)?,
                    inserted: field(v[b + 2], "insert count", line)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(MetricsRecord {
            epoch: field(v[0], "epoch", line)?,
            lr: field(v[1], "learning rate", line)?,
            drop_fraction: field(v[2], "drop fraction", line)?,
            train_loss: field(v[3], "loss", line)?,
            test_acc: field(v[4], "accuracy", line)?,
            layers,
        });
    }
    Ok(records)
}
