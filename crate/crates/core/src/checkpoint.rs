//! Text checkpoints: an ordered key to tensor map.
//!
//! ```text
//! metasampler-checkpoint v1
//! <key> <shape> <v1> <v2> ...
//! ```
//!
//! `<shape>` is the dimensions joined by `x` (`-` for a scalar). Values use
//! Rust's shortest round-trip formatting, so loading reproduces every bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "metasampler-checkpoint v1";

pub fn to_string(entries: &[(String, Tensor)]) -> String {
    let mut out = String::from(MAGIC);
    out.push('\n');
    for (key, t) in entries {
        let shape = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        };
        write!(out, "{key} {shape}").expect("write to string");
        for v in t.data() {
            write!(out, " {v:?}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn parse(text: &str) -> Result<BTreeMap<String, Tensor>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{MAGIC}`"),
            })
        }
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: line_no, message };
        let mut fields = line.split_whitespace();
        let key = fields.next().ok_or_else(|| err("missing key".into()))?;
        let shape_field = fields.next().ok_or_else(|| err("missing shape".into()))?;
        let shape: Vec<usize> = if shape_field == "-" {
            vec![]
        } else {
            shape_field
                .split('x')
                .map(|d| d.parse().map_err(|_| err(format!("bad dimension `{d}`"))))
                .collect::<Result<_>>()?
        };
        let data: Vec<f64> = fields
            .map(|v| v.parse().map_err(|_| err(format!("bad value `{v}`"))))
            .collect::<Result<_>>()?;
        let t = Tensor::new(shape, data).map_err(|e| err(e.to_string()))?;
        if out.insert(key.to_string(), t).is_some() {
            return Err(err(format!("duplicate key `{key}`")));
        }
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, to_string(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    parse(&std::fs::read_to_string(path)?)
}
