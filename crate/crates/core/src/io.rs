//! Text dataset format and JSONL helpers.
//!
//! A dataset file starts with a header line
//! `ssa-dataset d=<dim> C=<classes> A=<attrs> role=<role>` followed by one
//! tab-separated record per line: the features (17 significant digits),
//! then `y`, then the attribute for labeled and pseudo-labeled roles, then
//! the producing fold for the pseudo-labeled role.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::datagen::Sample;
use crate::error::{invalid, Result, SsaError};
use crate::model::fmt_f64;
use crate::pseudolabel::PseudoLabeled;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Labeled,
    Unlabeled,
    PseudoLabeled,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Labeled => "labeled",
            Role::Unlabeled => "unlabeled",
            Role::PseudoLabeled => "pseudolabeled",
        }
    }
}

impl FromStr for Role {
    type Err = SsaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Role::Labeled),
            "unlabeled" => Ok(Role::Unlabeled),
            "pseudolabeled" => Ok(Role::PseudoLabeled),
            other => Err(invalid(format!("unknown dataset role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub dim: usize,
    pub n_classes: usize,
    pub n_attrs: usize,
    pub role: Role,
}

impl Header {
    fn line(&self) -> String {
        format!(
            "ssa-dataset d={} C={} A={} role={}",
            self.dim,
            self.n_classes,
            self.n_attrs,
            self.role.as_str()
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let err = |msg: String| SsaError::Parse { line: 1, msg };
        let mut parts = line.split_whitespace();
        if parts.next() != Some("ssa-dataset") {
            return Err(err("missing `ssa-dataset` header".into()));
        }
        let (mut dim, mut c, mut a, mut role) = (None, None, None, None);
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| err(format!("bad header field `{kv}`")))?;
            let num = || v.parse::<usize>().map_err(|_| err(format!("bad value in `{kv}`")));
            match k {
                "d" => dim = Some(num()?),
                "C" => c = Some(num()?),
                "A" => a = Some(num()?),
                "role" => role = Some(v.parse::<Role>().map_err(|e| err(e.to_string()))?),
                _ => return Err(err(format!("unknown header field `{k}`"))),
            }
        }
        match (dim, c, a, role) {
            (Some(dim), Some(n_classes), Some(n_attrs), Some(role)) => Ok(Header {
                dim,
                n_classes,
                n_attrs,
                role,
            }),
            _ => Err(err("header needs d, C, A and role".into())),
        }
    }
}

fn push_features(out: &mut String, x: &[f64]) {
    for v in x {
        out.push_str(&fmt_f64(*v));
        out.push('\t');
    }
}

/// Serialize samples. Labeled role requires every sample to carry `a`;
/// unlabeled role drops it.
pub fn format_samples(header: Header, samples: &[Sample]) -> Result<String> {
    if header.role == Role::PseudoLabeled {
        return Err(invalid("use format_pseudo_labeled for the pseudolabeled role"));
    }
    let mut out = header.line();
    out.push('\n');
    for (i, s) in samples.iter().enumerate() {
        if s.x.len() != header.dim {
            return Err(SsaError::DimensionMismatch {
                expected: header.dim,
                got: s.x.len(),
            });
        }
        push_features(&mut out, &s.x);
        match header.role {
            Role::Labeled => {
                let a = s.a.ok_or(SsaError::MissingAttribute(i))?;
                let _ = writeln!(out, "{}\t{}", s.y, a);
            }
            _ => {
                let _ = writeln!(out, "{}", s.y);
            }
        }
    }
    Ok(out)
}

pub fn format_pseudo_labeled(dim: usize, n_classes: usize, n_attrs: usize, records: &[PseudoLabeled]) -> String {
    let header = Header {
        dim,
        n_classes,
        n_attrs,
        role: Role::PseudoLabeled,
    };
    let mut out = header.line();
    out.push('\n');
    for r in records {
        push_features(&mut out, &r.x);
        let _ = writeln!(out, "{}\t{}\t{}", r.y, r.pseudo_attr, r.fold);
    }
    out
}

/// Parsed dataset file. For the pseudo-labeled role `a` holds the pseudo
/// attribute and `folds` the producing fold of each record.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub header: Header,
    pub samples: Vec<Sample>,
    pub folds: Vec<usize>,
}

pub fn parse_dataset(text: &str) -> Result<DatasetFile> {
    let mut lines = text.lines();
    let header = Header::parse(lines.next().ok_or(SsaError::EmptyInput("dataset file"))?)?;
    let extra = match header.role {
        Role::Labeled => 2,
        Role::Unlabeled => 1,
        Role::PseudoLabeled => 3,
    };
    let mut samples = Vec::new();
    let mut folds = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| SsaError::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.dim + extra {
            return Err(err(format!(
                "expected {} fields, found {}",
                header.dim + extra,
                fields.len()
            )));
        }
        let x = fields[..header.dim]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        let int = |f: &str, limit: usize, what: &str| -> Result<usize> {
            let v = f.parse::<usize>().map_err(|_| err(format!("bad {what} `{f}`")))?;
            if v >= limit {
                return Err(err(format!("{what} {v} out of range (limit {limit})")));
            }
            Ok(v)
        };
        let y = int(fields[header.dim], header.n_classes, "label")?;
        let a = match header.role {
            Role::Unlabeled => None,
            _ => Some(int(fields[header.dim + 1], header.n_attrs, "attribute")?),
        };
        if header.role == Role::PseudoLabeled {
            folds.push(int(fields[header.dim + 2], usize::MAX, "fold")?);
        }
        samples.push(Sample { x, y, a });
    }
    Ok(DatasetFile { header, samples, folds })
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    parse_dataset(&fs::read_to_string(path)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// One compact JSON object per line.
pub fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(to_jsonl(records).as_bytes())?;
    w.flush()?;
    Ok(())
}
