//! Plain-text serialization of a [`ConicProgram`] for offline inspection.
//!
//! ```text
//! conic-program 1
//! n <vars> m <rows> nnz <entries>
//! c <v0> <v1> ...
//! b <v0> <v1> ...
//! cones <kind>:<dim> ...        kind ∈ {zero, nonneg, soc}
//! <row> <col> <value>           one line per entry
//! ```
//! Floats are written with round-trip precision.

use std::fmt::Write as _;
use std::path::Path;

use super::{Cone, ConicProgram, Triplets};
use crate::error::{Error, Result};

const HEADER: &str = "conic-program 1";

pub fn format_program(p: &ConicProgram) -> String {
    let mut out = String::new();
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "n {} m {} nnz {}", p.n_vars(), p.n_rows(), p.a.entries.len());
    let _ = writeln!(out, "c {}", join(&p.c));
    let _ = writeln!(out, "b {}", join(&p.b));
    let cones: Vec<String> = p
        .cones
        .iter()
        .map(|c| match c {
            Cone::Zero(d) => format!("zero:{d}"),
            Cone::Nonneg(d) => format!("nonneg:{d}"),
            Cone::Soc(d) => format!("soc:{d}"),
        })
        .collect();
    let _ = writeln!(out, "cones {}", cones.join(" "));
    for &(r, c, v) in &p.a.entries {
        let _ = writeln!(out, "{r} {c} {v:e}");
    }
    out
}

pub fn parse_program(text: &str) -> std::result::Result<ConicProgram, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(format!("missing header `{HEADER}`"));
    }
    let dims: Vec<&str> = lines.next().ok_or("missing size line")?.split_whitespace().collect();
    let (n, m, nnz) = match dims.as_slice() {
        ["n", n, "m", m, "nnz", k] => (parse::<usize>(n)?, parse::<usize>(m)?, parse::<usize>(k)?),
        _ => return Err("malformed size line".into()),
    };
    let vector = |line: Option<&str>, tag: &str, len: usize| -> std::result::Result<Vec<f64>, String> {
        let mut it = line.ok_or(format!("missing `{tag}` line"))?.split_whitespace();
        if it.next() != Some(tag) {
            return Err(format!("expected `{tag}` line"));
        }
        let v = it.map(parse::<f64>).collect::<std::result::Result<Vec<_>, _>>()?;
        if v.len() != len {
            return Err(format!("`{tag}` has {} entries, expected {len}", v.len()));
        }
        Ok(v)
    };
    let c = vector(lines.next(), "c", n)?;
    let b = vector(lines.next(), "b", m)?;
    let mut it = lines.next().ok_or("missing `cones` line")?.split_whitespace();
    if it.next() != Some("cones") {
        return Err("expected `cones` line".into());
    }
    let cones = it
        .map(|tok| {
            let (kind, d) = tok.split_once(':').ok_or(format!("bad cone `{tok}`"))?;
            let d = parse::<usize>(d)?;
            match kind {
                "zero" => Ok(Cone::Zero(d)),
                "nonneg" => Ok(Cone::Nonneg(d)),
                "soc" => Ok(Cone::Soc(d)),
                _ => Err(format!("unknown cone kind `{kind}`")),
            }
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    let mut a = Triplets::new(m, n);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [r, col, v] = f.as_slice() else {
            return Err(format!("malformed entry `{line}`"));
        };
        a.entries.push((parse(r)?, parse(col)?, parse(v)?));
    }
    if a.entries.len() != nnz {
        return Err(format!("found {} entries, header says {nnz}", a.entries.len()));
    }
    Ok(ConicProgram { c, a, b, cones })
}

fn parse<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}`"))
}

pub fn write_program(path: &Path, p: &ConicProgram) -> Result<()> {
    std::fs::write(path, format_program(p)).map_err(|e| Error::io(path, e))
}

pub fn read_program(path: &Path) -> Result<ConicProgram> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p = parse_program(&text).map_err(|message| Error::Parse {
        path: path.display().to_string(),
        message,
    })?;
    p.validate()?;
    Ok(p)
}
