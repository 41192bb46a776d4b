//! Dataset files.
//!
//! ```text
//! #unity-dataset v1 d_feat=<n>
//! <id>\t<features>\t<source ids>\t<text ids>\t<unit ids>
//! ```
//!
//! Features are the `T × d_feat` matrix in row-major order; every list is
//! space-separated. Floats are written in shortest round-trip form, so a
//! dataset survives a write/read cycle bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::Example;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &str = "#unity-dataset";

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, x) in xs.into_iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x}").unwrap();
    }
    s
}

pub fn write_dataset_to<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    let d_feat = examples.first().map_or(0, |e| e.features.cols());
    writeln!(w, "{MAGIC} v{DATASET_VERSION} d_feat={d_feat}")?;
    for e in examples {
        if e.features.cols() != d_feat {
            return Err(Error::Format(format!("{}: feature width {} != {d_feat}", e.id, e.features.cols())));
        }
        if e.id.contains(['\t', '\n']) {
            return Err(Error::Format(format!("id {:?} contains a separator", e.id)));
        }
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            e.id,
            join(e.features.data()),
            join(&e.source),
            join(&e.text),
            join(&e.units)
        )?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_dataset_to(&mut f, examples)?;
    f.flush()?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<Vec<T>> {
    field
        .split_ascii_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("line {line}: bad {what} value {t:?}"))))
        .collect()
}

pub fn read_dataset_from<R: Read>(r: R) -> Result<Vec<Example>> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::Format("missing dataset header".into()));
    }
    let version = parts.next().unwrap_or_default();
    if version != format!("v{DATASET_VERSION}") {
        return Err(Error::Format(format!("unsupported dataset version {version:?}")));
    }
    let d_feat: usize = parts
        .next()
        .and_then(|p| p.strip_prefix("d_feat="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("header lacks d_feat".into()))?;

    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!("line {lineno}: expected 5 fields, got {}", fields.len())));
        }
        let feats: Vec<f64> = parse_list(fields[1], lineno, "feature")?;
        if d_feat == 0 || feats.is_empty() || !feats.len().is_multiple_of(d_feat) {
            return Err(Error::Format(format!(
                "line {lineno}: {} feature values do not form rows of {d_feat}",
                feats.len()
            )));
        }
        out.push(Example {
            id: fields[0].to_string(),
            features: Tensor::matrix(feats.len() / d_feat, d_feat, feats)?,
            source: parse_list(fields[2], lineno, "source id")?,
            text: parse_list(fields[3], lineno, "text id")?,
            units: parse_list(fields[4], lineno, "unit id")?,
            spectrogram: None,
        });
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    read_dataset_from(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_header_and_rows() {
        assert!(read_dataset_from("nope\n".as_bytes()).is_err());
        assert!(read_dataset_from("#unity-dataset v9 d_feat=2\n".as_bytes()).is_err());
        let bad = "#unity-dataset v1 d_feat=2\na\t1 2 3\t3\t3\t2\n";
        assert!(matches!(read_dataset_from(bad.as_bytes()), Err(Error::Format(_))));
        let ok = "#unity-dataset v1 d_feat=2\na\t1 2 3 4\t3\t4\t2 5\n";
        let ds = read_dataset_from(ok.as_bytes()).unwrap();
        assert_eq!(ds[0].features.shape(), &[2, 2]);
        assert_eq!(ds[0].units, vec![2, 5]);
    }
}
