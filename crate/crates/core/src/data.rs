//! Site datasets: an outcome paired with a covariate vector per row.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Borrowed view of one observation.
#[derive(Debug, Clone, Copy)]
pub struct Obs<'a> {
    pub y: f64,
    pub z: &'a [f64],
}

/// Rows stored column-major by role: outcomes in one vector, covariates
/// flattened row-major with stride `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    label: String,
    p: usize,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl Dataset {
    pub fn new(label: impl Into<String>, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Data("covariate dimension must be at least 1".into()));
        }
        Ok(Self {
            label: label.into(),
            p,
            y: Vec::new(),
            z: Vec::new(),
        })
    }

    pub fn from_rows(label: impl Into<String>, rows: &[(f64, Vec<f64>)]) -> Result<Self> {
        let p = rows
            .first()
            .map(|r| r.1.len())
            .ok_or_else(|| Error::Data("dataset has no rows".into()))?;
        let mut ds = Self::new(label, p)?;
        for (y, z) in rows {
            ds.push(*y, z)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, y: f64, z: &[f64]) -> Result<()> {
        if z.len() != self.p {
            return Err(Error::Data(format!(
                "row {} has {} covariates, expected {}",
                self.y.len() + 1,
                z.len(),
                self.p
            )));
        }
        self.y.push(y);
        self.z.extend_from_slice(z);
        Ok(())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Covariate dimension.
    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    pub fn row(&self, i: usize) -> Obs<'_> {
        Obs {
            y: self.y[i],
            z: self.z(i),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = Obs<'_>> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    /// Linear scores `zᵢᵀβ` for every row.
    pub fn linear_scores(&self, beta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(beta.len(), self.p);
        self.z
            .chunks_exact(self.p)
            .map(|z| z.iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Dataset with rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self {
            label: self.label.clone(),
            p: self.p,
            y: Vec::with_capacity(self.len()),
            z: Vec::with_capacity(self.z.len()),
        };
        for &i in perm {
            out.y.push(self.y[i]);
            out.z.extend_from_slice(self.z(i));
        }
        out
    }

    /// Reads a CSV with header `y,z1,...,zp`.
    pub fn read_csv<R: Read>(label: impl Into<String>, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
            .clone();
        if headers.len() < 2 || headers.get(0).map(str::trim) != Some("y") {
            return Err(Error::Data(
                "header must start with `y` followed by covariate columns".into(),
            ));
        }
        for (j, h) in headers.iter().enumerate().skip(1) {
            if h.trim() != format!("z{j}") {
                return Err(Error::Data(format!(
                    "header column {} is `{h}`, expected `z{j}`",
                    j + 1
                )));
            }
        }
        let p = headers.len() - 1;
        let mut ds = Self::new(label, p)?;
        let mut z = vec![0.0; p];
        for (idx, rec) in rdr.records().enumerate() {
            // header is line 1
            let line = idx + 2;
            let rec = rec.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
            if rec.len() != p + 1 {
                return Err(Error::Data(format!(
                    "row {line}: expected {} fields, found {}",
                    p + 1,
                    rec.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                let v: f64 = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("row {line}: `{s}` is not a number")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Data(format!("row {line}: non-finite value `{s}`")))
                }
            };
            let y = parse(&rec[0])?;
            for j in 0..p {
                z[j] = parse(&rec[j + 1])?;
            }
            ds.push(y, &z)?;
        }
        if ds.is_empty() {
            return Err(Error::Data("dataset has no rows".into()));
        }
        Ok(ds)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "site".into());
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::read_csv(label, file)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.p).map(|j| format!("z{j}")));
        let to_err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(&header).map_err(to_err)?;
        for obs in self.rows() {
            let mut rec = vec![obs.y.to_string()];
            rec.extend(obs.z.iter().map(f64::to_string));
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
