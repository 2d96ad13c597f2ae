use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// A finite set of points in `R^d`, read as the empirical measure
/// `(1/n) sum_i delta_{x_i}`.
///
/// Rows are stored contiguously so that [`ParticleEnsemble::row`] can hand out
/// plain slices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    points: Array2<f64>,
}

impl ParticleEnsemble {
    /// Wraps an `n x d` array. Rejects empty ensembles and non-finite rows.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::arg(
                "ensemble needs at least one point of dimension >= 1",
            ));
        }
        if let Some(i) = points
            .rows()
            .into_iter()
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::non_finite("ensemble row", i));
        }
        let points = if points.is_standard_layout() {
            points
        } else {
            points.as_standard_layout().into_owned()
        };
        Ok(Self { points })
    }

    pub fn from_flat(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        let points = Array2::from_shape_vec((n, d), data)
            .map_err(|e| Error::arg(format!("ensemble shape: {e}")))?;
        Self::new(points)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut flat = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::arg(format!(
                    "row {i} has dimension {}, expected {d}",
                    r.len()
                )));
            }
            flat.extend_from_slice(r);
        }
        Self::from_flat(rows.len(), d, flat)
    }

    /// One-dimensional ensemble from scalar samples.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_flat(values.len(), 1, values.to_vec())
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.as_slice()[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.as_slice().chunks_exact(self.dim())
    }

    pub fn as_slice(&self) -> &[f64] {
        self.points
            .as_slice()
            .expect("ensemble storage is always standard layout")
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.points
    }

    /// Ensemble made of the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut flat = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("row index {i} out of range")));
            }
            flat.extend_from_slice(self.row(i));
        }
        Self::from_flat(indices.len(), d, flat)
    }

    /// Per-coordinate sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim()];
        for r in self.rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Per-coordinate unbiased sample variance (zero for a single point).
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.len();
        let mut var = vec![0.0; self.dim()];
        for r in self.rows() {
            for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let denom = n.saturating_sub(1).max(1) as f64;
        var.iter_mut().for_each(|v| *v /= denom);
        var
    }

    /// Writes one row per point. With `header`, the first line is
    /// `x0,x1,...,x{d-1}`.
    pub fn write_csv<W: Write>(&self, writer: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        if header {
            w.write_record((0..self.dim()).map(|k| format!("x{k}")))?;
        }
        for r in self.rows() {
            w.write_record(r.iter().map(|v| format_float(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads comma-separated rows. A leading line whose first field does not
    /// parse as a number is treated as a header and skipped.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut flat = Vec::new();
        let mut d = None;
        let mut n = 0;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if line == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
                continue;
            }
            let width = *d.get_or_insert(rec.len());
            if rec.len() != width {
                return Err(Error::arg(format!(
                    "csv line {} has {} fields, expected {width}",
                    line + 1,
                    rec.len()
                )));
            }
            for field in rec.iter() {
                let v = field
                    .parse::<f64>()
                    .map_err(|e| Error::arg(format!("csv line {}: `{field}`: {e}", line + 1)))?;
                flat.push(v);
            }
            n += 1;
        }
        Self::from_flat(n, d.unwrap_or(0), flat)
    }
}

/// Shortest round-trip representation of a float.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(ParticleEnsemble::from_flat(0, 2, vec![]).is_err());
        let err = ParticleEnsemble::from_rows(&[[0.0, 1.0], [f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn csv_header_is_optional() {
        let e = ParticleEnsemble::from_rows(&[[0.5, -1.0], [2.0, 3.25]]).unwrap();
        for header in [false, true] {
            let mut buf = Vec::new();
            e.write_csv(&mut buf, header).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert_eq!(text.starts_with("x0,x1\n"), header);
            assert_eq!(ParticleEnsemble::read_csv(buf.as_slice()).unwrap(), e);
        }
    }

    #[test]
    fn ragged_csv_is_rejected() {
        assert!(ParticleEnsemble::read_csv("1,2\n3\n".as_bytes()).is_err());
    }
}
