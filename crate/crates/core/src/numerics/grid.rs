//! Dense row-major 2-D array of `f64`, the numeric carrier for every
//! probability table, cost matrix, hidden-state sequence and parameter.
//!
//! Binary layout (`write_binary` / `read_binary`), all little-endian:
//!
//! | bytes | content                      |
//! |-------|------------------------------|
//! | 4     | magic `VGR1`                 |
//! | 8     | rows (`u64`)                 |
//! | 8     | cols (`u64`)                 |
//! | 8·n   | `rows × cols` `f64` values   |

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"VGR1";

#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ValueGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut g = Self::zeros(n, n);
        for i in 0..n {
            g[(i, i)] = 1.0;
        }
        g
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "ValueGrid data",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a grid from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!("row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Copies rows `start..end` into a new grid.
    pub fn slice_rows(&self, start: usize, end: usize) -> ValueGrid {
        ValueGrid {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies columns `start..end` into a new grid.
    pub fn slice_cols(&self, start: usize, end: usize) -> ValueGrid {
        ValueGrid::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    /// `[self | other]` along the column axis.
    pub fn hconcat(&self, other: &ValueGrid) -> Result<ValueGrid> {
        if self.rows != other.rows {
            return Err(Error::shape("hconcat rows", self.rows, other.rows));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(ValueGrid {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn transpose(&self) -> ValueGrid {
        ValueGrid::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    fn check_same_shape(&self, other: &ValueGrid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                what,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &ValueGrid) -> Result<ValueGrid> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul inner dimension",
                self.cols,
                other.rows,
            ));
        }
        let mut out = ValueGrid::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &ValueGrid) -> Result<ValueGrid> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t inner dimension", self.cols, other.cols));
        }
        let mut out = ValueGrid::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &ValueGrid) -> Result<ValueGrid> {
        if self.rows != other.rows {
            return Err(Error::shape("t_matmul inner dimension", self.rows, other.rows));
        }
        let mut out = ValueGrid::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &ValueGrid) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, other: &ValueGrid, alpha: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ValueGrid {
        let mut g = self.clone();
        g.scale(alpha);
        g
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ValueGrid {
        ValueGrid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &ValueGrid) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Errors on the first non-finite entry, naming its coordinates.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(k) => Err(Error::NonFinite {
                what: what.to_string(),
                row: k / self.cols.max(1),
                col: k % self.cols.max(1),
            }),
        }
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.binary_len());
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn binary_len(&self) -> usize {
        4 + 16 + 8 * self.data.len()
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::format("ValueGrid binary", "bad magic bytes"));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format("ValueGrid binary", "rows × cols overflows"))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Ok(Self { rows, cols, data })
    }

    /// One line per row, comma separated, shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows_iter() {
            for (j, x) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x:?}");
            }
            out.push('\n');
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for ValueGrid {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ValueGrid {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = ValueGrid::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = ValueGrid::from_rows(&[[1.0, 0.5], [-1.0, 2.0], [0.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.as_slice(), &[-1.0, 7.5, -1.0, 18.0]);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
    }

    #[test]
    fn shape_errors() {
        let a = ValueGrid::zeros(2, 3);
        assert!(a.matmul(&ValueGrid::zeros(2, 3)).is_err());
        assert!(ValueGrid::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(a.clone().add_assign(&ValueGrid::zeros(3, 2)).is_err());
    }

    #[test]
    fn binary_roundtrip_and_layout() {
        let g = ValueGrid::from_rows(&[[1.5, -2.0], [f64::MIN_POSITIVE, 1e300]]).unwrap();
        let bytes = g.to_binary();
        assert_eq!(&bytes[..4], b"VGR1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), g.binary_len());
        assert_eq!(ValueGrid::read_binary(&bytes[..]).unwrap(), g);
        assert!(ValueGrid::read_binary(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn csv_export() {
        let g = ValueGrid::from_rows(&[[1.0, 0.25], [-3.0, 1e-20]]).unwrap();
        assert_eq!(g.to_csv(), "1.0,0.25\n-3.0,1e-20\n");
    }

    #[test]
    fn ensure_finite_reports_coordinates() {
        let mut g = ValueGrid::zeros(3, 4);
        g[(2, 1)] = f64::NAN;
        match g.ensure_finite("x") {
            Err(Error::NonFinite { row, col, .. }) => assert_eq!((row, col), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
