//! Dense row-major matrices over `f64` and `Complex64`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(CMat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CMat { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column(v: &[Complex64]) -> Self {
        CMat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn conj(&self) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn scale(&self, s: Complex64) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F / max(‖other‖_F, tiny)`.
    pub fn rel_frobenius_dist(&self, other: &CMat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        diff / other.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    /// Sub-matrix copy `[r0, r0+rows) × [c0, c0+cols)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> CMat {
        CMat::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)])
    }

    /// `blocks` copies of `self` along the diagonal.
    pub fn block_diag(&self, blocks: usize) -> CMat {
        let mut out = CMat::zeros(self.rows * blocks, self.cols * blocks);
        for b in 0..blocks {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out[(b * self.rows + r, b * self.cols + c)] = self[(r, c)];
                }
            }
        }
        out
    }

    /// `diag(e^{jθ}) · self`.
    pub fn phase_rows(&self, theta: &[f64]) -> CMat {
        assert_eq!(theta.len(), self.rows);
        let mut out = self.clone();
        for (r, t) in theta.iter().enumerate() {
            let w = Complex64::from_polar(1.0, *t);
            for z in &mut out.data[r * self.cols..(r + 1) * self.cols] {
                *z *= w;
            }
        }
        out
    }

    /// `self · diag(e^{jθ})`.
    pub fn phase_cols(&self, theta: &[f64]) -> CMat {
        assert_eq!(theta.len(), self.cols);
        let w: Vec<Complex64> = theta.iter().map(|t| Complex64::from_polar(1.0, *t)).collect();
        let mut out = self.clone();
        for r in 0..self.rows {
            for (z, w) in out.data[r * self.cols..(r + 1) * self.cols].iter_mut().zip(&w) {
                *z *= w;
            }
        }
        out
    }

    pub fn add(&self, other: &CMat) -> Result<CMat> {
        if self.shape() != other.shape() {
            return Err(Error::config(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = Complex64;
    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Exact complex product `a · b`.
pub fn cmatmul(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.cols != b.rows {
        return Err(Error::config(format!(
            "cmatmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = CMat::zeros(a.rows, b.cols);
    matmul_into(a, b, &mut out);
    Ok(out)
}

fn matmul_into(a: &CMat, b: &CMat, out: &mut CMat) {
    let n = b.cols;
    for r in 0..a.rows {
        let orow = &mut out.data[r * n..(r + 1) * n];
        for k in 0..a.cols {
            let av = a.data[r * a.cols + k];
            if av.re == 0.0 && av.im == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `blockdiag(a, …, a) · b` with `blocks` copies of `a`, without materialising the zeros.
pub fn block_matmul(a: &CMat, b: &CMat, blocks: usize) -> Result<CMat> {
    if a.cols * blocks != b.rows {
        return Err(Error::config(format!(
            "block matmul: {blocks} blocks of {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = CMat::zeros(a.rows * blocks, b.cols);
    for blk in 0..blocks {
        let bb = b.block(blk * a.cols, 0, a.cols, b.cols);
        let mut ob = CMat::zeros(a.rows, b.cols);
        matmul_into(a, &bb, &mut ob);
        let n = b.cols;
        out.data[blk * a.rows * n..(blk + 1) * a.rows * n].copy_from_slice(&ob.data);
    }
    Ok(out)
}

/// Dense real matrix, row-major. Batches are stored one sample per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RMat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(RMat { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        RMat {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `[c0, c0+n)` of every row.
    pub fn col_slice(&self, c0: usize, n: usize) -> RMat {
        let mut out = RMat::zeros(self.rows, n);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c0 + n]);
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for RMat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for RMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}
