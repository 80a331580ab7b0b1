use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// A single column.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col_to_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
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
}

/// Row-sparse gradient for a table of `width`-wide rows. Rows that were
/// never touched are absent, not zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    width: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `row += scale * values`.
    #[inline]
    pub fn add_scaled(&mut self, row: usize, values: &[f64], scale: f64) {
        debug_assert_eq!(values.len(), self.width);
        let width = self.width;
        let slot = self.rows.entry(row).or_insert_with(|| vec![0.0; width]);
        for (s, v) in slot.iter_mut().zip(values) {
            *s += scale * v;
        }
    }

    #[inline]
    pub fn add_scalar(&mut self, row: usize, value: f64) {
        debug_assert_eq!(self.width, 1);
        *self
            .rows
            .entry(row)
            .or_insert_with(|| vec![0.0])
            .first_mut()
            .expect("width 1") += value;
    }

    /// Adds `other` into `self`, row by row in ascending row order.
    pub fn merge(&mut self, other: SparseRows) {
        for (row, vals) in other.rows {
            match self.rows.get_mut(&row) {
                Some(slot) => {
                    for (s, v) in slot.iter_mut().zip(&vals) {
                        *s += v;
                    }
                }
                None => {
                    self.rows.insert(row, vals);
                }
            }
        }
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&r, v)| (r, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_dense(&self, total_rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; total_rows * self.width];
        for (r, v) in self.iter() {
            out[r * self.width..(r + 1) * self.width].copy_from_slice(v);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.rows.values_mut() {
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }
}
