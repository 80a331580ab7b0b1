//! Per-field embedding tables and their sparse gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{FieldSchema, Instance, InstanceRef, Reduce};
use crate::error::{Error, Result};
use crate::tensor::SparseRows;

/// Anything that exposes the active indices of each field.
pub trait FieldIndices {
    fn field_count(&self) -> usize;
    fn field(&self, field: usize) -> &[u32];
}

impl FieldIndices for Instance {
    fn field_count(&self) -> usize {
        self.fields.len()
    }

    fn field(&self, field: usize) -> &[u32] {
        &self.fields[field]
    }
}

impl FieldIndices for InstanceRef<'_> {
    fn field_count(&self) -> usize {
        InstanceRef::field_count(self)
    }

    fn field(&self, field: usize) -> &[u32] {
        InstanceRef::field(self, field)
    }
}

/// One `n_i x d` matrix per field, stored back to back in the global feature
/// order of the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    schema: FieldSchema,
    weights: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(schema: &FieldSchema, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        Ok(Self {
            dim,
            schema: schema.clone(),
            weights: vec![0.0; schema.total_features() * dim],
        })
    }

    /// Entries drawn from `Normal(0, 1/d)`.
    pub fn random<R: Rng + ?Sized>(schema: &FieldSchema, dim: usize, rng: &mut R) -> Result<Self> {
        let mut table = Self::zeros(schema, dim)?;
        let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std");
        for w in &mut table.weights {
            *w = normal.sample(rng);
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn rows(&self) -> usize {
        self.schema.total_features()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn row(&self, global: usize) -> &[f64] {
        &self.weights[global * self.dim..(global + 1) * self.dim]
    }

    pub fn row_mut(&mut self, global: usize) -> &mut [f64] {
        &mut self.weights[global * self.dim..(global + 1) * self.dim]
    }

    /// Row `local` of field `field`'s matrix.
    pub fn field_row(&self, field: usize, local: u32) -> &[f64] {
        self.row(self.schema.global_index(field, local))
    }

    fn check_indices(&self, field: usize, idx: &[u32]) -> Result<()> {
        let n = self.schema.cardinality(field);
        if idx.is_empty() {
            return Err(Error::Instance(format!("field {field} has no active index")));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j as usize >= n) {
            return Err(Error::Instance(format!(
                "index {bad} out of range for field {field} (cardinality {n})"
            )));
        }
        Ok(())
    }

    fn check_instance<I: FieldIndices + ?Sized>(&self, instance: &I) -> Result<()> {
        let m = self.schema.field_count();
        let count = instance.field_count();
        if count != m {
            return Err(Error::Instance(format!("expected {m} fields, got {count}")));
        }
        Ok(())
    }

    /// Writes `e_1..e_m` (each `d` long) into `out`, which must hold `m * d`
    /// values.
    pub fn embed_into<I: FieldIndices + ?Sized>(&self, instance: &I, reduce: Reduce, out: &mut [f64]) -> Result<()> {
        self.check_instance(instance)?;
        let d = self.dim;
        let m = self.schema.field_count();
        if out.len() != m * d {
            return Err(Error::Shape(format!(
                "embedding output holds {} values, need {}",
                out.len(),
                m * d
            )));
        }
        for (i, e) in out.chunks_mut(d).enumerate() {
            let idx = instance.field(i);
            self.check_indices(i, idx)?;
            if idx.len() == 1 {
                e.copy_from_slice(self.field_row(i, idx[0]));
                continue;
            }
            e.fill(0.0);
            for &j in idx {
                for (acc, v) in e.iter_mut().zip(self.field_row(i, j)) {
                    *acc += v;
                }
            }
            if reduce == Reduce::Average {
                let k = idx.len() as f64;
                for acc in e.iter_mut() {
                    *acc /= k;
                }
            }
        }
        Ok(())
    }

    pub fn embed<I: FieldIndices + ?Sized>(&self, instance: &I, reduce: Reduce) -> Result<EmbeddedInstance> {
        let mut data = vec![0.0; self.schema.field_count() * self.dim];
        self.embed_into(instance, reduce, &mut data)?;
        Ok(EmbeddedInstance { dim: self.dim, data })
    }

    /// Scatters upstream gradients `dL/de_i` (`m * d` values) onto the rows
    /// that produced them. AVERAGE fields split the gradient evenly over
    /// their `k` active rows; untouched rows get no entry.
    pub fn accumulate_grad<I: FieldIndices + ?Sized>(
        &self,
        instance: &I,
        upstream: &[f64],
        reduce: Reduce,
        out: &mut SparseRows,
    ) {
        let d = self.dim;
        for (i, g) in upstream.chunks(d).enumerate() {
            let idx = instance.field(i);
            let scale = if idx.len() > 1 && reduce == Reduce::Average {
                1.0 / idx.len() as f64
            } else {
                1.0
            };
            for &j in idx {
                out.add_scaled(self.schema.global_index(i, j), g, scale);
            }
        }
    }
}

/// The embedding layer output `E = [e_1, ..., e_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedInstance {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddedInstance {
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("embedded vectors must share a nonzero length".into()));
        }
        Ok(Self {
            dim,
            data: vectors.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn field_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn vector(&self, field: usize) -> &[f64] {
        &self.data[field * self.dim..(field + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Free-function form of [`EmbeddingTable::embed`].
pub fn embed<I: FieldIndices + ?Sized>(
    instance: &I,
    table: &EmbeddingTable,
    reduce: Reduce,
) -> Result<EmbeddedInstance> {
    table.embed(instance, reduce)
}

/// Free-function form of [`EmbeddingTable::accumulate_grad`].
pub fn accumulate_embed_grad<I: FieldIndices + ?Sized>(
    table: &EmbeddingTable,
    instance: &I,
    upstream: &[f64],
    reduce: Reduce,
) -> SparseRows {
    let mut out = SparseRows::new(table.dim());
    table.accumulate_grad(instance, upstream, reduce, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn table() -> EmbeddingTable {
        let schema = FieldSchema::new(vec![4, 3], vec![false, true], Reduce::Sum).unwrap();
        let mut t = EmbeddingTable::zeros(&schema, 2).unwrap();
        for (k, w) in t.weights_mut().iter_mut().enumerate() {
            *w = k as f64 * 0.5 - 1.0;
        }
        t
    }

    #[test]
    fn one_hot_lookup_is_the_row() {
        let t = table();
        let inst = Instance::new(vec![vec![2], vec![1]], 1).unwrap();
        let e = t.embed(&inst, Reduce::Sum).unwrap();
        assert_eq!(e.vector(0), t.field_row(0, 2));
        assert_eq!(e.vector(1), t.field_row(1, 1));
    }

    #[test]
    fn multi_hot_average_and_sum() {
        let t = table();
        let inst = Instance::new(vec![vec![0], vec![0, 1]], 1).unwrap();
        let avg = t.embed(&inst, Reduce::Average).unwrap();
        let (r0, r1) = (t.field_row(1, 0), t.field_row(1, 1));
        for k in 0..2 {
            assert_eq!(avg.vector(1)[k], (r0[k] + r1[k]) / 2.0);
        }

        let inst3 = Instance::new(vec![vec![0], vec![0, 1, 2]], 1).unwrap();
        let sum = t.embed(&inst3, Reduce::Sum).unwrap();
        let mut oracle = [0.0; 2];
        for j in 0..3 {
            for k in 0..2 {
                oracle[k] += t.field_row(1, j)[k];
            }
        }
        assert_eq!(sum.vector(1), &oracle);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let t = table();
        let inst = Instance::new(vec![vec![4], vec![0]], 0).unwrap();
        assert!(t.embed(&inst, Reduce::Sum).is_err());
    }

    #[test]
    fn one_hot_gradient_goes_to_one_row() {
        let t = table();
        let inst = Instance::new(vec![vec![3], vec![2]], 0).unwrap();
        let g = accumulate_embed_grad(&t, &inst, &[1.0, 2.0, 3.0, 4.0], Reduce::Sum);
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(3), Some(&[1.0, 2.0][..]));
        assert_eq!(g.get(4 + 2), Some(&[3.0, 4.0][..]));
    }

    #[test]
    fn average_splits_gradient() {
        let t = table();
        let inst = Instance::new(vec![vec![0], vec![0, 2]], 0).unwrap();
        let g = accumulate_embed_grad(&t, &inst, &[0.0, 0.0, 2.0, 4.0], Reduce::Average);
        assert_eq!(g.get(4), Some(&[1.0, 2.0][..]));
        assert_eq!(g.get(6), Some(&[1.0, 2.0][..]));
        assert_eq!(g.get(5), None);
    }

    /// Central differences of `L = <c, embed(x)>` with respect to every table
    /// entry, for each reduce mode.
    #[test]
    fn gradient_matches_finite_differences() {
        let schema = FieldSchema::new(vec![3, 4, 2], vec![false, true, true], Reduce::Sum).unwrap();
        let mut rng = substream(11, Stream::Init);
        for reduce in [Reduce::Sum, Reduce::Average] {
            let mut t = EmbeddingTable::random(&schema, 3, &mut rng).unwrap();
            let inst = Instance::new(vec![vec![1], vec![0, 3, 2], vec![1]], 1).unwrap();
            let c: Vec<f64> = (0..9).map(|k| (k as f64 * 0.37).sin()).collect();
            let loss = |t: &EmbeddingTable| {
                let e = t.embed(&inst, reduce).unwrap();
                e.as_slice().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
            };
            let g = accumulate_embed_grad(&t, &inst, &c, reduce).to_dense(t.rows());
            let h = 1e-5;
            for k in 0..t.weights().len() {
                let orig = t.weights()[k];
                t.weights_mut()[k] = orig + h;
                let up = loss(&t);
                t.weights_mut()[k] = orig - h;
                let down = loss(&t);
                t.weights_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let denom = numeric.abs().max(g[k].abs()).max(1e-6);
                assert!(
                    (numeric - g[k]).abs() / denom < 1e-4,
                    "entry {k}: {numeric} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn init_scale_is_one_over_d() {
        let schema = FieldSchema::one_hot(vec![500, 500]).unwrap();
        let mut rng = substream(3, Stream::Init);
        let t = EmbeddingTable::random(&schema, 16, &mut rng).unwrap();
        let n = t.weights().len() as f64;
        let var = t.weights().iter().map(|w| w * w).sum::<f64>() / n;
        assert!((var - 1.0 / 16.0).abs() < 0.005, "{var}");
    }
}
