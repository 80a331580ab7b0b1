//! Multi-field categorical data layout.
//!
//! A [`FieldSchema`] fixes the number of fields and the vocabulary size of
//! each. Instances carry the active feature indices of every field (one index
//! for one-hot fields, one or more for multi-hot fields) plus a binary label.
//! A [`Dataset`] stores many instances in a compact CSR layout and hands out
//! [`MiniBatch`] views over row subsets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How the embeddings of a multi-hot field are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    #[default]
    Sum,
    Average,
}

impl fmt::Display for Reduce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduce::Sum => "sum",
            Reduce::Average => "average",
        })
    }
}

impl FromStr for Reduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduce::Sum),
            "average" | "avg" | "mean" => Ok(Reduce::Average),
            other => Err(Error::InvalidInput(format!("unknown reduce mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    names: Vec<String>,
    cardinalities: Vec<usize>,
    multi_hot: Vec<bool>,
    reduce: Reduce,
    offsets: Vec<usize>,
}

impl FieldSchema {
    pub fn new(cardinalities: Vec<usize>, multi_hot: Vec<bool>, reduce: Reduce) -> Result<Self> {
        let names = (0..cardinalities.len()).map(|i| format!("f{i}")).collect();
        Self::with_names(names, cardinalities, multi_hot, reduce)
    }

    /// All fields one-hot.
    pub fn one_hot(cardinalities: Vec<usize>) -> Result<Self> {
        let m = cardinalities.len();
        Self::new(cardinalities, vec![false; m], Reduce::Sum)
    }

    pub fn with_names(
        names: Vec<String>,
        cardinalities: Vec<usize>,
        multi_hot: Vec<bool>,
        reduce: Reduce,
    ) -> Result<Self> {
        let m = cardinalities.len();
        if m < 2 {
            return Err(Error::Schema(format!("need at least 2 fields, got {m}")));
        }
        if multi_hot.len() != m || names.len() != m {
            return Err(Error::Schema(format!(
                "field lists disagree: {m} cardinalities, {} multi-hot flags, {} names",
                multi_hot.len(),
                names.len()
            )));
        }
        if let Some(i) = cardinalities.iter().position(|&n| n == 0) {
            return Err(Error::Schema(format!("field {i} has cardinality 0")));
        }
        if m > u16::MAX as usize {
            return Err(Error::Schema(format!("too many fields: {m}")));
        }
        let mut offsets = Vec::with_capacity(m + 1);
        let mut acc = 0;
        for &n in &cardinalities {
            offsets.push(acc);
            acc += n;
        }
        offsets.push(acc);
        Ok(Self {
            names,
            cardinalities,
            multi_hot,
            reduce,
            offsets,
        })
    }

    pub fn field_count(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinality(&self, field: usize) -> usize {
        self.cardinalities[field]
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn is_multi_hot(&self, field: usize) -> bool {
        self.multi_hot[field]
    }

    pub fn multi_hot_flags(&self) -> &[bool] {
        &self.multi_hot
    }

    pub fn reduce(&self) -> Reduce {
        self.reduce
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, field: usize) -> &str {
        &self.names[field]
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Row of a (field, local index) pair in the global feature space where
    /// all fields are laid out back to back.
    #[inline]
    pub fn global_index(&self, field: usize, local: u32) -> usize {
        self.offsets[field] + local as usize
    }

    pub fn field_offset(&self, field: usize) -> usize {
        self.offsets[field]
    }

    pub fn total_features(&self) -> usize {
        self.offsets[self.cardinalities.len()]
    }

    pub fn interactions(&self, order: Order) -> Vec<InteractionId> {
        enumerate_interactions(self.field_count(), order)
    }

    /// Stable identity of the layout: field count, cardinalities, multi-hot
    /// flags and reduce mode. Field names are not part of it.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"autofis-schema-v1;");
        for (n, mh) in self.cardinalities.iter().zip(&self.multi_hot) {
            hasher.update(format!("{n}:{};", u8::from(*mh)).as_bytes());
        }
        hasher.update(self.reduce.to_string().as_bytes());
        hex_prefix(&hasher.finalize(), 16)
    }

    pub fn validate(&self, instance: &Instance) -> Result<()> {
        self.validate_fields(instance.fields.iter().map(Vec::as_slice))
    }

    fn validate_fields<'a>(&self, fields: impl ExactSizeIterator<Item = &'a [u32]>) -> Result<()> {
        if fields.len() != self.field_count() {
            return Err(Error::Instance(format!(
                "expected {} fields, got {}",
                self.field_count(),
                fields.len()
            )));
        }
        for (i, idx) in fields.enumerate() {
            if idx.is_empty() {
                return Err(Error::Instance(format!("field {i} has no active index")));
            }
            if !self.multi_hot[i] && idx.len() != 1 {
                return Err(Error::Instance(format!(
                    "one-hot field {i} carries {} indices",
                    idx.len()
                )));
            }
            if let Some(&bad) = idx.iter().find(|&&j| j as usize >= self.cardinalities[i]) {
                return Err(Error::Instance(format!(
                    "index {bad} out of range for field {i} (cardinality {})",
                    self.cardinalities[i]
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s.truncate(chars);
    s
}

/// One training example: the active indices of each field and a binary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub fields: Vec<Vec<u32>>,
    pub label: u8,
}

impl Instance {
    pub fn new(fields: Vec<Vec<u32>>, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::Instance(format!("label must be 0 or 1, got {label}")));
        }
        Ok(Self { fields, label })
    }

    pub fn one_hot(indices: &[u32], label: u8) -> Result<Self> {
        Self::new(indices.iter().map(|&j| vec![j]).collect(), label)
    }
}

/// Borrowed view of one row of a [`Dataset`].
#[derive(Debug, Clone, Copy)]
pub struct InstanceRef<'a> {
    data: &'a Dataset,
    row: usize,
}

impl<'a> InstanceRef<'a> {
    pub fn field_count(&self) -> usize {
        self.data.schema.field_count()
    }

    #[inline]
    pub fn field(&self, field: usize) -> &'a [u32] {
        let m = self.data.schema.field_count();
        let k = self.row * m + field;
        let lo = self.data.field_ptr[k] as usize;
        let hi = self.data.field_ptr[k + 1] as usize;
        &self.data.indices[lo..hi]
    }

    pub fn label(&self) -> u8 {
        self.data.labels[self.row]
    }

    pub fn to_owned(&self) -> Instance {
        Instance {
            fields: (0..self.data.schema.field_count())
                .map(|i| self.field(i).to_vec())
                .collect(),
            label: self.label(),
        }
    }
}

/// Validated instances sharing one schema, stored as a CSR layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: FieldSchema,
    labels: Vec<u8>,
    field_ptr: Vec<u32>,
    indices: Vec<u32>,
}

impl Dataset {
    pub fn new(schema: FieldSchema) -> Self {
        Self {
            schema,
            labels: Vec::new(),
            field_ptr: vec![0],
            indices: Vec::new(),
        }
    }

    pub fn from_instances(schema: FieldSchema, instances: impl IntoIterator<Item = Instance>) -> Result<Self> {
        let mut ds = Self::new(schema);
        for inst in instances {
            ds.push(&inst)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, instance: &Instance) -> Result<()> {
        self.schema.validate(instance)?;
        if instance.label > 1 {
            return Err(Error::Instance(format!("label must be 0 or 1, got {}", instance.label)));
        }
        for f in &instance.fields {
            self.indices.extend_from_slice(f);
            self.field_ptr.push(self.indices.len() as u32);
        }
        self.labels.push(instance.label);
        Ok(())
    }

    /// Appends a one-hot row without allocating an [`Instance`].
    pub fn push_one_hot(&mut self, indices: &[u32], label: u8) -> Result<()> {
        self.schema.validate_fields(indices.iter().map(std::slice::from_ref))?;
        if label > 1 {
            return Err(Error::Instance(format!("label must be 0 or 1, got {label}")));
        }
        for &j in indices {
            self.indices.push(j);
            self.field_ptr.push(self.indices.len() as u32);
        }
        self.labels.push(label);
        Ok(())
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize) -> InstanceRef<'_> {
        assert!(row < self.len(), "row {row} out of range ({} rows)", self.len());
        InstanceRef { data: self, row }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = InstanceRef<'_>> + '_ {
        (0..self.len()).map(move |row| InstanceRef { data: self, row })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Copies the selected rows (in the given order) into a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.schema.clone());
        let m = self.schema.field_count();
        for &r in rows {
            let inst = self.get(r);
            for i in 0..m {
                out.indices.extend_from_slice(inst.field(i));
                out.field_ptr.push(out.indices.len() as u32);
            }
            out.labels.push(self.labels[r]);
        }
        out
    }

    pub fn batch<'a>(&'a self, rows: &'a [usize]) -> MiniBatch<'a> {
        MiniBatch { data: self, rows }
    }
}

/// A set of rows of a dataset processed together in one step.
#[derive(Debug, Clone, Copy)]
pub struct MiniBatch<'a> {
    data: &'a Dataset,
    rows: &'a [usize],
}

impl<'a> MiniBatch<'a> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn schema(&self) -> &'a FieldSchema {
        &self.data.schema
    }

    pub fn rows(&self) -> &'a [usize] {
        self.rows
    }

    #[inline]
    pub fn instance(&self, b: usize) -> InstanceRef<'a> {
        self.data.get(self.rows[b])
    }

    pub fn label(&self, b: usize) -> u8 {
        self.data.labels[self.rows[b]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    Pair,
    Triple,
}

impl Order {
    pub fn arity(self) -> usize {
        match self {
            Order::Pair => 2,
            Order::Triple => 3,
        }
    }
}

/// A pair `(i, j)` or triple `(i, j, t)` of strictly increasing field indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct InteractionId {
    order: Order,
    idx: [u16; 3],
}

impl InteractionId {
    pub fn pair(i: usize, j: usize) -> Result<Self> {
        Self::from_fields(&[i, j])
    }

    pub fn triple(i: usize, j: usize, t: usize) -> Result<Self> {
        Self::from_fields(&[i, j, t])
    }

    pub fn from_fields(fields: &[usize]) -> Result<Self> {
        let order = match fields.len() {
            2 => Order::Pair,
            3 => Order::Triple,
            n => return Err(Error::InvalidInput(format!("interaction of arity {n}"))),
        };
        if fields.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "interaction field indices must be strictly increasing: {fields:?}"
            )));
        }
        if fields.iter().any(|&f| f > u16::MAX as usize) {
            return Err(Error::InvalidInput(format!("field index too large: {fields:?}")));
        }
        let mut idx = [0u16; 3];
        for (slot, &f) in idx.iter_mut().zip(fields) {
            *slot = f as u16;
        }
        Ok(Self { order, idx })
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn fields(&self) -> impl Iterator<Item = usize> + '_ {
        self.idx[..self.order.arity()].iter().map(|&f| f as usize)
    }

    pub fn field(&self, k: usize) -> usize {
        assert!(k < self.order.arity());
        self.idx[k] as usize
    }

    /// Largest field index referenced.
    pub fn max_field(&self) -> usize {
        self.idx[self.order.arity() - 1] as usize
    }
}

impl fmt::Display for InteractionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.order {
            Order::Pair => write!(f, "{},{}", self.idx[0], self.idx[1]),
            Order::Triple => write!(f, "{},{},{}", self.idx[0], self.idx[1], self.idx[2]),
        }
    }
}

impl FromStr for InteractionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let fields = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidInput(format!("bad interaction id `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_fields(&fields)
    }
}

impl From<InteractionId> for String {
    fn from(id: InteractionId) -> Self {
        id.to_string()
    }
}

impl TryFrom<String> for InteractionId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// All interactions of the given order among `field_count` fields, in
/// lexicographic order. This order is the canonical index of every α vector.
pub fn enumerate_interactions(field_count: usize, order: Order) -> Vec<InteractionId> {
    let m = field_count;
    let mut out = Vec::new();
    match order {
        Order::Pair => {
            for i in 0..m {
                for j in i + 1..m {
                    out.push(InteractionId {
                        order,
                        idx: [i as u16, j as u16, 0],
                    });
                }
            }
        }
        Order::Triple => {
            for i in 0..m {
                for j in i + 1..m {
                    for t in j + 1..m {
                        out.push(InteractionId {
                            order,
                            idx: [i as u16, j as u16, t as u16],
                        });
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&[usize]]) -> Vec<InteractionId> {
        v.iter().map(|f| InteractionId::from_fields(f).unwrap()).collect()
    }

    #[test]
    fn pairs_of_three_fields() {
        assert_eq!(
            enumerate_interactions(3, Order::Pair),
            ids(&[&[0, 1], &[0, 2], &[1, 2]])
        );
    }

    #[test]
    fn six_fields_give_fifteen_pairs() {
        assert_eq!(enumerate_interactions(6, Order::Pair).len(), 15);
    }

    #[test]
    fn triples_of_four_fields() {
        assert_eq!(
            enumerate_interactions(4, Order::Triple),
            ids(&[&[0, 1, 2], &[0, 1, 3], &[0, 2, 3], &[1, 2, 3]])
        );
    }

    #[test]
    fn interaction_id_round_trips_through_text() {
        for id in enumerate_interactions(5, Order::Triple) {
            assert_eq!(id.to_string().parse::<InteractionId>().unwrap(), id);
        }
        assert!("2,1".parse::<InteractionId>().is_err());
        assert!("1,1".parse::<InteractionId>().is_err());
        assert!("1".parse::<InteractionId>().is_err());
    }

    #[test]
    fn schema_rejects_bad_layouts() {
        assert!(FieldSchema::one_hot(vec![3]).is_err());
        assert!(FieldSchema::one_hot(vec![3, 0]).is_err());
        assert!(FieldSchema::new(vec![3, 3], vec![false], Reduce::Sum).is_err());
    }

    #[test]
    fn instance_validation() {
        let schema = FieldSchema::new(vec![3, 4], vec![false, true], Reduce::Sum).unwrap();
        let ok = Instance::new(vec![vec![2], vec![0, 3]], 1).unwrap();
        schema.validate(&ok).unwrap();
        let two_on_one_hot = Instance::new(vec![vec![0, 1], vec![0]], 0).unwrap();
        assert!(schema.validate(&two_on_one_hot).is_err());
        let out_of_range = Instance::new(vec![vec![3], vec![0]], 0).unwrap();
        assert!(schema.validate(&out_of_range).is_err());
        let short = Instance::new(vec![vec![0]], 0).unwrap();
        assert!(schema.validate(&short).is_err());
        assert!(Instance::new(vec![vec![0], vec![0]], 2).is_err());
    }

    #[test]
    fn dataset_csr_layout() {
        let schema = FieldSchema::new(vec![3, 4], vec![false, true], Reduce::Sum).unwrap();
        let mut ds = Dataset::new(schema);
        ds.push(&Instance::new(vec![vec![2], vec![0, 3]], 1).unwrap()).unwrap();
        ds.push(&Instance::new(vec![vec![1], vec![2]], 0).unwrap()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.get(0).field(1), &[0, 3]);
        assert_eq!(ds.get(1).field(0), &[1]);
        assert_eq!(ds.get(1).label(), 0);
        let sub = ds.subset(&[1, 0]);
        assert_eq!(sub.get(0).to_owned(), ds.get(1).to_owned());
        assert_eq!(ds.schema().global_index(1, 2), 5);
    }

    #[test]
    fn fingerprint_tracks_layout_only() {
        let a = FieldSchema::one_hot(vec![3, 4]).unwrap();
        let b = FieldSchema::with_names(
            vec!["x".into(), "y".into()],
            vec![3, 4],
            vec![false, false],
            Reduce::Sum,
        )
        .unwrap();
        let c = FieldSchema::one_hot(vec![4, 3]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pair_count_is_m_choose_2(m in 2usize..=32) {
                let ids = enumerate_interactions(m, Order::Pair);
                prop_assert_eq!(ids.len(), m * (m - 1) / 2);
                let mut sorted = ids.clone();
                sorted.sort();
                sorted.dedup();
                prop_assert_eq!(&sorted, &ids);
                prop_assert_eq!(enumerate_interactions(m, Order::Pair), ids);
            }
        }
    }
}
