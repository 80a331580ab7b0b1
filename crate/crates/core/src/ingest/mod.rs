//! Raw tabular logs to encoded datasets, plus the synthetic generator.
//!
//! Raw files hold one instance per line:
//!
//! ```text
//! 1<TAB>site:news<TAB>tags:sports,local<TAB>hour:13
//! ```
//!
//! The first column is the label; every further column is `field:token`
//! with multi-hot tokens separated by commas. TAB, `:` and `,` are
//! reserved inside tokens.

pub mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FieldSchema, Instance, Reduce};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub use synthetic::{generate_synthetic, SyntheticOptions, SyntheticSpec};

pub const DEFAULT_MIN_COUNT: usize = 20;

/// Token reserved for the per-field dummy "other" feature.
pub const DUMMY_TOKEN: &str = "<OTHER>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    OneHot,
    MultiHot,
    /// A real-valued column turned categorical by quantile bucketing.
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHint {
    pub name: String,
    pub kind: FieldKind,
    /// Bucket count for numeric fields.
    #[serde(default)]
    pub buckets: Option<usize>,
}

/// One parsed line, with tokens ordered like the field hints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRow {
    pub label: u8,
    pub fields: Vec<Vec<String>>,
}

fn check_token(tok: &str) -> std::result::Result<(), String> {
    if tok.is_empty() {
        return Err("empty token".into());
    }
    if tok.contains(['\t', ':', ',']) {
        return Err(format!("token `{tok}` contains a reserved character"));
    }
    Ok(())
}

/// Parses raw rows. Every line must carry each hinted field exactly once;
/// blank lines are skipped.
pub fn parse_raw(text: &str, source: &str, hints: &[FieldHint]) -> Result<Vec<RawRow>> {
    let position: HashMap<&str, usize> = hints.iter().enumerate().map(|(k, h)| (h.name.as_str(), k)).collect();
    if position.len() != hints.len() {
        return Err(Error::Config("duplicate field names in hints".into()));
    }
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let label = match cols.next() {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::parse(
                    source,
                    lineno,
                    format!("label must be 0 or 1, got {other:?}"),
                ));
            }
        };
        let mut fields: Vec<Option<Vec<String>>> = vec![None; hints.len()];
        for col in cols {
            let (name, toks) = col
                .split_once(':')
                .ok_or_else(|| Error::parse(source, lineno, format!("column `{col}` is not field:tokens")))?;
            let &k = position
                .get(name)
                .ok_or_else(|| Error::parse(source, lineno, format!("unknown field `{name}`")))?;
            if fields[k].is_some() {
                return Err(Error::parse(source, lineno, format!("field `{name}` repeated")));
            }
            let mut tokens: Vec<String> = Vec::new();
            for tok in toks.split(',') {
                check_token(tok).map_err(|m| Error::parse(source, lineno, m))?;
                tokens.push(tok.to_string());
            }
            match hints[k].kind {
                FieldKind::OneHot | FieldKind::Numeric if tokens.len() != 1 => {
                    return Err(Error::parse(
                        source,
                        lineno,
                        format!("field `{name}` takes exactly one token"),
                    ));
                }
                FieldKind::Numeric => {
                    let v: f64 = tokens[0]
                        .parse()
                        .map_err(|_| Error::parse(source, lineno, format!("field `{name}` is not numeric")))?;
                    if !v.is_finite() {
                        return Err(Error::parse(source, lineno, format!("field `{name}` is not finite")));
                    }
                }
                _ => {}
            }
            fields[k] = Some(tokens);
        }
        let fields = fields
            .into_iter()
            .enumerate()
            .map(|(k, f)| f.ok_or_else(|| Error::parse(source, lineno, format!("missing field `{}`", hints[k].name))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(RawRow { label, fields });
    }
    Ok(rows)
}

pub fn read_raw(path: &Path, hints: &[FieldHint]) -> Result<Vec<RawRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_raw(&text, &path.display().to_string(), hints)
}

/// Token-to-index map of one field. Kept tokens take `0..len`; the dummy
/// index is `len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldVocab {
    pub name: String,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl FieldVocab {
    pub fn from_tokens(name: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (k, t) in tokens.iter().enumerate() {
            if t == DUMMY_TOKEN {
                return Err(Error::InvalidInput(format!("token {DUMMY_TOKEN} is reserved")));
            }
            if index.insert(t.clone(), k as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self {
            name: name.into(),
            tokens,
            index,
        })
    }

    pub fn dummy(&self) -> u32 {
        self.tokens.len() as u32
    }

    /// Kept tokens plus the dummy.
    pub fn cardinality(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(self.dummy())
    }

    /// The kept token at `index`, or [`DUMMY_TOKEN`] for the dummy.
    pub fn decode(&self, index: u32) -> Option<&str> {
        match index as usize {
            k if k < self.tokens.len() => Some(&self.tokens[k]),
            k if k == self.tokens.len() => Some(DUMMY_TOKEN),
            _ => None,
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabMap {
    pub min_count: usize,
    pub fields: Vec<FieldVocab>,
}

/// Counts tokens per field (once per row) and keeps those seen at least
/// `min_count` times, ordered by descending count then token bytes.
pub fn build_vocab(rows: &[RawRow], names: &[String], min_count: usize) -> Result<VocabMap> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("cannot build a vocabulary from no rows".into()));
    }
    let mut fields = Vec::with_capacity(names.len());
    for (f, name) in names.iter().enumerate() {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for row in rows {
            let toks = row
                .fields
                .get(f)
                .ok_or_else(|| Error::Shape(format!("row lacks field {f}")))?;
            let mut seen: Vec<&str> = toks.iter().map(String::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *counts.entry(t).or_default() += 1;
            }
        }
        if counts.contains_key(DUMMY_TOKEN) {
            return Err(Error::InvalidInput(format!(
                "field `{name}` uses the reserved token {DUMMY_TOKEN}"
            )));
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.as_bytes().cmp(b.0.as_bytes())));
        let tokens = kept.into_iter().map(|(t, _)| t.to_string()).collect();
        fields.push(FieldVocab::from_tokens(name.clone(), tokens)?);
    }
    Ok(VocabMap { min_count, fields })
}

impl VocabMap {
    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(FieldVocab::cardinality).collect()
    }

    /// Encodes a row; multi-hot indices are sorted and deduplicated.
    pub fn encode(&self, row: &RawRow) -> Result<Instance> {
        if row.fields.len() != self.fields.len() {
            return Err(Error::Shape(format!(
                "row has {} fields, vocabulary has {}",
                row.fields.len(),
                self.fields.len()
            )));
        }
        let fields = row
            .fields
            .iter()
            .zip(&self.fields)
            .map(|(toks, v)| {
                let mut idx: Vec<u32> = toks.iter().map(|t| v.encode(t)).collect();
                idx.sort_unstable();
                idx.dedup();
                idx
            })
            .collect();
        Instance::new(fields, row.label)
    }

    /// `field<TAB>token<TAB>index`, sorted by field then index.
    pub fn to_text(&self) -> String {
        let mut out = format!("#autofis-vocab v1\nmin_count\t{}\n", self.min_count);
        for v in &self.fields {
            for (k, t) in v.tokens.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}", v.name, t, k);
            }
            let _ = writeln!(out, "{}\t{}\t{}", v.name, DUMMY_TOKEN, v.dummy());
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "#autofis-vocab v1")) => {}
            Some((_, other)) => {
                return Err(Error::Version {
                    expected: 1,
                    found: other.to_string(),
                })
            }
            None => return Err(Error::parse(source, 1, "empty vocabulary file")),
        }
        let min_count = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("min_count\t")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(source, 2, "expected min_count line"))?,
            None => return Err(Error::parse(source, 2, "missing min_count")),
        };
        let mut fields: Vec<(String, Vec<String>, bool)> = Vec::new();
        for (n, line) in lines {
            let parts: Vec<&str> = line.split('\t').collect();
            let [name, tok, idx] = parts[..] else {
                return Err(Error::parse(source, n + 1, "expected field<TAB>token<TAB>index"));
            };
            let idx: usize = idx.parse().map_err(|_| Error::parse(source, n + 1, "bad index"))?;
            if fields.last().is_none_or(|f| f.0 != name) {
                if fields.iter().any(|f| f.0 == name) {
                    return Err(Error::parse(source, n + 1, format!("field `{name}` is not contiguous")));
                }
                fields.push((name.to_string(), Vec::new(), false));
            }
            let entry = fields.last_mut().expect("just pushed");
            if entry.2 {
                return Err(Error::parse(source, n + 1, "entry after the dummy token"));
            }
            if idx != entry.1.len() {
                return Err(Error::parse(source, n + 1, "indices must be contiguous from 0"));
            }
            if tok == DUMMY_TOKEN {
                entry.2 = true;
            } else {
                entry.1.push(tok.to_string());
            }
        }
        let fields = fields
            .into_iter()
            .map(|(name, toks, has_dummy)| {
                if !has_dummy {
                    return Err(Error::Corrupt(format!("field `{name}` has no dummy entry")));
                }
                FieldVocab::from_tokens(name, toks)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { min_count, fields })
    }
}

/// Upper bucket boundaries; a value equal to a boundary falls in the lower
/// bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct Buckets {
    pub boundaries: Vec<f64>,
}

impl Buckets {
    /// Equal-frequency boundaries at `sorted[ceil(k n / K) − 1]` for
    /// `k = 1..K`, deduplicated.
    pub fn fit(values: &[f64], bucket_count: usize) -> Result<Self> {
        if bucket_count < 2 {
            return Err(Error::Config("bucket_count must be at least 2".into()));
        }
        if values.is_empty() {
            return Err(Error::InvalidInput("cannot bucketize an empty column".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("numeric column holds a non-finite value".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut boundaries: Vec<f64> = Vec::new();
        for k in 1..bucket_count {
            let pos = (k * n).div_ceil(bucket_count).max(1) - 1;
            let b = sorted[pos];
            if b < sorted[n - 1] && boundaries.last() != Some(&b) {
                boundaries.push(b);
            }
        }
        if boundaries.is_empty() {
            log::warn!("numeric column is constant; using a single bucket");
        }
        Ok(Self { boundaries })
    }

    pub fn bucket_count(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn assign(&self, value: f64) -> u32 {
        self.boundaries.partition_point(|&b| b < value) as u32
    }
}

/// Fits quantile buckets on `values` and assigns each of them.
pub fn bucketize_numeric(values: &[f64], bucket_count: usize) -> Result<Vec<u32>> {
    let b = Buckets::fit(values, bucket_count)?;
    Ok(values.iter().map(|&v| b.assign(v)).collect())
}

/// Keep probability for negatives that brings the expected positive ratio
/// to `target`. `None` when the data is already at or above the target.
pub fn downsample_rate(positives: usize, negatives: usize, target: f64) -> Result<Option<f64>> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config("target positive ratio must lie in (0, 1)".into()));
    }
    if positives == 0 {
        return Err(Error::InvalidInput("down-sampling needs at least one positive".into()));
    }
    if negatives == 0 {
        return Ok(None);
    }
    let q = positives as f64 / negatives as f64 * (1.0 - target) / target;
    Ok((q < 1.0).then_some(q))
}

/// Rows kept by negative down-sampling: every positive, and each negative
/// with the probability from [`downsample_rate`].
pub fn downsample_rows(labels: &[u8], target: f64, seed: u64) -> Result<Vec<usize>> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let Some(q) = downsample_rate(pos, labels.len() - pos, target)? else {
        log::warn!(
            "positive ratio {:.4} already reaches {target}; keeping every row",
            pos as f64 / labels.len() as f64
        );
        return Ok((0..labels.len()).collect());
    };
    let mut rng = substream(seed, Stream::Downsample);
    Ok((0..labels.len())
        .filter(|&r| {
            let u: f64 = rng.random();
            labels[r] == 1 || u < q
        })
        .collect())
}

pub fn negative_downsample(data: &Dataset, target: f64, seed: u64) -> Result<Dataset> {
    let rows = downsample_rows(data.labels(), target, seed)?;
    Ok(data.subset(&rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub fields: Vec<FieldHint>,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    #[serde(default)]
    pub reduce: Reduce,
    /// Share of rows held out for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default)]
    pub target_positive_ratio: Option<f64>,
}

fn default_min_count() -> usize {
    DEFAULT_MIN_COUNT
}

fn default_holdout() -> f64 {
    0.2
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fields.len() < 2 {
            return Err(Error::Config("at least two fields are needed".into()));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config("holdout must lie in [0, 1)".into()));
        }
        for h in &self.fields {
            match (h.kind, h.buckets) {
                (FieldKind::Numeric, Some(b)) if b >= 2 => {}
                (FieldKind::Numeric, _) => {
                    return Err(Error::Config(format!("numeric field `{}` needs buckets >= 2", h.name)));
                }
                (_, Some(_)) => {
                    return Err(Error::Config(format!(
                        "field `{}` is not numeric; drop buckets",
                        h.name
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.fields.iter().map(|h| h.name.clone()).collect()
    }
}

/// Output of [`ingest`].
#[derive(Debug, Clone)]
pub struct Encoded {
    pub vocab: VocabMap,
    /// Fitted buckets of each numeric field.
    pub buckets: Vec<Option<Buckets>>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Down-samples (optional), splits off the holdout, fits buckets and the
/// vocabulary on the training rows only, and encodes both splits.
pub fn ingest(rows: Vec<RawRow>, config: &IngestConfig, seed: u64) -> Result<Encoded> {
    config.validate()?;
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let keep = match config.target_positive_ratio {
        Some(t) => downsample_rows(&labels, t, seed)?,
        None => (0..rows.len()).collect(),
    };
    let mut order = keep;
    order.shuffle(&mut substream(seed, Stream::Split));
    let n_test = (order.len() as f64 * config.holdout).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let mut rows = rows;
    let mut buckets = Vec::with_capacity(config.fields.len());
    for (f, hint) in config.fields.iter().enumerate() {
        if hint.kind != FieldKind::Numeric {
            buckets.push(None);
            continue;
        }
        let values: Vec<f64> = train_idx
            .iter()
            .map(|&r| rows[r].fields[f][0].parse::<f64>().expect("validated when parsed"))
            .collect();
        let b = Buckets::fit(&values, hint.buckets.expect("validated"))?;
        for row in rows.iter_mut() {
            let v: f64 = row.fields[f][0].parse().expect("validated when parsed");
            row.fields[f][0] = b.assign(v).to_string();
        }
        buckets.push(Some(b));
    }

    let train_rows: Vec<RawRow> = train_idx.iter().map(|&r| rows[r].clone()).collect();
    let vocab = build_vocab(&train_rows, &config.names(), config.min_count)?;
    let multi: Vec<bool> = config.fields.iter().map(|h| h.kind == FieldKind::MultiHot).collect();
    let schema = FieldSchema::with_names(config.names(), vocab.cardinalities(), multi, config.reduce)?;
    let mut train = Dataset::new(schema.clone());
    for row in &train_rows {
        train.push(&vocab.encode(row)?)?;
    }
    let mut test = Dataset::new(schema);
    for &r in &test_idx {
        test.push(&vocab.encode(&rows[r])?)?;
    }
    Ok(Encoded {
        vocab,
        buckets,
        train,
        test,
    })
}

/// `field<TAB>bucket<TAB>upper_boundary` for every numeric field; the last
/// bucket of each field has boundary `inf`.
pub fn buckets_to_text(names: &[String], buckets: &[Option<Buckets>]) -> String {
    let mut out = String::from("#autofis-buckets v1\n");
    for (name, b) in names.iter().zip(buckets) {
        if let Some(b) = b {
            for (k, v) in b.boundaries.iter().enumerate() {
                let _ = writeln!(out, "{name}\t{k}\t{v:?}");
            }
            let _ = writeln!(out, "{name}\t{}\tinf", b.boundaries.len());
        }
    }
    out
}
