//! On-disk formats.
//!
//! Checkpoint layout (all text lines end in `\n`):
//!
//! ```text
//! AUTOFIS-CHECKPOINT
//! version 1
//! fingerprint 3f9a0c1d2e4b5a69
//! config_hash 0b7e...
//! meta step 1200
//! tensor embedding 960 120,8
//! tensor bias 1 1
//! end
//! <f64 little-endian values of every tensor, in header order>
//! <32-byte SHA-256 of every preceding byte>
//! ```
//!
//! Interaction manifest:
//!
//! ```text
//! autofis-manifest v1
//! fingerprint 3f9a0c1d2e4b5a69
//! coverage pair
//! stage search
//! seed 7
//! config_hash 0b7e...
//! ids 15
//! 0,1<TAB>1<TAB>0.8123
//! 0,2<TAB>0<TAB>0.0
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{Dataset, FieldSchema, Instance, Order, Reduce};
use crate::error::{Error, Result};
use crate::ingest::{parse_raw, FieldHint, FieldKind};
use crate::interaction::{canonical_ids, ArchitectureParams, Coverage, GateSet};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "AUTOFIS-CHECKPOINT";
const MANIFEST_HEADER: &str = "autofis-manifest v1";
const SCHEMA_HEADER: &str = "#autofis-schema v1";

fn temp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Writes `bytes` to a temp file beside `path`, syncs it, then renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// A named, shaped `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned container of tensors and metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorRecord>,
}

fn check_word(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(char::is_whitespace) {
        return Err(Error::InvalidInput(format!("{kind} `{s}` must be a non-empty word")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        self.tensors.push(TensorRecord {
            name: name.into(),
            shape,
            values,
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Corrupt(format!("checkpoint `{key}` is malformed")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\n");
        check_word("fingerprint", &self.fingerprint)?;
        check_word("config hash", &self.config_hash)?;
        let _ = writeln!(head, "fingerprint {}", self.fingerprint);
        let _ = writeln!(head, "config_hash {}", self.config_hash);
        for (k, v) in &self.meta {
            check_word("meta key", k)?;
            check_word("meta value", v)?;
            let _ = writeln!(head, "meta {k} {v}");
        }
        for t in &self.tensors {
            check_word("tensor name", &t.name)?;
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::Shape(format!(
                    "tensor `{}` shape disagrees with its length",
                    t.name
                )));
            }
            let shape: Vec<String> = t.shape.iter().map(ToString::to_string).collect();
            let _ = writeln!(head, "tensor {} {} {}", t.name, t.values.len(), shape.join(","));
        }
        head.push_str("end\n");
        let mut bytes = head.into_bytes();
        for t in &self.tensors {
            for v in &t.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(digest.as_slice());
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::Corrupt("checkpoint is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
        }
        let end =
            find_subslice(body, b"\nend\n").ok_or_else(|| Error::Corrupt("checkpoint header unterminated".into()))?;
        let head =
            std::str::from_utf8(&body[..end]).map_err(|_| Error::Corrupt("checkpoint header is not UTF-8".into()))?;
        let mut data = &body[end + 5..];
        let mut lines = head.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Corrupt("not a checkpoint".into()));
        }
        match lines.next().and_then(|l| l.strip_prefix("version ")) {
            Some(v) if v == CHECKPOINT_VERSION.to_string() => {}
            Some(v) => {
                return Err(Error::Version {
                    expected: CHECKPOINT_VERSION,
                    found: v.to_string(),
                })
            }
            None => return Err(Error::Corrupt("checkpoint lacks a version".into())),
        }
        let mut ck = Checkpoint::default();
        let mut specs: Vec<(String, usize, Vec<usize>)> = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts[..] {
                ["fingerprint", v] => ck.fingerprint = v.to_string(),
                ["config_hash", v] => ck.config_hash = v.to_string(),
                ["meta", k, v] => {
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, len, shape] => {
                    let len: usize = len
                        .parse()
                        .map_err(|_| Error::Corrupt(format!("bad length for `{name}`")))?;
                    let shape = shape
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Corrupt(format!("bad shape for `{name}`")))?;
                    specs.push((name.to_string(), len, shape));
                }
                _ => return Err(Error::Corrupt(format!("unexpected header line `{line}`"))),
            }
        }
        for (name, len, shape) in specs {
            let need = len * 8;
            if data.len() < need {
                return Err(Error::Corrupt(format!("tensor `{name}` is truncated")));
            }
            let values = data[..need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[need..];
            ck.push(name, shape, values);
        }
        if !data.is_empty() {
            return Err(Error::Corrupt("trailing bytes after tensor data".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Selected interactions with their gates and α, transferable between heads.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionManifest {
    pub fingerprint: String,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub alpha: ArchitectureParams,
    pub gates: GateSet,
}

impl InteractionManifest {
    pub fn new(
        schema: &FieldSchema,
        alpha: ArchitectureParams,
        gates: GateSet,
        stage: &str,
        seed: u64,
        config_hash: &str,
    ) -> Result<Self> {
        if alpha.field_count() != schema.field_count() {
            return Err(Error::Shape("α does not cover the schema's fields".into()));
        }
        if gates.ids() != alpha.ids() {
            return Err(Error::Shape("gates and α cover different interactions".into()));
        }
        check_word("stage", stage)?;
        check_word("config hash", config_hash)?;
        Ok(Self {
            fingerprint: schema.fingerprint(),
            stage: stage.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            alpha,
            gates,
        })
    }

    pub fn coverage(&self) -> Coverage {
        self.alpha.coverage()
    }

    /// Fails unless the manifest was produced for `schema`.
    pub fn check_schema(&self, schema: &FieldSchema) -> Result<()> {
        let fp = schema.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: fp,
                found: self.fingerprint.clone(),
            });
        }
        if self.alpha.field_count() != schema.field_count() {
            return Err(Error::Shape("manifest covers a different field count".into()));
        }
        Ok(())
    }

    pub fn kept_fraction(&self, order: Order) -> f64 {
        self.gates.kept_fraction(order)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MANIFEST_HEADER}");
        let _ = writeln!(out, "fingerprint {}", self.fingerprint);
        let _ = writeln!(out, "coverage {}", self.coverage());
        let _ = writeln!(out, "stage {}", self.stage);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "config_hash {}", self.config_hash);
        let _ = writeln!(out, "ids {}", self.alpha.ids().len());
        for ((id, a), g) in self.alpha.ids().iter().zip(self.alpha.values()).zip(self.gates.flags()) {
            let _ = writeln!(out, "{id}\t{}\t{a:?}", u8::from(*g));
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |key: &str| -> Result<(usize, String)> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::parse(source, 0, format!("missing `{key}` line")))?;
            let value = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| Error::parse(source, n + 1, format!("expected `{key} <value>`")))?;
            Ok((n + 1, value.to_string()))
        };
        let (_, version) = next("autofis-manifest")?;
        if version != "v1" {
            return Err(Error::Version {
                expected: 1,
                found: version,
            });
        }
        let (_, fingerprint) = next("fingerprint")?;
        let (n, coverage) = next("coverage")?;
        let coverage: Coverage = coverage.parse().map_err(|_| Error::parse(source, n, "bad coverage"))?;
        let (_, stage) = next("stage")?;
        let (n, seed) = next("seed")?;
        let seed: u64 = seed.parse().map_err(|_| Error::parse(source, n, "bad seed"))?;
        let (_, config_hash) = next("config_hash")?;
        let (n, count) = next("ids")?;
        let count: usize = count.parse().map_err(|_| Error::parse(source, n, "bad id count"))?;
        let mut ids = Vec::with_capacity(count);
        let mut alpha = Vec::with_capacity(count);
        let mut open = Vec::with_capacity(count);
        for (n, line) in lines {
            let parts: Vec<&str> = line.split('\t').collect();
            let [id, gate, a] = parts[..] else {
                return Err(Error::parse(source, n + 1, "expected id<TAB>gate<TAB>alpha"));
            };
            ids.push(id.parse().map_err(|_| Error::parse(source, n + 1, "bad id"))?);
            open.push(match gate {
                "0" => false,
                "1" => true,
                _ => return Err(Error::parse(source, n + 1, "gate must be 0 or 1")),
            });
            alpha.push(a.parse::<f64>().map_err(|_| Error::parse(source, n + 1, "bad alpha"))?);
        }
        if ids.len() != count {
            return Err(Error::Corrupt(format!(
                "manifest lists {} ids, header says {count}",
                ids.len()
            )));
        }
        let alpha = ArchitectureParams::new(ids.clone(), alpha)?;
        if alpha.coverage() != coverage || canonical_ids(alpha.field_count(), coverage) != ids {
            return Err(Error::Corrupt("manifest ids disagree with its coverage".into()));
        }
        let gates = GateSet::new(ids, open)?;
        Ok(Self {
            fingerprint,
            stage,
            seed,
            config_hash,
            alpha,
            gates,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}

/// `name<TAB>cardinality<TAB>one-hot|multi-hot` per field after a header
/// and a `reduce` line.
pub fn schema_to_text(schema: &FieldSchema) -> String {
    let mut out = format!("{SCHEMA_HEADER}\nreduce\t{}\n", schema.reduce());
    for i in 0..schema.field_count() {
        let kind = if schema.is_multi_hot(i) { "multi-hot" } else { "one-hot" };
        let _ = writeln!(out, "{}\t{}\t{kind}", schema.name(i), schema.cardinality(i));
    }
    out
}

pub fn schema_from_text(text: &str, source: &str) -> Result<FieldSchema> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, SCHEMA_HEADER)) => {}
        Some((_, other)) => {
            return Err(Error::Version {
                expected: 1,
                found: other.to_string(),
            })
        }
        None => return Err(Error::parse(source, 1, "empty schema file")),
    }
    let reduce: Reduce = match lines.next() {
        Some((_, l)) => l
            .strip_prefix("reduce\t")
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::parse(source, 2, "expected reduce line"))?,
        None => return Err(Error::parse(source, 2, "missing reduce line")),
    };
    let (mut names, mut cards, mut multi) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in lines {
        let parts: Vec<&str> = line.split('\t').collect();
        let [name, card, kind] = parts[..] else {
            return Err(Error::parse(source, n + 1, "expected name<TAB>cardinality<TAB>kind"));
        };
        names.push(name.to_string());
        cards.push(
            card.parse()
                .map_err(|_| Error::parse(source, n + 1, "bad cardinality"))?,
        );
        multi.push(match kind {
            "one-hot" => false,
            "multi-hot" => true,
            _ => return Err(Error::parse(source, n + 1, "kind must be one-hot or multi-hot")),
        });
    }
    FieldSchema::with_names(names, cards, multi, reduce)
}

/// Encoded rows in the raw grammar with feature indices as tokens.
pub fn dataset_to_text(data: &Dataset) -> String {
    let schema = data.schema();
    let mut out = String::new();
    for inst in data.iter() {
        let _ = write!(out, "{}", inst.label());
        for i in 0..schema.field_count() {
            let idx: Vec<String> = inst.field(i).iter().map(ToString::to_string).collect();
            let _ = write!(out, "\t{}:{}", schema.name(i), idx.join(","));
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_text(text: &str, source: &str, schema: &FieldSchema) -> Result<Dataset> {
    let hints: Vec<FieldHint> = (0..schema.field_count())
        .map(|i| FieldHint {
            name: schema.name(i).to_string(),
            kind: if schema.is_multi_hot(i) {
                FieldKind::MultiHot
            } else {
                FieldKind::OneHot
            },
            buckets: None,
        })
        .collect();
    let rows = parse_raw(text, source, &hints)?;
    let mut data = Dataset::new(schema.clone());
    for (n, row) in rows.into_iter().enumerate() {
        let fields = row
            .fields
            .iter()
            .map(|toks| {
                toks.iter()
                    .map(|t| {
                        t.parse::<u32>()
                            .map_err(|_| Error::parse(source, n + 1, format!("index `{t}` is not a number")))
                    })
                    .collect::<Result<Vec<u32>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        data.push(&Instance::new(fields, row.label)?)?;
    }
    Ok(data)
}

pub fn save_dataset(dir: &Path, stem: &str, data: &Dataset) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}.tsv")), dataset_to_text(data).as_bytes())
}

pub fn load_dataset(path: &Path, schema: &FieldSchema) -> Result<Dataset> {
    dataset_from_text(&std::fs::read_to_string(path)?, &path.display().to_string(), schema)
}

pub fn load_schema(path: &Path) -> Result<FieldSchema> {
    schema_from_text(&std::fs::read_to_string(path)?, &path.display().to_string())
}
