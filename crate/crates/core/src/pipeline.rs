//! Search, gate extraction, retraining, the third-order extension and
//! manifest transfer.
//!
//! Every stage runs through a [`Trainer`], which owns the model, its
//! optimizer and a cursor into the epoch schedule. Shuffles are drawn per
//! epoch from their own substream, so a trainer restored from a checkpoint
//! continues exactly where the original left off.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::{DataSource, RunConfig};
use crate::data::{Dataset, FieldSchema, InteractionId, Order};
use crate::error::{Error, Result};
use crate::ingest::{self, Buckets, SyntheticSpec, VocabMap};
use crate::interaction::{canonical_ids, extract_gates, ArchitectureParams, Coverage, GateSet, LayerMode};
use crate::metrics::{self, histogram, Histogram, ScoredSet};
use crate::network::{Head, Model, ModelConfig};
use crate::optim::{joint_step, AdamConfig, AlphaRule, GrdaConfig, GrdaState, Moments, Optimizer};
use crate::par::Execution;
use crate::persistence::{self, Checkpoint, InteractionManifest};
use crate::rng::{indexed_substream, Stream};

pub const SEARCH: &str = "search";
pub const RETRAIN: &str = "retrain";
pub const PLAIN: &str = "plain";
pub const TRIPLE_SEARCH: &str = "third-order-search";
pub const TRIPLE_RETRAIN: &str = "third-order-retrain";
pub const TRANSFER: &str = "transfer";
pub const RANDOM_GATES: &str = "random-gates";

/// Init substream index of each stage; distinct stages draw distinct weights.
const INIT_SEARCH: u64 = 0;
const INIT_RETRAIN: u64 = 1;
const INIT_TRIPLE_SEARCH: u64 = 2;
const INIT_TRIPLE_RETRAIN: u64 = 3;
const INIT_TRANSFER: u64 = 4;

const HISTOGRAM_BINS: usize = 10;

/// Everything a [`Trainer`] needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub name: String,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub grda: GrdaConfig,
    pub pair_rule: AlphaRule,
    pub triple_rule: AlphaRule,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub per_epoch_eval: bool,
    pub seed: u64,
    /// Index of the init substream for fresh weights.
    pub init_index: u64,
    pub exec: Execution,
}

impl StagePlan {
    fn from_config(cfg: &RunConfig, name: &str, model: ModelConfig, init_index: u64) -> Self {
        let searching = model.pair_mode == LayerMode::Search || model.triple_mode == Some(LayerMode::Search);
        let (epochs, batch_size) = if searching {
            (cfg.search.epochs, cfg.search.batch_size)
        } else {
            (cfg.retrain.epochs, cfg.retrain.batch_size)
        };
        let rule = |mode: LayerMode| match mode {
            LayerMode::Search => AlphaRule::Grda,
            LayerMode::Retrain if cfg.retrain.alpha_trainable => AlphaRule::Adam,
            _ => AlphaRule::Frozen,
        };
        Self {
            name: name.to_string(),
            pair_rule: rule(model.pair_mode),
            triple_rule: model.triple_mode.map_or(AlphaRule::Frozen, rule),
            model,
            adam: cfg.adam,
            grda: cfg.grda,
            epochs,
            batch_size,
            eval_batch_size: cfg.eval.batch_size,
            per_epoch_eval: cfg.eval.per_epoch,
            seed: cfg.run.seed,
            init_index,
            exec: cfg.run.execution,
        }
    }

    /// Joint α and weight training with GRDA on the pair α.
    pub fn search(cfg: &RunConfig) -> Self {
        let model = ModelConfig {
            pair_mode: LayerMode::Search,
            triple_mode: None,
            ..cfg.model.clone()
        };
        Self::from_config(cfg, SEARCH, model, INIT_SEARCH)
    }

    /// Fresh weights under fixed gates, α trained by Adam or frozen.
    pub fn retrain(cfg: &RunConfig) -> Self {
        let model = ModelConfig {
            pair_mode: LayerMode::Retrain,
            triple_mode: None,
            interaction_bn: cfg.retrain.bn,
            ..cfg.model.clone()
        };
        Self::from_config(cfg, RETRAIN, model, INIT_RETRAIN)
    }

    /// The unrestricted model: every interaction with weight 1, no BN.
    pub fn plain(cfg: &RunConfig) -> Self {
        let model = ModelConfig {
            pair_mode: LayerMode::Plain,
            triple_mode: None,
            interaction_bn: false,
            ..cfg.model.clone()
        };
        Self::from_config(cfg, PLAIN, model, INIT_RETRAIN)
    }

    fn third_order_model(cfg: &RunConfig, pair_mode: LayerMode, triple_mode: LayerMode, bn: bool) -> ModelConfig {
        ModelConfig {
            head: if cfg.model.head == Head::Fm {
                Head::Fm3
            } else {
                cfg.model.head
            },
            pair_mode,
            triple_mode: Some(triple_mode),
            interaction_bn: bn,
            ..cfg.model.clone()
        }
    }

    /// Searches triples with GRDA while the pair α stay frozen.
    pub fn triple_search(cfg: &RunConfig) -> Self {
        let model = Self::third_order_model(cfg, LayerMode::Retrain, LayerMode::Search, cfg.model.interaction_bn);
        let mut plan = Self::from_config(cfg, TRIPLE_SEARCH, model, INIT_TRIPLE_SEARCH);
        plan.pair_rule = AlphaRule::Frozen;
        plan
    }

    /// Retrains over the selected pairs and triples together.
    pub fn triple_retrain(cfg: &RunConfig) -> Self {
        let model = Self::third_order_model(cfg, LayerMode::Retrain, LayerMode::Retrain, cfg.retrain.bn);
        Self::from_config(cfg, TRIPLE_RETRAIN, model, INIT_TRIPLE_RETRAIN)
    }

    /// `target` restricted to a manifest's open interactions, each with
    /// frozen weight 1.
    pub fn transfer(cfg: &RunConfig, target: &ModelConfig, coverage: Coverage) -> Self {
        let model = ModelConfig {
            pair_mode: LayerMode::Retrain,
            triple_mode: (coverage == Coverage::PairTriple).then_some(LayerMode::Retrain),
            ..target.clone()
        };
        let mut plan = Self::from_config(cfg, TRANSFER, model, INIT_TRANSFER);
        plan.pair_rule = AlphaRule::Frozen;
        plan.triple_rule = AlphaRule::Frozen;
        plan
    }
}

/// Position in the epoch schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cursor {
    pub epoch: usize,
    /// Next batch within the epoch.
    pub batch: usize,
    /// Optimizer steps taken.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub auc: f64,
    pub logloss: f64,
}

pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize, exec: Execution) -> Result<EvalMetrics> {
    let set = ScoredSet::new(model.predict(data, batch_size, exec)?, data.labels().to_vec())?;
    Ok(EvalMetrics {
        auc: metrics::auc(&set)?,
        logloss: metrics::logloss(&set)?,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Corrupt("odd-length hex".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|k| u8::from_str_radix(&s[k..k + 2], 16).map_err(|_| Error::Corrupt("bad hex".into())))
        .collect()
}

fn rule_name(rule: AlphaRule) -> &'static str {
    match rule {
        AlphaRule::Grda => "grda",
        AlphaRule::Adam => "adam",
        AlphaRule::Frozen => "frozen",
    }
}

/// Stores the model config and every tensor, including gates.
fn push_model(ckpt: &mut Checkpoint, model: &Model) -> Result<()> {
    let cfg = toml::to_string(model.config()).map_err(|e| Error::Config(e.to_string()))?;
    ckpt.meta.insert("model_config".into(), hex(cfg.as_bytes()));
    for (name, values) in model.tensors().into_iter().chain(model.state_tensors()) {
        ckpt.push(name, vec![values.len()], values.to_vec());
    }
    for g in model.groups() {
        let key = match g.order() {
            Order::Pair => "gates.pair",
            Order::Triple => "gates.triple",
        };
        let flags = g.gates().iter().map(|&o| if o { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        ckpt.push(key, vec![flags.len()], flags);
    }
    Ok(())
}

fn tensor<'a>(ckpt: &'a Checkpoint, name: &str, len: usize) -> Result<&'a [f64]> {
    let t = ckpt
        .tensor(name)
        .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor `{name}`")))?;
    if t.values.len() != len {
        return Err(Error::Corrupt(format!(
            "tensor `{name}` has {} values, expected {len}",
            t.values.len()
        )));
    }
    Ok(&t.values)
}

/// Rebuilds a model from a checkpoint written by [`Trainer::to_checkpoint`]
/// or [`model_checkpoint`].
pub fn model_from_checkpoint(ckpt: &Checkpoint, schema: &FieldSchema) -> Result<Model> {
    if ckpt.fingerprint != schema.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: schema.fingerprint(),
            found: ckpt.fingerprint.clone(),
        });
    }
    let text = String::from_utf8(unhex(ckpt.meta("model_config")?)?)
        .map_err(|_| Error::Corrupt("model config is not UTF-8".into()))?;
    let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Corrupt(e.to_string()))?;
    let m = schema.field_count();
    let ids = canonical_ids(m, config.coverage());
    let mut flags = Vec::with_capacity(ids.len());
    for (key, order) in [("gates.pair", Order::Pair), ("gates.triple", Order::Triple)] {
        let n = ids.iter().filter(|id| id.order() == order).count();
        if n > 0 {
            flags.extend(tensor(ckpt, key, n)?.iter().map(|&v| v != 0.0));
        }
    }
    let gates = GateSet::new(ids.clone(), flags)?;
    let alpha = ArchitectureParams::new(ids.clone(), vec![0.0; ids.len()])?;
    let mut rng = indexed_substream(0, Stream::Init, 0);
    let mut model = Model::with_architecture(schema, &config, &alpha, &gates, &mut rng)?;
    for (name, values) in model.tensors_mut() {
        let len = values.len();
        values.copy_from_slice(tensor(ckpt, &name, len)?);
    }
    for (name, values) in model.state_tensors_mut() {
        let len = values.len();
        values.copy_from_slice(tensor(ckpt, &name, len)?);
    }
    Ok(model)
}

/// A standalone model checkpoint, e.g. for `eval`.
pub fn model_checkpoint(model: &Model, config_hash: &str) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint {
        fingerprint: model.schema().fingerprint(),
        config_hash: config_hash.to_string(),
        ..Checkpoint::default()
    };
    push_model(&mut ckpt, model)?;
    Ok(ckpt)
}

/// Model, optimizer and schedule of one stage.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub plan: StagePlan,
    pub model: Model,
    pub optimizer: Optimizer,
    pub cursor: Cursor,
    pub history: Vec<EpochRecord>,
    loss_sum: f64,
    loss_rows: usize,
    perm: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    /// Fresh weights from the plan's init substream; α and gates as given.
    pub fn new(plan: StagePlan, schema: &FieldSchema, alpha: &ArchitectureParams, gates: &GateSet) -> Result<Self> {
        if plan.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        let mut rng = indexed_substream(plan.seed, Stream::Init, plan.init_index);
        let model = Model::with_architecture(schema, &plan.model, alpha, gates, &mut rng)?;
        let optimizer = Optimizer::new(&model, plan.adam, plan.grda, plan.pair_rule, plan.triple_rule)?;
        Ok(Self {
            plan,
            model,
            optimizer,
            cursor: Cursor::default(),
            history: Vec::new(),
            loss_sum: 0.0,
            loss_rows: 0,
            perm: None,
        })
    }

    pub fn finished(&self) -> bool {
        self.cursor.epoch >= self.plan.epochs
    }

    fn permutation(&mut self, n: usize) -> &[usize] {
        let epoch = self.cursor.epoch;
        if self.perm.as_ref().is_none_or(|(e, p)| *e != epoch || p.len() != n) {
            let mut p: Vec<usize> = (0..n).collect();
            let index = (self.plan.init_index << 32) | epoch as u64;
            p.shuffle(&mut indexed_substream(self.plan.seed, Stream::Shuffle, index));
            self.perm = Some((epoch, p));
        }
        &self.perm.as_ref().expect("just set").1
    }

    fn close_epoch(&mut self) -> f64 {
        let loss = if self.loss_rows > 0 {
            self.loss_sum / self.loss_rows as f64
        } else {
            f64::NAN
        };
        self.history.push(EpochRecord {
            epoch: self.cursor.epoch,
            train_loss: loss,
            test_loss: None,
            test_auc: None,
        });
        self.cursor.epoch += 1;
        self.cursor.batch = 0;
        self.loss_sum = 0.0;
        self.loss_rows = 0;
        loss
    }

    /// Takes one optimizer step on the next batch. Returns the batch loss,
    /// or `None` when the schedule is complete. Trailing batches smaller
    /// than two rows are skipped.
    pub fn step(&mut self, data: &Dataset) -> Result<Option<f64>> {
        loop {
            if self.finished() {
                return Ok(None);
            }
            let bs = self.plan.batch_size;
            let start = self.cursor.batch * bs;
            let end = (start + bs).min(data.len());
            if end <= start || end - start < 2 {
                self.close_epoch();
                continue;
            }
            let rows = self.permutation(data.len())[start..end].to_vec();
            let batch = data.batch(&rows);
            let loss = match joint_step(&mut self.model, &batch, &mut self.optimizer, self.plan.exec) {
                Ok(l) => l,
                Err(Error::NonFiniteGradient(_)) => {
                    return Err(Error::Diverged {
                        epoch: self.cursor.epoch,
                        step: self.cursor.step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            self.cursor.batch += 1;
            self.cursor.step += 1;
            self.loss_sum += loss * rows.len() as f64;
            self.loss_rows += rows.len();
            if end == data.len() {
                self.close_epoch();
            }
            return Ok(Some(loss));
        }
    }

    /// Runs to the end of the current epoch and returns its mean loss.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<f64> {
        let epoch = self.cursor.epoch;
        while self.cursor.epoch == epoch && !self.finished() {
            self.step(data)?;
        }
        Ok(self.history.last().map_or(f64::NAN, |r| r.train_loss))
    }

    /// Takes up to `steps` optimizer steps.
    pub fn run_steps(&mut self, data: &Dataset, steps: u64) -> Result<()> {
        for _ in 0..steps {
            if self.step(data)?.is_none() {
                break;
            }
        }
        Ok(())
    }

    /// Trains to the end of the schedule, evaluating on `test` after each
    /// epoch when configured.
    pub fn run(&mut self, data: &Dataset, test: Option<&Dataset>) -> Result<()> {
        self.run_with(data, test, &mut |_| Ok(()))
    }

    /// [`Trainer::run`], calling `on_epoch` after each epoch, e.g. to write
    /// a checkpoint.
    pub fn run_with(
        &mut self,
        data: &Dataset,
        test: Option<&Dataset>,
        on_epoch: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            let loss = self.run_epoch(data)?;
            log::info!(
                "{} epoch {} train loss {loss:.5}",
                self.plan.name,
                self.cursor.epoch - 1
            );
            if let (Some(test), true) = (test, self.plan.per_epoch_eval) {
                let m = evaluate(&self.model, test, self.plan.eval_batch_size, self.plan.exec)?;
                log::info!(
                    "{} epoch {} test auc {:.5} logloss {:.5}",
                    self.plan.name,
                    self.cursor.epoch - 1,
                    m.auc,
                    m.logloss
                );
                let last = self.history.last_mut().expect("epoch just closed");
                last.test_loss = Some(m.logloss);
                last.test_auc = Some(m.auc);
            }
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let mut ckpt = model_checkpoint(&self.model, config_hash)?;
        let meta = &mut ckpt.meta;
        meta.insert("stage".into(), self.plan.name.clone());
        meta.insert("epoch".into(), self.cursor.epoch.to_string());
        meta.insert("batch".into(), self.cursor.batch.to_string());
        meta.insert("step".into(), self.cursor.step.to_string());
        meta.insert("loss_sum".into(), format!("{:?}", self.loss_sum));
        meta.insert("loss_rows".into(), self.loss_rows.to_string());
        meta.insert("pair_rule".into(), rule_name(self.plan.pair_rule).into());
        meta.insert("triple_rule".into(), rule_name(self.plan.triple_rule).into());
        meta.insert("adam_step".into(), self.optimizer.adam.step.to_string());
        for r in &self.history {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:?}"));
            meta.insert(
                format!("history.{:06}", r.epoch),
                format!("{:?},{},{}", r.train_loss, opt(r.test_loss), opt(r.test_auc)),
            );
        }
        for (name, m) in &self.optimizer.adam.moments {
            ckpt.push(format!("adam.m.{name}"), vec![m.m.len()], m.m.clone());
            ckpt.push(format!("adam.v.{name}"), vec![m.v.len()], m.v.clone());
        }
        for (key, state) in [
            ("pair", &self.optimizer.grda_pair),
            ("triple", &self.optimizer.grda_triple),
        ] {
            if let Some(s) = state {
                ckpt.meta.insert(format!("grda.{key}.step"), s.step.to_string());
                ckpt.push(format!("grda.{key}.initial"), vec![s.initial.len()], s.initial.clone());
                ckpt.push(
                    format!("grda.{key}.accumulator"),
                    vec![s.accumulator.len()],
                    s.accumulator.clone(),
                );
            }
        }
        Ok(ckpt)
    }

    /// Restores a trainer saved under the same plan and config hash.
    pub fn restore(plan: StagePlan, schema: &FieldSchema, ckpt: &Checkpoint, config_hash: &str) -> Result<Self> {
        if ckpt.config_hash != config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: config_hash.to_string(),
                found: ckpt.config_hash.clone(),
            });
        }
        if ckpt.meta("stage")? != plan.name
            || ckpt.meta("pair_rule")? != rule_name(plan.pair_rule)
            || ckpt.meta("triple_rule")? != rule_name(plan.triple_rule)
        {
            return Err(Error::Config(format!(
                "checkpoint was not written by stage `{}`",
                plan.name
            )));
        }
        let model = model_from_checkpoint(ckpt, schema)?;
        if model.config() != &plan.model {
            return Err(Error::Config("checkpoint model config differs from the plan".into()));
        }
        let mut optimizer = Optimizer::new(&model, plan.adam, plan.grda, plan.pair_rule, plan.triple_rule)?;
        optimizer.adam.step = ckpt.meta_parse("adam_step")?;
        for t in &ckpt.tensors {
            if let Some(name) = t.name.strip_prefix("adam.m.") {
                let v = tensor(ckpt, &format!("adam.v.{name}"), t.values.len())?;
                optimizer.adam.moments.insert(
                    name.to_string(),
                    Moments {
                        m: t.values.clone(),
                        v: v.to_vec(),
                    },
                );
            }
        }
        for (key, state) in [
            ("pair", &mut optimizer.grda_pair),
            ("triple", &mut optimizer.grda_triple),
        ] {
            if let Some(s) = state.as_mut() {
                let n = s.initial.len();
                *s = GrdaState {
                    initial: tensor(ckpt, &format!("grda.{key}.initial"), n)?.to_vec(),
                    accumulator: tensor(ckpt, &format!("grda.{key}.accumulator"), n)?.to_vec(),
                    step: ckpt.meta_parse(&format!("grda.{key}.step"))?,
                };
            }
        }
        let mut history = Vec::new();
        for (k, v) in ckpt.meta.range("history.".to_string()..) {
            let Some(epoch) = k.strip_prefix("history.") else { break };
            let parts: Vec<&str> = v.split(',').collect();
            let num = |s: &str| -> Result<Option<f64>> {
                if s == "-" {
                    return Ok(None);
                }
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Corrupt(format!("bad history `{v}`")))
            };
            if parts.len() != 3 {
                return Err(Error::Corrupt(format!("bad history `{v}`")));
            }
            history.push(EpochRecord {
                epoch: epoch
                    .parse()
                    .map_err(|_| Error::Corrupt(format!("bad history key `{k}`")))?,
                train_loss: num(parts[0])?.unwrap_or(f64::NAN),
                test_loss: num(parts[1])?,
                test_auc: num(parts[2])?,
            });
        }
        Ok(Self {
            plan,
            model,
            optimizer,
            cursor: Cursor {
                epoch: ckpt.meta_parse("epoch")?,
                batch: ckpt.meta_parse("batch")?,
                step: ckpt.meta_parse("step")?,
            },
            history,
            loss_sum: ckpt.meta_parse("loss_sum")?,
            loss_rows: ckpt.meta_parse("loss_rows")?,
            perm: None,
        })
    }
}

/// Summary of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub name: String,
    pub epochs: Vec<EpochRecord>,
    pub seconds: f64,
    /// Share of pair ids kept: open gate and, where α is used, α ≠ 0.
    pub kept_pairs: f64,
    pub kept_triples: Option<f64>,
    pub alpha_histogram: Histogram,
    pub test: Option<EvalMetrics>,
}

/// Gates that are open and, in modes that weight by α, carry a nonzero α.
pub fn effective_gates(model: &Model) -> GateSet {
    let arch = model.architecture();
    let mut open = Vec::new();
    for g in model.groups() {
        let alpha_used = g.mode != LayerMode::Plain;
        for (k, &gate) in g.gates().iter().enumerate() {
            open.push(gate && (!alpha_used || g.alpha[k] != 0.0));
        }
    }
    GateSet::new(arch.ids().to_vec(), open).expect("canonical ids")
}

impl StageReport {
    pub fn of(trainer: &Trainer, seconds: f64, test: Option<&Dataset>) -> Result<Self> {
        let model = &trainer.model;
        let gates = effective_gates(model);
        let test = match test {
            Some(t) => Some(evaluate(model, t, trainer.plan.eval_batch_size, trainer.plan.exec)?),
            None => None,
        };
        Ok(Self {
            name: trainer.plan.name.clone(),
            epochs: trainer.history.clone(),
            seconds,
            kept_pairs: gates.kept_fraction(Order::Pair),
            kept_triples: model.triples.as_ref().map(|_| gates.kept_fraction(Order::Triple)),
            alpha_histogram: histogram(model.architecture().values(), HISTOGRAM_BINS),
            test,
        })
    }

    /// Tab-separated `stage key value...` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.name;
        let _ = writeln!(out, "{s}\tseconds\t{:.3}", self.seconds);
        let _ = writeln!(out, "{s}\tkept_pairs\t{}", self.kept_pairs);
        if let Some(k) = self.kept_triples {
            let _ = writeln!(out, "{s}\tkept_triples\t{k}");
        }
        for r in &self.epochs {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
            let _ = writeln!(
                out,
                "{s}\tepoch\t{}\ttrain_loss\t{}\ttest_loss\t{}\ttest_auc\t{}",
                r.epoch,
                r.train_loss,
                opt(r.test_loss),
                opt(r.test_auc)
            );
        }
        let h = &self.alpha_histogram;
        let counts: Vec<String> = h.counts.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            out,
            "{s}\talpha_histogram\tzeros\t{}\tlo\t{}\thi\t{}\tcounts\t{}",
            h.zeros,
            h.lo,
            h.hi,
            counts.join(",")
        );
        if let Some(m) = self.test {
            let _ = writeln!(out, "{s}\ttest_auc\t{}", m.auc);
            let _ = writeln!(out, "{s}\ttest_logloss\t{}", m.logloss);
        }
        out
    }
}

/// Reports of every stage of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub stages: Vec<StageReport>,
}

pub const REPORT_HEADER: &str = "#autofis-report v1";

impl RunReport {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            seed: cfg.run.seed,
            config_hash: cfg.hash(),
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{REPORT_HEADER}\nrun\tseed\t{}\nrun\tconfig_hash\t{}\nrun\tversion\t{}\n",
            self.seed,
            self.config_hash,
            env!("CARGO_PKG_VERSION")
        );
        for s in &self.stages {
            out.push_str(&s.to_text());
        }
        out
    }
}

/// Summary lines `(stage, key, value)` of a report written by
/// [`RunReport::to_text`], skipping per-epoch and histogram rows.
pub fn report_summary(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Parse {
            source_name: "report".into(),
            line: 1,
            msg: "missing report header".into(),
        });
    }
    Ok(lines
        .filter_map(|l| {
            let parts: Vec<&str> = l.split('\t').collect();
            (parts.len() == 3).then(|| (parts[0].to_string(), parts[1].to_string(), parts[2].to_string()))
        })
        .collect())
}

/// Training and test data of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub schema: FieldSchema,
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub synthetic: Option<SyntheticSpec>,
    pub vocab: Option<(VocabMap, Vec<Option<Buckets>>)>,
}

/// Generates, ingests or loads the data named by the config.
pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let spec = SyntheticSpec::sample(&cfg.synthetic.options(), cfg.data_seed())?;
            let (train, test) = ingest::generate_synthetic(&spec, cfg.synthetic.n_train, cfg.synthetic.n_test)?;
            Ok(Prepared {
                schema: spec.schema(),
                train,
                test: (!test.is_empty()).then_some(test),
                synthetic: Some(spec),
                vocab: None,
            })
        }
        DataSource::Raw => {
            let ic = cfg
                .ingest
                .as_ref()
                .ok_or_else(|| Error::Config("missing [ingest]".into()))?;
            let path = cfg
                .data
                .raw
                .as_ref()
                .ok_or_else(|| Error::Config("missing data.raw".into()))?;
            let rows = ingest::read_raw(path, &ic.fields)?;
            let enc = ingest::ingest(rows, ic, cfg.data_seed())?;
            Ok(Prepared {
                schema: enc.train.schema().clone(),
                test: (!enc.test.is_empty()).then_some(enc.test),
                train: enc.train,
                synthetic: None,
                vocab: Some((enc.vocab, enc.buckets)),
            })
        }
        DataSource::Encoded => {
            let schema_path = cfg
                .data
                .schema
                .as_ref()
                .ok_or_else(|| Error::Config("missing data.schema".into()))?;
            let train_path = cfg
                .data
                .train
                .as_ref()
                .ok_or_else(|| Error::Config("missing data.train".into()))?;
            let schema = persistence::load_schema(schema_path)?;
            let train = persistence::load_dataset(train_path, &schema)?;
            let test = match &cfg.data.test {
                Some(p) => Some(persistence::load_dataset(p, &schema)?),
                None => None,
            };
            Ok(Prepared {
                schema,
                train,
                test,
                synthetic: None,
                vocab: None,
            })
        }
    }
}

/// Builds a trainer and runs it to completion.
pub fn run_plan(
    plan: StagePlan,
    data: &Prepared,
    alpha: &ArchitectureParams,
    gates: &GateSet,
) -> Result<(Trainer, StageReport)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(plan, &data.schema, alpha, gates)?;
    trainer.run(&data.train, data.test.as_ref())?;
    let report = StageReport::of(&trainer, start.elapsed().as_secs_f64(), data.test.as_ref())?;
    Ok((trainer, report))
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub manifest: InteractionManifest,
    pub model: Model,
    pub report: StageReport,
}

/// Joint search of α and the network. Pruned interactions end with α = 0
/// and a closed gate.
pub fn search_stage(cfg: &RunConfig, data: &Prepared) -> Result<SearchOutcome> {
    search_with(cfg, data, None, &mut |_| Ok(()))
}

/// [`search_stage`], optionally resumed from a checkpoint, with a hook
/// after each epoch.
pub fn search_with(
    cfg: &RunConfig,
    data: &Prepared,
    resume: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&Trainer) -> Result<()>,
) -> Result<SearchOutcome> {
    let plan = StagePlan::search(cfg);
    let start = Instant::now();
    let mut trainer = match resume {
        Some(ckpt) => Trainer::restore(plan, &data.schema, ckpt, &cfg.hash())?,
        None => {
            let m = data.schema.field_count();
            let alpha = ArchitectureParams::uniform(m, Coverage::Pair, plan.model.alpha_init);
            let gates = GateSet::all_open(m, Coverage::Pair);
            Trainer::new(plan, &data.schema, &alpha, &gates)?
        }
    };
    trainer.run_with(&data.train, data.test.as_ref(), on_epoch)?;
    let report = StageReport::of(&trainer, start.elapsed().as_secs_f64(), data.test.as_ref())?;
    let alpha = trainer.model.architecture();
    let gates = extract_gates(&alpha);
    let manifest = InteractionManifest::new(&data.schema, alpha, gates, SEARCH, cfg.run.seed, &cfg.hash())?;
    Ok(SearchOutcome {
        manifest,
        model: trainer.model,
        report,
    })
}

/// α for a retrain: the searched values, or 1 on every open gate.
fn retrain_alpha(cfg: &RunConfig, manifest: &InteractionManifest) -> Result<ArchitectureParams> {
    if cfg.retrain.alpha_from_search {
        return Ok(manifest.alpha.clone());
    }
    let ones = manifest
        .gates
        .flags()
        .iter()
        .map(|&g| if g { 1.0 } else { 0.0 })
        .collect();
    ArchitectureParams::new(manifest.alpha.ids().to_vec(), ones)
}

/// Retrains fresh weights under the manifest's gates.
pub fn retrain_stage(cfg: &RunConfig, data: &Prepared, manifest: &InteractionManifest) -> Result<(Model, StageReport)> {
    manifest.check_schema(&data.schema)?;
    if manifest.coverage() != Coverage::Pair {
        return Err(Error::Config(
            "retrain expects a pair manifest; use the third-order pipeline".into(),
        ));
    }
    let alpha = retrain_alpha(cfg, manifest)?;
    let (trainer, report) = run_plan(StagePlan::retrain(cfg), data, &alpha, &manifest.gates)?;
    Ok((trainer.model, report))
}

/// Retrains under `gates` with every open α starting at 1.
pub fn retrain_with_gates(
    cfg: &RunConfig,
    data: &Prepared,
    gates: &GateSet,
    name: &str,
) -> Result<(Model, StageReport)> {
    let ones = gates.flags().iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let alpha = ArchitectureParams::new(gates.ids().to_vec(), ones)?;
    let mut plan = StagePlan::retrain(cfg);
    plan.name = name.to_string();
    let (trainer, report) = run_plan(plan, data, &alpha, gates)?;
    Ok((trainer.model, report))
}

/// The unrestricted baseline of the configured head.
pub fn train_plain(cfg: &RunConfig, data: &Prepared) -> Result<(Model, StageReport)> {
    let m = data.schema.field_count();
    let alpha = ArchitectureParams::uniform(m, Coverage::Pair, 1.0);
    let gates = GateSet::all_open(m, Coverage::Pair);
    let (trainer, report) = run_plan(StagePlan::plain(cfg), data, &alpha, &gates)?;
    Ok((trainer.model, report))
}

/// `open` gates drawn uniformly without replacement from `ids`.
pub fn random_gates(ids: &[InteractionId], open: usize, seed: u64, draw: u64) -> Result<GateSet> {
    if open > ids.len() {
        return Err(Error::InvalidInput(format!(
            "{open} open gates among {} ids",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut indexed_substream(seed, Stream::RandomGates, draw));
    let mut flags = vec![false; ids.len()];
    for &k in &order[..open] {
        flags[k] = true;
    }
    GateSet::new(ids.to_vec(), flags)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: InteractionManifest,
    pub model: Model,
    pub report: RunReport,
}

/// Search, gate extraction and retrain.
pub fn run_pipeline(cfg: &RunConfig, data: &Prepared) -> Result<PipelineOutcome> {
    let mut report = RunReport::new(cfg);
    let search = search_stage(cfg, data)?;
    report.stages.push(search.report);
    let (model, retrain) = retrain_stage(cfg, data, &search.manifest)?;
    report.stages.push(retrain);
    Ok(PipelineOutcome {
        manifest: search.manifest,
        model,
        report,
    })
}

/// Pair α and gates of `pairs` followed by `triples` for every triple.
fn combine(
    pairs: &InteractionManifest,
    m: usize,
    triple_alpha: &[f64],
    triple_gates: &[bool],
) -> Result<(ArchitectureParams, GateSet)> {
    let ids = canonical_ids(m, Coverage::PairTriple);
    let mut alpha = pairs.alpha.values().to_vec();
    alpha.extend_from_slice(triple_alpha);
    let mut gates = pairs.gates.flags().to_vec();
    gates.extend_from_slice(triple_gates);
    Ok((ArchitectureParams::new(ids.clone(), alpha)?, GateSet::new(ids, gates)?))
}

/// Searches all triples on top of frozen pairs from `pairs`, then retrains
/// the selected pairs and triples together. The manifest covers both.
pub fn third_order_pipeline(cfg: &RunConfig, data: &Prepared, pairs: &InteractionManifest) -> Result<PipelineOutcome> {
    pairs.check_schema(&data.schema)?;
    if pairs.coverage() != Coverage::Pair {
        return Err(Error::Config("third-order search starts from a pair manifest".into()));
    }
    let m = data.schema.field_count();
    let n_triples = canonical_ids(m, Coverage::PairTriple).len() - pairs.alpha.ids().len();
    if n_triples == 0 {
        return Err(Error::Config("third-order search needs at least three fields".into()));
    }
    let mut report = RunReport::new(cfg);
    let plan = StagePlan::triple_search(cfg);
    let (alpha, gates) = combine(
        pairs,
        m,
        &vec![plan.model.alpha_init; n_triples],
        &vec![true; n_triples],
    )?;
    let (trainer, search_report) = run_plan(plan, data, &alpha, &gates)?;
    report.stages.push(search_report);
    let triple_alpha = trainer.model.triples.as_ref().expect("triple group").alpha.clone();
    let triple_gates: Vec<bool> = triple_alpha.iter().map(|&a| a != 0.0).collect();
    let (alpha, gates) = combine(pairs, m, &triple_alpha, &triple_gates)?;
    let manifest = InteractionManifest::new(&data.schema, alpha, gates, TRIPLE_SEARCH, cfg.run.seed, &cfg.hash())?;
    let alpha = retrain_alpha(cfg, &manifest)?;
    let (trainer, retrain_report) = run_plan(StagePlan::triple_retrain(cfg), data, &alpha, &manifest.gates)?;
    report.stages.push(retrain_report);
    Ok(PipelineOutcome {
        manifest,
        model: trainer.model,
        report,
    })
}

/// `target` restricted to the manifest's open interactions, freshly
/// initialized. An IPNN's product input shrinks to the open ids.
pub fn transfer_model(
    cfg: &RunConfig,
    manifest: &InteractionManifest,
    schema: &FieldSchema,
    target: &ModelConfig,
) -> Result<Model> {
    manifest.check_schema(schema)?;
    let plan = StagePlan::transfer(cfg, target, manifest.coverage());
    let ones = vec![1.0; manifest.alpha.ids().len()];
    let alpha = ArchitectureParams::new(manifest.alpha.ids().to_vec(), ones)?;
    let mut rng = indexed_substream(plan.seed, Stream::Init, plan.init_index);
    Model::with_architecture(schema, &plan.model, &alpha, &manifest.gates, &mut rng)
}

/// Trains the transferred model of [`transfer_model`].
pub fn transfer_stage(
    cfg: &RunConfig,
    data: &Prepared,
    manifest: &InteractionManifest,
    target: &ModelConfig,
) -> Result<(Model, StageReport)> {
    manifest.check_schema(&data.schema)?;
    let plan = StagePlan::transfer(cfg, target, manifest.coverage());
    let ones = vec![1.0; manifest.alpha.ids().len()];
    let alpha = ArchitectureParams::new(manifest.alpha.ids().to_vec(), ones)?;
    let (trainer, report) = run_plan(plan, data, &alpha, &manifest.gates)?;
    Ok((trainer.model, report))
}
