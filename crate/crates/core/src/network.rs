//! Factorization-model heads built on the embedding and interaction layers.
//!
//! * `Fm`: `z = <w, x> + b + sum of pairwise terms`.
//! * `Fm3`: `Fm` plus the third-order group.
//! * `DeepFm`: `Fm` (optionally with triples) plus an MLP over the embeddings.
//! * `Ipnn`: an MLP over `[E, <w, x> + b, weighted interaction values]`.
//!   With a single identity output layer and unit weights on the linear and
//!   interaction inputs it computes exactly the `Fm` logit.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{FieldSchema, MiniBatch, Order, Reduce};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::interaction::{
    bn_backward, bn_normalize, ArchitectureParams, BnConfig, BnOutput, BnPhase, BnState, ClosedGates, Coverage,
    GateSet, GroupForward, InteractionGroup, LayerMode,
};
use crate::par::{self, Execution};
use crate::tensor::{Matrix, SparseRows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Fm,
    Fm3,
    DeepFm,
    Ipnn,
}

impl Head {
    pub fn uses_mlp(self) -> bool {
        matches!(self, Head::DeepFm | Head::Ipnn)
    }
}

/// Statistics used by batch normalization outside of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnEval {
    #[default]
    Running,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub head: Head,
    pub embed_dim: usize,
    /// Widths of the MLP layers, ending in the output width 1.
    pub mlp_layers: Vec<usize>,
    pub pair_mode: LayerMode,
    pub triple_mode: Option<LayerMode>,
    pub interaction_bn: bool,
    /// Batch normalization with trainable scale and shift on hidden MLP layers.
    pub mlp_bn: bool,
    pub bn_eval: BnEval,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub alpha_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: Head::Fm,
            embed_dim: 8,
            mlp_layers: Vec::new(),
            pair_mode: LayerMode::Plain,
            triple_mode: None,
            interaction_bn: true,
            mlp_bn: false,
            bn_eval: BnEval::Running,
            bn_momentum: 0.99,
            bn_epsilon: 1e-5,
            alpha_init: 0.7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if self.head.uses_mlp() {
            if self.mlp_layers.last() != Some(&1) {
                return Err(Error::Config("mlp_layers must end with an output width of 1".into()));
            }
            if self.mlp_layers.contains(&0) {
                return Err(Error::Config("mlp layer widths must be positive".into()));
            }
        } else if !self.mlp_layers.is_empty() {
            return Err(Error::Config(format!(
                "{:?} head has no MLP; clear mlp_layers",
                self.head
            )));
        }
        match (self.head, self.triple_mode) {
            (Head::Fm3, None) => return Err(Error::Config("fm3 needs triple_mode".into())),
            (Head::Fm, Some(_)) => return Err(Error::Config("fm has no third-order terms; use fm3".into())),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1)".into()));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::Config("bn_epsilon must be positive".into()));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::Config("alpha_init must be finite".into()));
        }
        Ok(())
    }

    pub fn coverage(&self) -> Coverage {
        if self.triple_mode.is_some() {
            Coverage::PairTriple
        } else {
            Coverage::Pair
        }
    }

    fn bn_config(&self) -> BnConfig {
        BnConfig {
            momentum: self.bn_momentum,
            epsilon: self.bn_epsilon,
        }
    }
}

/// BN with trainable scale and shift on a hidden MLP layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBn {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub state: BnState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub input: usize,
    pub output: usize,
    /// Row-major `output x input`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
    pub bn: Option<MlpBn>,
}

impl MlpLayer {
    fn new<R: Rng + ?Sized>(input: usize, output: usize, relu: bool, bn: Option<BnConfig>, rng: &mut R) -> Self {
        let bound = if relu { 6.0 } else { 3.0 };
        let bound = (bound / input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            input,
            output,
            weight: (0..input * output).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; output],
            relu,
            bn: bn.map(|cfg| MlpBn {
                scale: vec![1.0; output],
                shift: vec![0.0; output],
                state: BnState::new(output, cfg),
            }),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    bn: Option<BnOutput>,
    output: Matrix,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: Vec<usize>,
    embedded: Matrix,
    pub linear: Vec<f64>,
    pub pairs: GroupForward,
    pub triples: Option<GroupForward>,
    mlp: Vec<LayerCache>,
    pub logits: Vec<f64>,
}

/// Gradients of the mean batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: SparseRows,
    pub linear: SparseRows,
    pub bias: f64,
    pub pair_alpha: Vec<f64>,
    pub triple_alpha: Option<Vec<f64>>,
    pub mlp: Vec<MlpGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn_scale: Option<Vec<f64>>,
    pub bn_shift: Option<Vec<f64>>,
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl Gradients {
    /// Fails with the first tensor holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        if self.embedding.iter().any(|(_, v)| !all_finite(v)) {
            return Err(Error::NonFiniteGradient("embedding".into()));
        }
        if self.linear.iter().any(|(_, v)| !all_finite(v)) {
            return Err(Error::NonFiniteGradient("linear".into()));
        }
        if !self.bias.is_finite() {
            return Err(Error::NonFiniteGradient("bias".into()));
        }
        if !all_finite(&self.pair_alpha) {
            return Err(Error::NonFiniteGradient("alpha.pair".into()));
        }
        if self.triple_alpha.as_deref().is_some_and(|t| !all_finite(t)) {
            return Err(Error::NonFiniteGradient("alpha.triple".into()));
        }
        for (l, g) in self.mlp.iter().enumerate() {
            let parts = [
                ("weight", Some(&g.weight)),
                ("bias", Some(&g.bias)),
                ("bn_scale", g.bn_scale.as_ref()),
                ("bn_shift", g.bn_shift.as_ref()),
            ];
            for (name, v) in parts {
                if v.is_some_and(|v| !all_finite(v)) {
                    return Err(Error::NonFiniteGradient(format!("mlp.{l}.{name}")));
                }
            }
        }
        Ok(())
    }

    /// Dense gradients keyed like [`Model::tensors`].
    pub fn dense(&self, model: &Model) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![
            ("embedding".to_string(), self.embedding.to_dense(model.embedding.rows())),
            ("linear".to_string(), self.linear.to_dense(model.linear.len())),
            ("bias".to_string(), vec![self.bias]),
            ("alpha.pair".to_string(), self.pair_alpha.clone()),
        ];
        if let Some(t) = &self.triple_alpha {
            out.push(("alpha.triple".into(), t.clone()));
        }
        for (l, g) in self.mlp.iter().enumerate() {
            out.push((format!("mlp.{l}.weight"), g.weight.clone()));
            out.push((format!("mlp.{l}.bias"), g.bias.clone()));
            if let (Some(s), Some(h)) = (&g.bn_scale, &g.bn_shift) {
                out.push((format!("mlp.{l}.bn_scale"), s.clone()));
                out.push((format!("mlp.{l}.bn_shift"), h.clone()));
            }
        }
        out
    }
}

/// Numerically stable `sigmoid`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Log loss of one logit, fused with the sigmoid:
/// `max(z, 0) - y z + ln(1 + exp(-|z|))`.
pub fn log_loss_with_logit(z: f64, y: u8) -> f64 {
    z.max(0.0) - f64::from(y) * z + (-z.abs()).exp().ln_1p()
}

/// A complete model: parameters, BN statistics and gates.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    schema: FieldSchema,
    pub embedding: EmbeddingTable,
    /// One weight per global feature.
    pub linear: Vec<f64>,
    pub bias: f64,
    pub pairs: InteractionGroup,
    pub triples: Option<InteractionGroup>,
    pub mlp: Vec<MlpLayer>,
    pub closed_gates: ClosedGates,
}

impl Model {
    /// A freshly initialized model with every gate open.
    pub fn new<R: Rng + ?Sized>(schema: &FieldSchema, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let m = schema.field_count();
        let arch = ArchitectureParams::uniform(m, config.coverage(), config.alpha_init);
        let gates = GateSet::all_open(m, config.coverage());
        Self::with_architecture(schema, config, &arch, &gates, rng)
    }

    /// A freshly initialized model whose α start at `alpha` and whose gates
    /// are fixed to `gates`. The IPNN input width depends on the gates.
    pub fn with_architecture<R: Rng + ?Sized>(
        schema: &FieldSchema,
        config: &ModelConfig,
        alpha: &ArchitectureParams,
        gates: &GateSet,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let m = schema.field_count();
        if alpha.field_count() != m || alpha.coverage() != config.coverage() {
            return Err(Error::Shape(format!(
                "architecture covers {} fields ({}), model has {m} fields ({})",
                alpha.field_count(),
                alpha.coverage(),
                config.coverage()
            )));
        }
        if gates.ids() != alpha.ids() {
            return Err(Error::Shape("gates and alpha cover different interactions".into()));
        }
        let bn_cfg = config.bn_config();
        let embedding = EmbeddingTable::random(schema, config.embed_dim, rng)?;
        let mut pairs = InteractionGroup::new(m, Order::Pair, config.pair_mode, config.interaction_bn, bn_cfg, 0.0);
        pairs.alpha = alpha.of_order(Order::Pair);
        pairs.set_gates(&gates.of_order(Order::Pair))?;
        let triples = match config.triple_mode {
            Some(mode) => {
                let mut g = InteractionGroup::new(m, Order::Triple, mode, config.interaction_bn, bn_cfg, 0.0);
                g.alpha = alpha.of_order(Order::Triple);
                g.set_gates(&gates.of_order(Order::Triple))?;
                Some(g)
            }
            None => None,
        };
        let mut model = Self {
            config: config.clone(),
            schema: schema.clone(),
            embedding,
            linear: vec![0.0; schema.total_features()],
            bias: 0.0,
            pairs,
            triples,
            mlp: Vec::new(),
            closed_gates: ClosedGates::Skip,
        };
        if config.head.uses_mlp() {
            let mut input = model.mlp_input_width();
            let last = config.mlp_layers.len() - 1;
            for (l, &output) in config.mlp_layers.iter().enumerate() {
                let hidden = l < last;
                let bn = (hidden && config.mlp_bn).then_some(bn_cfg);
                model.mlp.push(MlpLayer::new(input, output, hidden, bn, rng));
                input = output;
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn embed_width(&self) -> usize {
        self.schema.field_count() * self.config.embed_dim
    }

    /// Width of the first MLP layer's input.
    pub fn mlp_input_width(&self) -> usize {
        match self.config.head {
            Head::Ipnn => {
                self.embed_width()
                    + 1
                    + self.pairs.output_width()
                    + self.triples.as_ref().map_or(0, InteractionGroup::output_width)
            }
            _ => self.embed_width(),
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = &InteractionGroup> {
        std::iter::once(&self.pairs).chain(self.triples.as_ref())
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = &mut InteractionGroup> {
        std::iter::once(&mut self.pairs).chain(self.triples.as_mut())
    }

    /// Current α over all interactions in canonical order.
    pub fn architecture(&self) -> ArchitectureParams {
        let mut ids = Vec::new();
        let mut alpha = Vec::new();
        for g in self.groups() {
            ids.extend_from_slice(g.ids());
            alpha.extend_from_slice(&g.alpha);
        }
        ArchitectureParams::new(ids, alpha).expect("groups are canonical")
    }

    pub fn gates(&self) -> GateSet {
        let mut ids = Vec::new();
        let mut open = Vec::new();
        for g in self.groups() {
            ids.extend_from_slice(g.ids());
            open.extend_from_slice(g.gates());
        }
        GateSet::new(ids, open).expect("groups are canonical")
    }

    /// Replaces the gates. IPNN models reject changes that alter the MLP
    /// input width.
    pub fn set_gates(&mut self, gates: &GateSet) -> Result<()> {
        if gates.ids() != self.gates().ids() {
            return Err(Error::Shape("gate set covers different interactions".into()));
        }
        let before = self.mlp_input_width();
        let mut next = self.clone();
        next.pairs.set_gates(&gates.of_order(Order::Pair))?;
        if let Some(t) = next.triples.as_mut() {
            t.set_gates(&gates.of_order(Order::Triple))?;
        }
        if self.config.head == Head::Ipnn && next.mlp_input_width() != before {
            return Err(Error::Shape("gates change the IPNN input width".into()));
        }
        *self = next;
        Ok(())
    }

    /// Named views of every trainable tensor.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("embedding".into(), self.embedding.weights()),
            ("linear".into(), &self.linear),
            ("bias".into(), std::slice::from_ref(&self.bias)),
            ("alpha.pair".into(), &self.pairs.alpha),
        ];
        if let Some(t) = &self.triples {
            out.push(("alpha.triple".into(), &t.alpha));
        }
        for (l, layer) in self.mlp.iter().enumerate() {
            out.push((format!("mlp.{l}.weight"), &layer.weight));
            out.push((format!("mlp.{l}.bias"), &layer.bias));
            if let Some(bn) = &layer.bn {
                out.push((format!("mlp.{l}.bn_scale"), &bn.scale));
                out.push((format!("mlp.{l}.bn_shift"), &bn.shift));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("embedding".into(), self.embedding.weights_mut()),
            ("linear".into(), &mut self.linear),
            ("bias".into(), std::slice::from_mut(&mut self.bias)),
            ("alpha.pair".into(), &mut self.pairs.alpha),
        ];
        if let Some(t) = &mut self.triples {
            out.push(("alpha.triple".into(), &mut t.alpha));
        }
        for (l, layer) in self.mlp.iter_mut().enumerate() {
            out.push((format!("mlp.{l}.weight"), &mut layer.weight));
            out.push((format!("mlp.{l}.bias"), &mut layer.bias));
            if let Some(bn) = &mut layer.bn {
                out.push((format!("mlp.{l}.bn_scale"), &mut bn.scale));
                out.push((format!("mlp.{l}.bn_shift"), &mut bn.shift));
            }
        }
        out
    }

    /// Named views of non-trainable state: BN running statistics.
    pub fn state_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (name, g) in [("pair", Some(&self.pairs)), ("triple", self.triples.as_ref())] {
            if let Some(g) = g {
                out.push((format!("bn.{name}.mean"), &g.bn_state.running_mean));
                out.push((format!("bn.{name}.var"), &g.bn_state.running_var));
            }
        }
        for (l, layer) in self.mlp.iter().enumerate() {
            if let Some(bn) = &layer.bn {
                out.push((format!("mlp.{l}.bn_mean"), &bn.state.running_mean));
                out.push((format!("mlp.{l}.bn_var"), &bn.state.running_var));
            }
        }
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        let groups = [("pair", Some(&mut self.pairs)), ("triple", self.triples.as_mut())];
        for (name, g) in groups {
            if let Some(g) = g {
                out.push((format!("bn.{name}.mean"), &mut g.bn_state.running_mean));
                out.push((format!("bn.{name}.var"), &mut g.bn_state.running_var));
            }
        }
        for (l, layer) in self.mlp.iter_mut().enumerate() {
            if let Some(bn) = &mut layer.bn {
                out.push((format!("mlp.{l}.bn_mean"), &mut bn.state.running_mean));
                out.push((format!("mlp.{l}.bn_var"), &mut bn.state.running_var));
            }
        }
        out
    }

    fn bn_phase(&self, phase: Phase) -> BnPhase {
        match (phase, self.config.bn_eval) {
            (Phase::Train, _) => BnPhase::Train,
            (Phase::Eval, BnEval::Running) => BnPhase::EvalRunning,
            (Phase::Eval, BnEval::Batch) => BnPhase::EvalBatch,
        }
    }

    fn check_batch(&self, batch: &MiniBatch<'_>) -> Result<()> {
        if batch.schema() != &self.schema {
            return Err(Error::FingerprintMismatch {
                expected: self.schema.fingerprint(),
                found: batch.schema().fingerprint(),
            });
        }
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if self.closed_gates == ClosedGates::ComputeAndZero && self.config.head == Head::Ipnn {
            return Err(Error::Config("IPNN always skips closed gates".into()));
        }
        Ok(())
    }

    /// Runs the network on a batch. Pure: BN running statistics are folded
    /// in separately by [`Model::update_running_stats`].
    pub fn forward(&self, batch: &MiniBatch<'_>, phase: Phase, exec: Execution) -> Result<ForwardCache> {
        self.check_batch(batch)?;
        let rows = batch.len();
        let d = self.config.embed_dim;
        let width = self.embed_width();
        let reduce = self.schema.reduce();
        let mut embedded = Matrix::zeros(rows, width);
        par::for_each_row_block(exec, embedded.as_mut_slice(), width, par::CHUNK_ROWS, |start, block| {
            for (r, out) in block.chunks_mut(width).enumerate() {
                self.embedding
                    .embed_into(&batch.instance(start + r), reduce, out)
                    .expect("dataset rows are validated against the schema");
            }
        });
        let linear: Vec<f64> = (0..rows).map(|b| self.linear_term(batch, b, reduce)).collect();
        let bn_phase = self.bn_phase(phase);
        let policy = match self.config.head {
            Head::Ipnn => ClosedGates::Skip,
            _ => self.closed_gates,
        };
        let pairs = self.pairs.forward(&embedded, d, bn_phase, policy, exec)?;
        let triples = match &self.triples {
            Some(g) => Some(g.forward(&embedded, d, bn_phase, policy, exec)?),
            None => None,
        };

        let mut logits = linear.clone();
        let mut mlp = Vec::new();
        match self.config.head {
            Head::Fm | Head::Fm3 | Head::DeepFm => {
                for fwd in std::iter::once(&pairs).chain(triples.as_ref()) {
                    for (z, s) in logits.iter_mut().zip(fwd.weighted_sum()) {
                        *z += s;
                    }
                }
                if self.config.head == Head::DeepFm {
                    mlp = self.mlp_forward(embedded.clone(), bn_phase, exec)?;
                    let out = &mlp.last().expect("mlp has layers").output;
                    for (z, y) in logits.iter_mut().zip(out.as_slice()) {
                        *z += y;
                    }
                }
            }
            Head::Ipnn => {
                let input = self.ipnn_input(&embedded, &linear, &pairs, triples.as_ref());
                mlp = self.mlp_forward(input, bn_phase, exec)?;
                logits = mlp.last().expect("mlp has layers").output.as_slice().to_vec();
            }
        }
        Ok(ForwardCache {
            rows: batch.rows().to_vec(),
            embedded,
            linear,
            pairs,
            triples,
            mlp,
            logits,
        })
    }

    fn linear_term(&self, batch: &MiniBatch<'_>, b: usize, reduce: Reduce) -> f64 {
        let inst = batch.instance(b);
        let mut z = self.bias;
        for i in 0..self.schema.field_count() {
            let idx = inst.field(i);
            let mut s = 0.0;
            for &j in idx {
                s += self.linear[self.schema.global_index(i, j)];
            }
            if reduce == Reduce::Average && idx.len() > 1 {
                s /= idx.len() as f64;
            }
            z += s;
        }
        z
    }

    fn ipnn_input(
        &self,
        embedded: &Matrix,
        linear: &[f64],
        pairs: &GroupForward,
        triples: Option<&GroupForward>,
    ) -> Matrix {
        let parts: Vec<Matrix> = std::iter::once(pairs)
            .chain(triples)
            .map(GroupForward::weighted)
            .collect();
        let width = self.mlp_input_width();
        let mut input = Matrix::zeros(embedded.rows(), width);
        for r in 0..embedded.rows() {
            let row = input.row_mut(r);
            let (e, rest) = row.split_at_mut(embedded.cols());
            e.copy_from_slice(embedded.row(r));
            rest[0] = linear[r];
            let mut at = 1;
            for p in &parts {
                rest[at..at + p.cols()].copy_from_slice(p.row(r));
                at += p.cols();
            }
        }
        input
    }

    fn mlp_forward(&self, mut x: Matrix, phase: BnPhase, exec: Execution) -> Result<Vec<LayerCache>> {
        let mut caches = Vec::with_capacity(self.mlp.len());
        for layer in &self.mlp {
            let mut pre = affine(&x, layer, exec);
            let bn = match &layer.bn {
                Some(bn) => {
                    let all: Vec<usize> = (0..layer.output).collect();
                    let out = bn_normalize(&pre, phase, &bn.state, &all)?;
                    for r in 0..pre.rows() {
                        let row = pre.row_mut(r);
                        for (c, v) in row.iter_mut().enumerate() {
                            *v = bn.scale[c] * out.normalized.get(r, c) + bn.shift[c];
                        }
                    }
                    Some(out)
                }
                None => None,
            };
            if layer.relu {
                for v in pre.as_mut_slice() {
                    *v = v.max(0.0);
                }
            }
            caches.push(LayerCache {
                input: x,
                bn,
                output: pre.clone(),
            });
            x = pre;
        }
        Ok(caches)
    }

    /// Logits for `rows` of `data`, evaluated in `batch_size` chunks.
    pub fn predict_logits(
        &self,
        data: &crate::data::Dataset,
        rows: &[usize],
        batch_size: usize,
        exec: Execution,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(batch_size.max(1)) {
            let fwd = self.forward(&data.batch(chunk), Phase::Eval, exec)?;
            out.extend(fwd.logits);
        }
        Ok(out)
    }

    /// Click probabilities for every row of `data`.
    pub fn predict(&self, data: &crate::data::Dataset, batch_size: usize, exec: Execution) -> Result<Vec<f64>> {
        let rows: Vec<usize> = (0..data.len()).collect();
        Ok(self
            .predict_logits(data, &rows, batch_size, exec)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// Mean log loss of the batch and its gradients.
    pub fn loss_and_grad(&self, batch: &MiniBatch<'_>, exec: Execution) -> Result<(f64, Gradients, ForwardCache)> {
        let fwd = self.forward(batch, Phase::Train, exec)?;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut dz = Vec::with_capacity(batch.len());
        for (b, &z) in fwd.logits.iter().enumerate() {
            let y = batch.label(b);
            loss += log_loss_with_logit(z, y);
            dz.push((sigmoid(z) - f64::from(y)) / n);
        }
        let grads = self.backward(batch, &fwd, &dz, exec);
        Ok((loss / n, grads, fwd))
    }

    /// Backpropagates `dz = dL/dz` for each row of the batch.
    pub fn backward(&self, batch: &MiniBatch<'_>, fwd: &ForwardCache, dz: &[f64], exec: Execution) -> Gradients {
        let rows = dz.len();
        let d = self.config.embed_dim;
        let width = self.embed_width();
        let mut d_embedded = Matrix::zeros(rows, width);
        let mut d_linear = dz.to_vec();
        let mut mlp_grads = Vec::new();
        let group_fwds: Vec<&GroupForward> = std::iter::once(&fwd.pairs).chain(fwd.triples.as_ref()).collect();
        let mut dv: Vec<Matrix> = Vec::with_capacity(group_fwds.len());
        match self.config.head {
            Head::Fm | Head::Fm3 | Head::DeepFm => {
                for g in &group_fwds {
                    let cols = g.active.len();
                    let mut m = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        m.row_mut(r).fill(dz[r]);
                    }
                    dv.push(m);
                }
                if self.config.head == Head::DeepFm {
                    let (grads, d_in) = self.mlp_backward(&fwd.mlp, dz, exec);
                    mlp_grads = grads;
                    d_embedded = d_in;
                }
            }
            Head::Ipnn => {
                let (grads, d_in) = self.mlp_backward(&fwd.mlp, dz, exec);
                mlp_grads = grads;
                for r in 0..rows {
                    let src = d_in.row(r);
                    d_embedded.row_mut(r).copy_from_slice(&src[..width]);
                    d_linear[r] = src[width];
                }
                let mut at = width + 1;
                for g in &group_fwds {
                    let cols = g.active.len();
                    let mut m = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        m.row_mut(r).copy_from_slice(&d_in.row(r)[at..at + cols]);
                    }
                    at += cols;
                    dv.push(m);
                }
            }
        }
        let pair_alpha = self
            .pairs
            .backward(&fwd.pairs, &fwd.embedded, d, &dv[0], &mut d_embedded, exec);
        let triple_alpha = match (&self.triples, &fwd.triples) {
            (Some(g), Some(f)) => Some(g.backward(f, &fwd.embedded, d, &dv[1], &mut d_embedded, exec)),
            _ => None,
        };

        let reduce = self.schema.reduce();
        let positions: Vec<usize> = (0..rows).collect();
        let partials = par::map_chunks(exec, &positions, par::CHUNK_ROWS, |start, chunk| {
            let mut emb = SparseRows::new(d);
            let mut lin = SparseRows::new(1);
            for b in start..start + chunk.len() {
                let inst = batch.instance(b);
                self.embedding
                    .accumulate_grad(&inst, d_embedded.row(b), reduce, &mut emb);
                for i in 0..self.schema.field_count() {
                    let idx = inst.field(i);
                    let scale = if reduce == Reduce::Average && idx.len() > 1 {
                        1.0 / idx.len() as f64
                    } else {
                        1.0
                    };
                    for &j in idx {
                        lin.add_scalar(self.schema.global_index(i, j), d_linear[b] * scale);
                    }
                }
            }
            (emb, lin)
        });
        let mut embedding = SparseRows::new(d);
        let mut linear = SparseRows::new(1);
        for (e, l) in partials {
            embedding.merge(e);
            linear.merge(l);
        }
        Gradients {
            embedding,
            linear,
            bias: d_linear.iter().sum(),
            pair_alpha,
            triple_alpha,
            mlp: mlp_grads,
        }
    }

    fn mlp_backward(&self, caches: &[LayerCache], dz: &[f64], exec: Execution) -> (Vec<MlpGrad>, Matrix) {
        let mut grad = Matrix::column(dz);
        let mut out = Vec::with_capacity(self.mlp.len());
        for (layer, cache) in self.mlp.iter().zip(caches).rev() {
            if layer.relu {
                for (g, y) in grad.as_mut_slice().iter_mut().zip(cache.output.as_slice()) {
                    if *y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let (mut bn_scale, mut bn_shift) = (None, None);
            if let (Some(bn), Some(cached)) = (&layer.bn, &cache.bn) {
                let cols = layer.output;
                let mut ds = vec![0.0; cols];
                let mut dh = vec![0.0; cols];
                let mut dxhat = grad.clone();
                for r in 0..grad.rows() {
                    for c in 0..cols {
                        let g = grad.get(r, c);
                        ds[c] += g * cached.normalized.get(r, c);
                        dh[c] += g;
                        dxhat.set(r, c, g * bn.scale[c]);
                    }
                }
                grad = bn_backward(
                    &dxhat,
                    &cached.normalized,
                    cached.stats.as_ref().expect("backward needs batch statistics"),
                    bn.state.config.epsilon,
                );
                bn_scale = Some(ds);
                bn_shift = Some(dh);
            }
            let (dw, db) = weight_grads(&grad, &cache.input, layer, exec);
            let d_input = input_grads(&grad, layer, exec);
            out.push(MlpGrad {
                weight: dw,
                bias: db,
                bn_scale,
                bn_shift,
            });
            grad = d_input;
        }
        out.reverse();
        (out, grad)
    }

    /// Folds the training-batch BN statistics into the running averages.
    pub fn update_running_stats(&mut self, fwd: &ForwardCache) {
        self.pairs.update_running_stats(&fwd.pairs);
        if let (Some(g), Some(f)) = (self.triples.as_mut(), fwd.triples.as_ref()) {
            g.update_running_stats(f);
        }
        for (layer, cache) in self.mlp.iter_mut().zip(&fwd.mlp) {
            if let (Some(bn), Some(stats)) = (layer.bn.as_mut(), cache.bn.as_ref().and_then(|b| b.stats.as_ref())) {
                let all: Vec<usize> = (0..layer.output).collect();
                bn.state.update(&all, stats);
            }
        }
    }

    /// Rows of the batch this cache was built from.
    pub fn cache_rows(fwd: &ForwardCache) -> &[usize] {
        &fwd.rows
    }
}

fn affine(x: &Matrix, layer: &MlpLayer, exec: Execution) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), layer.output);
    let (n_in, n_out) = (layer.input, layer.output);
    par::for_each_row_block(exec, out.as_mut_slice(), n_out, par::CHUNK_ROWS, |start, block| {
        for (r, o) in block.chunks_mut(n_out).enumerate() {
            let xr = x.row(start + r);
            for (c, v) in o.iter_mut().enumerate() {
                let w = &layer.weight[c * n_in..(c + 1) * n_in];
                let mut s = layer.bias[c];
                for (a, b) in w.iter().zip(xr) {
                    s += a * b;
                }
                *v = s;
            }
        }
    });
    out
}

fn weight_grads(grad: &Matrix, input: &Matrix, layer: &MlpLayer, exec: Execution) -> (Vec<f64>, Vec<f64>) {
    let (n_in, n_out) = (layer.input, layer.output);
    let rows: Vec<usize> = (0..grad.rows()).collect();
    let partials = par::map_chunks(exec, &rows, par::CHUNK_ROWS, |start, chunk| {
        let mut dw = vec![0.0; n_in * n_out];
        let mut db = vec![0.0; n_out];
        for r in start..start + chunk.len() {
            let x = input.row(r);
            for (c, &g) in grad.row(r).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                db[c] += g;
                for (w, a) in dw[c * n_in..(c + 1) * n_in].iter_mut().zip(x) {
                    *w += g * a;
                }
            }
        }
        (dw, db)
    });
    let mut dw = vec![0.0; n_in * n_out];
    let mut db = vec![0.0; n_out];
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (dw, db)
}

fn input_grads(grad: &Matrix, layer: &MlpLayer, exec: Execution) -> Matrix {
    let (n_in, n_out) = (layer.input, layer.output);
    let mut out = Matrix::zeros(grad.rows(), n_in);
    par::for_each_row_block(exec, out.as_mut_slice(), n_in, par::CHUNK_ROWS, |start, block| {
        for (r, o) in block.chunks_mut(n_in).enumerate() {
            let g = grad.row(start + r);
            for c in 0..n_out {
                if g[c] == 0.0 {
                    continue;
                }
                for (v, w) in o.iter_mut().zip(&layer.weight[c * n_in..(c + 1) * n_in]) {
                    *v += g[c] * w;
                }
            }
        }
    });
    out
}
