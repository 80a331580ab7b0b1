//! The feature interaction layer.
//!
//! An [`InteractionGroup`] holds every candidate interaction of one order
//! (all pairs, or all triples) together with its architecture parameters α,
//! its gates and the batch-normalization state of each interaction column.
//! The group runs in one of three modes:
//!
//! * `Plain`: the raw products, each with weight 1 and no normalization.
//! * `Search`: `α_k * BN(p_k)` over all interactions.
//! * `Retrain`: `α_k * G_k * BN(p_k)`; closed gates are never computed.
//!
//! BN uses fixed scale 1 and shift 0 so α alone carries the magnitude of each
//! interaction. It can be switched off per group for ablations.

use serde::{Deserialize, Serialize};

use crate::data::{enumerate_interactions, InteractionId, Order};
use crate::embedding::EmbeddedInstance;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    Plain,
    Search,
    Retrain,
}

/// Interaction orders covered by a set of architecture parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coverage {
    Pair,
    PairTriple,
}

impl std::fmt::Display for Coverage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Coverage::Pair => "pair",
            Coverage::PairTriple => "pair+triple",
        })
    }
}

impl std::str::FromStr for Coverage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(Coverage::Pair),
            "pair+triple" => Ok(Coverage::PairTriple),
            other => Err(Error::InvalidInput(format!("unknown coverage `{other}`"))),
        }
    }
}

/// Canonical id list for `m` fields: all pairs, then (optionally) all triples.
pub fn canonical_ids(field_count: usize, coverage: Coverage) -> Vec<InteractionId> {
    let mut ids = enumerate_interactions(field_count, Order::Pair);
    if coverage == Coverage::PairTriple {
        ids.extend(enumerate_interactions(field_count, Order::Triple));
    }
    ids
}

fn coverage_of(ids: &[InteractionId]) -> Result<(usize, Coverage)> {
    let pairs = ids.iter().take_while(|id| id.order() == Order::Pair).count();
    // C(m, 2) = pairs  =>  m = (1 + sqrt(1 + 8 pairs)) / 2
    let m = ((1.0 + (1.0 + 8.0 * pairs as f64).sqrt()) / 2.0).round() as usize;
    for coverage in [Coverage::Pair, Coverage::PairTriple] {
        if canonical_ids(m, coverage) == ids {
            return Ok((m, coverage));
        }
    }
    Err(Error::InvalidInput("interaction ids are not in canonical order".into()))
}

/// Architecture parameters α, one per interaction in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureParams {
    field_count: usize,
    coverage: Coverage,
    ids: Vec<InteractionId>,
    alpha: Vec<f64>,
}

impl ArchitectureParams {
    pub fn new(ids: Vec<InteractionId>, alpha: Vec<f64>) -> Result<Self> {
        if ids.len() != alpha.len() {
            return Err(Error::Shape(format!(
                "{} ids but {} alpha values",
                ids.len(),
                alpha.len()
            )));
        }
        if let Some(k) = alpha.iter().position(|a| !a.is_finite()) {
            return Err(Error::InvalidInput(format!("alpha for {} is not finite", ids[k])));
        }
        let (field_count, coverage) = coverage_of(&ids)?;
        Ok(Self {
            field_count,
            coverage,
            ids,
            alpha,
        })
    }

    pub fn uniform(field_count: usize, coverage: Coverage, value: f64) -> Self {
        let ids = canonical_ids(field_count, coverage);
        let alpha = vec![value; ids.len()];
        Self {
            field_count,
            coverage,
            ids,
            alpha,
        }
    }

    pub fn field_count(&self) -> usize {
        self.field_count
    }

    pub fn coverage(&self) -> Coverage {
        self.coverage
    }

    pub fn ids(&self) -> &[InteractionId] {
        &self.ids
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }

    pub fn get(&self, id: &InteractionId) -> Option<f64> {
        self.ids.iter().position(|x| x == id).map(|k| self.alpha[k])
    }

    /// The α values of one order.
    pub fn of_order(&self, order: Order) -> Vec<f64> {
        self.ids
            .iter()
            .zip(&self.alpha)
            .filter(|(id, _)| id.order() == order)
            .map(|(_, &a)| a)
            .collect()
    }
}

/// Open/closed status of each interaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateSet {
    ids: Vec<InteractionId>,
    open: Vec<bool>,
}

impl GateSet {
    pub fn new(ids: Vec<InteractionId>, open: Vec<bool>) -> Result<Self> {
        if ids.len() != open.len() {
            return Err(Error::Shape(format!("{} ids but {} gates", ids.len(), open.len())));
        }
        coverage_of(&ids)?;
        Ok(Self { ids, open })
    }

    pub fn all_open(field_count: usize, coverage: Coverage) -> Self {
        let ids = canonical_ids(field_count, coverage);
        let open = vec![true; ids.len()];
        Self { ids, open }
    }

    pub fn ids(&self) -> &[InteractionId] {
        &self.ids
    }

    pub fn flags(&self) -> &[bool] {
        &self.open
    }

    pub fn is_open(&self, id: &InteractionId) -> bool {
        self.ids.iter().position(|x| x == id).is_some_and(|k| self.open[k])
    }

    pub fn open_count(&self) -> usize {
        self.open.iter().filter(|&&g| g).count()
    }

    pub fn of_order(&self, order: Order) -> Vec<bool> {
        self.ids
            .iter()
            .zip(&self.open)
            .filter(|(id, _)| id.order() == order)
            .map(|(_, &g)| g)
            .collect()
    }

    /// Share of open gates among interactions of `order`.
    pub fn kept_fraction(&self, order: Order) -> f64 {
        let flags = self.of_order(order);
        if flags.is_empty() {
            return 0.0;
        }
        flags.iter().filter(|&&g| g).count() as f64 / flags.len() as f64
    }
}

/// A gate is open exactly when its searched α is nonzero.
pub fn extract_gates(alpha: &ArchitectureParams) -> GateSet {
    GateSet {
        ids: alpha.ids.clone(),
        open: alpha.alpha.iter().map(|&a| a != 0.0).collect(),
    }
}

#[inline]
pub(crate) fn pair_value(e: &[f64], d: usize, i: usize, j: usize) -> f64 {
    let (a, b) = (&e[i * d..(i + 1) * d], &e[j * d..(j + 1) * d]);
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn triple_value(e: &[f64], d: usize, i: usize, j: usize, t: usize) -> f64 {
    let (a, b, c) = (&e[i * d..(i + 1) * d], &e[j * d..(j + 1) * d], &e[t * d..(t + 1) * d]);
    let mut s = 0.0;
    for k in 0..d {
        s += a[k] * b[k] * c[k];
    }
    s
}

#[inline]
pub(crate) fn interaction_value(e: &[f64], d: usize, id: &InteractionId) -> f64 {
    match id.order() {
        Order::Pair => pair_value(e, d, id.field(0), id.field(1)),
        Order::Triple => triple_value(e, d, id.field(0), id.field(1), id.field(2)),
    }
}

fn stack(batch: &[EmbeddedInstance]) -> Result<(usize, usize)> {
    let first = batch.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (m, d) = (first.field_count(), first.dim());
    if batch.iter().any(|e| e.field_count() != m || e.dim() != d) {
        return Err(Error::Shape("embedded instances disagree on shape".into()));
    }
    Ok((m, d))
}

fn products(batch: &[EmbeddedInstance], order: Order) -> Result<Matrix> {
    let (m, d) = stack(batch)?;
    let ids = enumerate_interactions(m, order);
    let mut out = Matrix::zeros(batch.len(), ids.len());
    for (b, e) in batch.iter().enumerate() {
        for (k, id) in ids.iter().enumerate() {
            out.set(b, k, interaction_value(e.as_slice(), d, id));
        }
    }
    Ok(out)
}

/// `B x C(m,2)` matrix of `<e_i, e_j>` in canonical column order.
pub fn pairwise_products(batch: &[EmbeddedInstance]) -> Result<Matrix> {
    products(batch, Order::Pair)
}

/// `B x C(m,3)` matrix of `sum_k e_i[k] e_j[k] e_t[k]`.
pub fn triple_products(batch: &[EmbeddedInstance]) -> Result<Matrix> {
    products(batch, Order::Triple)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            epsilon: 1e-5,
        }
    }
}

/// Which statistics normalize a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnPhase {
    /// Batch mean and biased batch variance.
    Train,
    /// Running averages accumulated during training.
    EvalRunning,
    /// Statistics of the evaluation batch itself.
    EvalBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Per-column mean and biased (1/B) variance.
    pub fn of(x: &Matrix) -> Self {
        let (rows, cols) = (x.rows(), x.cols());
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let c = v - m;
                *s += c * c;
            }
        }
        for s in &mut var {
            *s /= rows as f64;
        }
        Self { mean, var }
    }
}

/// Running statistics of each interaction column. Scale and shift are the
/// constants 1 and 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub config: BnConfig,
}

/// Output of a normalization pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnOutput {
    pub normalized: Matrix,
    /// Statistics used, present for `Train` and `EvalBatch`.
    pub stats: Option<BatchStats>,
}

impl BnState {
    pub fn new(columns: usize, config: BnConfig) -> Self {
        Self {
            running_mean: vec![0.0; columns],
            running_var: vec![1.0; columns],
            config,
        }
    }

    pub fn columns(&self) -> usize {
        self.running_mean.len()
    }

    /// `running = momentum * running + (1 - momentum) * batch` for the given
    /// columns.
    pub fn update(&mut self, columns: &[usize], stats: &BatchStats) {
        let mom = self.config.momentum;
        for (k, &c) in columns.iter().enumerate() {
            self.running_mean[c] = mom * self.running_mean[c] + (1.0 - mom) * stats.mean[k];
            self.running_var[c] = mom * self.running_var[c] + (1.0 - mom) * stats.var[k];
        }
    }

    /// Normalizes `x` and, in `Train`, folds the batch statistics into the
    /// running averages. `x` must cover all columns of the state.
    pub fn forward(&mut self, x: &Matrix, phase: BnPhase) -> Result<Matrix> {
        let all: Vec<usize> = (0..self.columns()).collect();
        let out = bn_normalize(x, phase, self, &all)?;
        if phase == BnPhase::Train {
            self.update(&all, out.stats.as_ref().expect("train stats"));
        }
        Ok(out.normalized)
    }
}

/// Normalizes the columns of `x`; column `k` of `x` is column `columns[k]`
/// of `state`. Never mutates the running statistics.
pub fn bn_normalize(x: &Matrix, phase: BnPhase, state: &BnState, columns: &[usize]) -> Result<BnOutput> {
    if x.cols() != columns.len() {
        return Err(Error::Shape(format!(
            "{} columns but {} state columns selected",
            x.cols(),
            columns.len()
        )));
    }
    let eps = state.config.epsilon;
    let (mean, var, stats) = match phase {
        BnPhase::Train | BnPhase::EvalBatch => {
            if phase == BnPhase::Train && x.rows() < 2 {
                return Err(Error::InvalidInput(format!(
                    "batch normalization needs a batch of at least 2, got {}",
                    x.rows()
                )));
            }
            if x.rows() == 0 {
                return Err(Error::InvalidInput("empty batch".into()));
            }
            let stats = BatchStats::of(x);
            (stats.mean.clone(), stats.var.clone(), Some(stats))
        }
        BnPhase::EvalRunning => (
            columns.iter().map(|&c| state.running_mean[c]).collect(),
            columns.iter().map(|&c| state.running_var[c]).collect(),
            None,
        ),
    };
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = x.clone();
    for r in 0..x.rows() {
        for ((v, m), s) in normalized.row_mut(r).iter_mut().zip(&mean).zip(&inv) {
            *v = (*v - m) * s;
        }
    }
    Ok(BnOutput { normalized, stats })
}

/// Free-function form of [`BnState::forward`].
pub fn bn_forward(x: &Matrix, phase: BnPhase, state: &mut BnState) -> Result<Matrix> {
    state.forward(x, phase)
}

/// Backpropagates through batch normalization with the batch mean and
/// variance treated as functions of the inputs:
/// `dx = (B dy - sum(dy) - x_hat sum(dy x_hat)) / (B sqrt(var + eps))`.
pub fn bn_backward(dy: &Matrix, normalized: &Matrix, stats: &BatchStats, epsilon: f64) -> Matrix {
    let (rows, cols) = (dy.rows(), dy.cols());
    let n = rows as f64;
    let mut sum_dy = vec![0.0; cols];
    let mut sum_dy_xhat = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let g = dy.get(r, c);
            sum_dy[c] += g;
            sum_dy_xhat[c] += g * normalized.get(r, c);
        }
    }
    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = (n * dy.get(r, c) - sum_dy[c] - normalized.get(r, c) * sum_dy_xhat[c]) * inv[c] / n;
            dx.set(r, c, v);
        }
    }
    dx
}

/// Whether closed gates are skipped or computed and multiplied by zero.
/// Both give bit-identical results for scalar heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClosedGates {
    #[default]
    Skip,
    ComputeAndZero,
}

/// Forward cache of one interaction group over a batch.
#[derive(Debug, Clone)]
pub struct GroupForward {
    /// Indices (into the group's ids) of the computed columns.
    pub active: Vec<usize>,
    /// Raw products, `B x active.len()`.
    pub raw: Matrix,
    /// BN output when normalization is on.
    pub bn: Option<BnOutput>,
    /// Weight applied to each computed column.
    pub weights: Vec<f64>,
}

impl GroupForward {
    /// Pre-weight interaction values: BN output, or the raw products.
    pub fn values(&self) -> &Matrix {
        self.bn.as_ref().map_or(&self.raw, |b| &b.normalized)
    }

    /// `sum_k w_k q_bk` for each row.
    pub fn weighted_sum(&self) -> Vec<f64> {
        let q = self.values();
        (0..q.rows())
            .map(|r| {
                let mut s = 0.0;
                for (v, w) in q.row(r).iter().zip(&self.weights) {
                    s += w * v;
                }
                s
            })
            .collect()
    }

    /// `w_k q_bk` as a matrix (the per-interaction vector fed to IPNN).
    pub fn weighted(&self) -> Matrix {
        let mut out = self.values().clone();
        for r in 0..out.rows() {
            for (v, w) in out.row_mut(r).iter_mut().zip(&self.weights) {
                *v *= w;
            }
        }
        out
    }
}

/// All interactions of one order with their α, gates and BN state.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGroup {
    ids: Vec<InteractionId>,
    pub mode: LayerMode,
    pub bn: bool,
    pub alpha: Vec<f64>,
    gates: Vec<bool>,
    pub bn_state: BnState,
}

impl InteractionGroup {
    pub fn new(
        field_count: usize,
        order: Order,
        mode: LayerMode,
        bn: bool,
        bn_config: BnConfig,
        alpha_init: f64,
    ) -> Self {
        let ids = enumerate_interactions(field_count, order);
        let k = ids.len();
        Self {
            ids,
            mode,
            bn,
            alpha: vec![alpha_init; k],
            gates: vec![true; k],
            bn_state: BnState::new(k, bn_config),
        }
    }

    pub fn ids(&self) -> &[InteractionId] {
        &self.ids
    }

    pub fn order(&self) -> Order {
        self.ids.first().map_or(Order::Pair, InteractionId::order)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn gates(&self) -> &[bool] {
        &self.gates
    }

    pub fn set_gates(&mut self, gates: &[bool]) -> Result<()> {
        if gates.len() != self.ids.len() {
            return Err(Error::Shape(format!(
                "{} gates for {} interactions",
                gates.len(),
                self.ids.len()
            )));
        }
        self.gates = gates.to_vec();
        Ok(())
    }

    /// Whether α enters the forward pass.
    pub fn uses_alpha(&self) -> bool {
        self.mode != LayerMode::Plain
    }

    /// Whether BN is applied (never in `Plain`).
    pub fn uses_bn(&self) -> bool {
        self.bn && self.mode != LayerMode::Plain
    }

    fn is_live(&self, k: usize) -> bool {
        self.mode != LayerMode::Retrain || self.gates[k]
    }

    /// Columns that are computed under the given policy.
    pub fn active_columns(&self, policy: ClosedGates) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&k| policy == ClosedGates::ComputeAndZero || self.is_live(k))
            .collect()
    }

    /// Number of interaction values this group passes on.
    pub fn output_width(&self) -> usize {
        self.active_columns(ClosedGates::Skip).len()
    }

    fn column_weight(&self, k: usize) -> f64 {
        match self.mode {
            LayerMode::Plain => 1.0,
            LayerMode::Search => self.alpha[k],
            LayerMode::Retrain => {
                if self.gates[k] {
                    self.alpha[k]
                } else {
                    0.0
                }
            }
        }
    }

    /// `embedded` is `B x (m d)`.
    pub fn forward(
        &self,
        embedded: &Matrix,
        dim: usize,
        phase: BnPhase,
        policy: ClosedGates,
        exec: Execution,
    ) -> Result<GroupForward> {
        let active = self.active_columns(policy);
        let width = active.len();
        let mut raw = Matrix::zeros(embedded.rows(), width);
        let ids: Vec<InteractionId> = active.iter().map(|&k| self.ids[k]).collect();
        par::for_each_row_block(exec, raw.as_mut_slice(), width, par::CHUNK_ROWS, |start, block| {
            if width == 0 {
                return;
            }
            for (r, out) in block.chunks_mut(width).enumerate() {
                let e = embedded.row(start + r);
                for (o, id) in out.iter_mut().zip(&ids) {
                    *o = interaction_value(e, dim, id);
                }
            }
        });
        let bn = if self.uses_bn() && width > 0 {
            Some(bn_normalize(&raw, phase, &self.bn_state, &active)?)
        } else {
            None
        };
        let weights = active.iter().map(|&k| self.column_weight(k)).collect();
        Ok(GroupForward {
            active,
            raw,
            bn,
            weights,
        })
    }

    /// Given `dL/d(w_k q_bk)` (`B x active`), accumulates `dL/dE` into
    /// `d_embedded` and returns `dL/dα` over all interactions (zero for
    /// closed gates and in `Plain`).
    pub fn backward(
        &self,
        fwd: &GroupForward,
        embedded: &Matrix,
        dim: usize,
        dv: &Matrix,
        d_embedded: &mut Matrix,
        exec: Execution,
    ) -> Vec<f64> {
        let rows = dv.rows();
        let width = fwd.active.len();
        let q = fwd.values();
        let mut alpha_grad = vec![0.0; self.ids.len()];
        if width == 0 {
            return alpha_grad;
        }
        if self.uses_alpha() {
            for (c, &k) in fwd.active.iter().enumerate() {
                if !self.is_live(k) {
                    continue;
                }
                let mut g = 0.0;
                for r in 0..rows {
                    g += dv.get(r, c) * q.get(r, c);
                }
                alpha_grad[k] = g;
            }
        }
        let mut dq = dv.clone();
        for r in 0..rows {
            for (v, w) in dq.row_mut(r).iter_mut().zip(&fwd.weights) {
                *v *= w;
            }
        }
        let dp = match &fwd.bn {
            Some(bn) => bn_backward(
                &dq,
                &bn.normalized,
                bn.stats.as_ref().expect("backward needs batch statistics"),
                self.bn_state.config.epsilon,
            ),
            None => dq,
        };
        let ids: Vec<InteractionId> = fwd.active.iter().map(|&k| self.ids[k]).collect();
        let cols = d_embedded.cols();
        par::for_each_row_block(
            exec,
            d_embedded.as_mut_slice(),
            cols,
            par::CHUNK_ROWS,
            |start, block| {
                for (r, de) in block.chunks_mut(cols).enumerate() {
                    let row = start + r;
                    let e = embedded.row(row);
                    let g = dp.row(row);
                    for (id, &gk) in ids.iter().zip(g) {
                        if gk == 0.0 {
                            continue;
                        }
                        match id.order() {
                            Order::Pair => {
                                let (i, j) = (id.field(0), id.field(1));
                                for k in 0..dim {
                                    de[i * dim + k] += gk * e[j * dim + k];
                                    de[j * dim + k] += gk * e[i * dim + k];
                                }
                            }
                            Order::Triple => {
                                let (i, j, t) = (id.field(0), id.field(1), id.field(2));
                                for k in 0..dim {
                                    let (a, b, c) = (e[i * dim + k], e[j * dim + k], e[t * dim + k]);
                                    de[i * dim + k] += gk * b * c;
                                    de[j * dim + k] += gk * a * c;
                                    de[t * dim + k] += gk * a * b;
                                }
                            }
                        }
                    }
                }
            },
        );
        alpha_grad
    }

    /// Folds the training batch statistics of this forward pass into the
    /// running averages.
    pub fn update_running_stats(&mut self, fwd: &GroupForward) {
        let Some(stats) = fwd.bn.as_ref().and_then(|b| b.stats.as_ref()) else {
            return;
        };
        let mom = self.bn_state.config.momentum;
        for (c, &k) in fwd.active.iter().enumerate() {
            if self.is_live(k) {
                let st = &mut self.bn_state;
                st.running_mean[k] = mom * st.running_mean[k] + (1.0 - mom) * stats.mean[c];
                st.running_var[k] = mom * st.running_var[k] + (1.0 - mom) * stats.var[c];
            }
        }
    }
}
