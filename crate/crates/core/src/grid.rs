//! Noisy-sample detection and the routed training step.
//!
//! Per batch, each head's per-sample task losses are min-max normalized and
//! differenced; the `λ` samples with the largest `disc − gen` difference form
//! the noisy set `W`, the rest the clean set `C`. The backbone then learns
//! from the generative head on `W` and the discriminative head on `C`, while
//! the heads learn from their own objective over the whole batch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Targets};
use crate::error::{Error, Result};
use crate::losses::{graph, BatchLossReport};
use crate::model::{ForwardVars, GridModel, TaskSpec};
use crate::tensor::{Gradients, GroupSet, ParamId, ParamStore, Tape, Tensor, Var};

/// `(v - min) / (max - min)`; a constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("cannot normalize an empty array"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range == 0.0 {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - lo) / range).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedDiff {
    pub index: usize,
    pub diff: f64,
}

/// Sorts in place: largest difference first, ties by lower index.
fn rank(mut items: Vec<RankedDiff>) -> Vec<RankedDiff> {
    items.sort_by(|a, b| b.diff.total_cmp(&a.diff).then(a.index.cmp(&b.index)));
    items
}

/// Normalized discriminative minus normalized generative task loss per
/// sample, sorted descending. Pure value computation.
pub fn rank_loss_differences(report: &BatchLossReport) -> Result<Vec<RankedDiff>> {
    let d = min_max_normalize(&report.disc_task)?;
    let g = min_max_normalize(&report.gen_task)?;
    Ok(rank(
        d.iter()
            .zip(&g)
            .enumerate()
            .map(|(index, (a, b))| RankedDiff { index, diff: a - b })
            .collect(),
    ))
}

/// Ranks samples by a single score, largest first.
pub fn rank_scores(scores: &[f64]) -> Vec<RankedDiff> {
    rank(
        scores
            .iter()
            .enumerate()
            .map(|(index, &diff)| RankedDiff { index, diff })
            .collect(),
    )
}

/// Detected-noisy count as a percentage of the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LambdaSpec {
    pub percent: u32,
}

impl LambdaSpec {
    pub fn new(percent: u32) -> Result<Self> {
        if percent > 100 {
            return Err(Error::invalid(format!("lambda percent must be at most 100, got {percent}")));
        }
        Ok(Self { percent })
    }

    /// `k * batch / 100`, rounded half up.
    pub fn resolve(self, batch: usize) -> usize {
        (self.percent as usize * batch + 50) / 100
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// `W`, ascending.
    pub noisy: Vec<usize>,
    /// `C`, ascending.
    pub clean: Vec<usize>,
    pub lambda: usize,
}

impl Partition {
    pub fn batch_len(&self) -> usize {
        self.noisy.len() + self.clean.len()
    }
}

/// The first `lambda` ranked samples become `W`.
pub fn partition_batch(ranked: &[RankedDiff], lambda: usize) -> Result<Partition> {
    if lambda > ranked.len() {
        return Err(Error::invalid(format!(
            "lambda {lambda} exceeds batch size {}",
            ranked.len()
        )));
    }
    let mut noisy: Vec<usize> = ranked[..lambda].iter().map(|r| r.index).collect();
    let mut clean: Vec<usize> = ranked[lambda..].iter().map(|r| r.index).collect();
    noisy.sort_unstable();
    clean.sort_unstable();
    Ok(Partition { noisy, clean, lambda })
}

/// Which objectives drive which parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Hybrid,
    DiscOnly,
    GenOnly,
    StandardJoint,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::DiscOnly, Mode::GenOnly, Mode::StandardJoint, Mode::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Hybrid => "hybrid",
            Mode::DiscOnly => "disc_only",
            Mode::GenOnly => "gen_only",
            Mode::StandardJoint => "standard_joint",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

/// Per-sample loss nodes, each `[B]`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub disc_task: Var,
    pub gen_task: Var,
    pub recon: Var,
    pub kl: Var,
}

/// One recorded forward pass with its per-sample losses.
pub struct StepGraph {
    tape: Tape,
    forward: ForwardVars,
    losses: LossVars,
    report: BatchLossReport,
}

fn task_loss(tape: &mut Tape, pred: Var, targets: &Targets, task: &TaskSpec) -> Result<Var> {
    match (targets, task) {
        (Targets::MultiLabel(y), TaskSpec::MultiLabel { .. }) => graph::bce_multilabel(tape, pred, y),
        (Targets::Pixel { classes, .. }, TaskSpec::Pixel { classes: c, .. }) => {
            graph::pixel_ce(tape, pred, classes, *c)
        }
        _ => Err(Error::invalid("batch targets do not match the model task")),
    }
}

impl StepGraph {
    pub fn build(model: &GridModel, batch: &Batch, eps: &Tensor) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut tape = Tape::new();
        let bind = tape.bind(model.store());
        let x = tape.constant(&batch.inputs);
        let e = tape.constant(eps);
        let fv = model.forward(&mut tape, &bind, x, e)?;
        let task = &model.config().task;
        let disc_task = task_loss(&mut tape, fv.disc_prediction, &batch.targets, task)?;
        let gen_task = task_loss(&mut tape, fv.gen_prediction, &batch.targets, task)?;
        let target = tape.stop_gradient(fv.descriptor);
        let recon = graph::mse(&mut tape, fv.reconstruction, target)?;
        let kl = graph::kl_to_standard_normal(&mut tape, fv.mu, fv.log_var)?;
        let report = BatchLossReport::new(
            tape.value(disc_task).to_vec(),
            tape.value(gen_task).to_vec(),
            tape.value(recon).to_vec(),
            tape.value(kl).to_vec(),
        )?;
        Ok(Self {
            tape,
            forward: fv,
            losses: LossVars {
                disc_task,
                gen_task,
                recon,
                kl,
            },
            report,
        })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn forward(&self) -> &ForwardVars {
        &self.forward
    }

    pub fn losses(&self) -> LossVars {
        self.losses
    }

    pub fn report(&self) -> &BatchLossReport {
        &self.report
    }

    pub fn batch_len(&self) -> usize {
        self.report.len()
    }

    /// `Σ_{i∈S} v_i`, or `None` for an empty subset.
    pub fn subset_sum(&mut self, v: Var, subset: &[usize]) -> Result<Option<Var>> {
        if subset.is_empty() {
            return Ok(None);
        }
        let picked = self.tape.gather(v, subset)?;
        Ok(Some(self.tape.sum(picked)))
    }

    /// `O_d(S)`: mean discriminative task loss over `subset`.
    pub fn disc_objective(&mut self, subset: &[usize]) -> Result<Option<Var>> {
        let n = subset.len() as f64;
        Ok(self
            .subset_sum(self.losses.disc_task, subset)?
            .map(|s| self.tape.scale(s, 1.0 / n)))
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.batch_len()).collect()
    }

    /// `O_d(B)`.
    pub fn disc_batch_objective(&mut self) -> Result<Var> {
        let all = self.all_indices();
        Ok(self.disc_objective(&all)?.expect("batch is non-empty"))
    }

    /// Mean generative task loss over the batch.
    pub fn gen_task_objective(&mut self) -> Result<Var> {
        let all = self.all_indices();
        let s = self.subset_sum(self.losses.gen_task, &all)?.expect("batch is non-empty");
        Ok(self.tape.scale(s, 1.0 / all.len() as f64))
    }

    /// `O_g(B)`: batch mean of reconstruction + generative task + KL.
    pub fn gen_batch_objective(&mut self) -> Result<Var> {
        let LossVars {
            gen_task, recon, kl, ..
        } = self.losses;
        let a = self.tape.add(recon, gen_task)?;
        let total = self.tape.add(a, kl)?;
        Ok(self.tape.mean(total))
    }

    /// `(1/|B|) (Σ_{i∈W} L(ŷ^g_i) + Σ_{i∈C} L(ŷ^d_i))`.
    pub fn routed_loss(&mut self, partition: &Partition) -> Result<Var> {
        let b = self.batch_len();
        if partition.batch_len() != b {
            return Err(Error::invalid(format!(
                "partition covers {} samples, batch has {b}",
                partition.batch_len()
            )));
        }
        let w = self.subset_sum(self.losses.gen_task, &partition.noisy)?;
        let c = self.subset_sum(self.losses.disc_task, &partition.clean)?;
        let total = match (w, c) {
            (Some(w), Some(c)) => self.tape.add(w, c)?,
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => unreachable!("batch is non-empty"),
        };
        Ok(self.tape.scale(total, 1.0 / b as f64))
    }
}

/// θ-gradient of the routed loss.
pub fn hybrid_backbone_gradients(graph: &mut StepGraph, partition: &Partition) -> Result<Gradients> {
    let loss = graph.routed_loss(partition)?;
    graph.tape().backward(loss, GroupSet::THETA)
}

/// γ from `O_d(B)` and β from `O_g(B)`, independent of any partition.
pub fn head_gradients(graph: &mut StepGraph) -> Result<Gradients> {
    let od = graph.disc_batch_objective()?;
    let og = graph.gen_batch_objective()?;
    let gamma = graph.tape().backward(od, GroupSet::GAMMA)?;
    let beta = graph.tape().backward(og, GroupSet::BETA)?;
    gamma.merge(beta)
}

/// Gradients for every group `mode` updates; untouched groups are absent.
pub fn mode_gradients(graph: &mut StepGraph, mode: Mode, partition: &Partition) -> Result<Gradients> {
    match mode {
        Mode::Hybrid => hybrid_backbone_gradients(graph, partition)?.merge(head_gradients(graph)?),
        Mode::DiscOnly => {
            let od = graph.disc_batch_objective()?;
            graph.tape().backward(od, GroupSet::THETA.union(GroupSet::GAMMA))
        }
        Mode::GenOnly => {
            let lg = graph.gen_task_objective()?;
            let og = graph.gen_batch_objective()?;
            let theta = graph.tape().backward(lg, GroupSet::THETA)?;
            theta.merge(graph.tape().backward(og, GroupSet::BETA)?)
        }
        Mode::StandardJoint => {
            let od = graph.disc_batch_objective()?;
            let lg = graph.gen_task_objective()?;
            let joint = graph.tape_mut().add(od, lg)?;
            let theta = graph.tape().backward(joint, GroupSet::THETA)?;
            theta.merge(head_gradients(graph)?)
        }
    }
}

/// Value of the routed loss, without recording anything.
pub fn routed_loss_value(report: &BatchLossReport, partition: &Partition) -> f64 {
    let w: f64 = partition.noisy.iter().map(|&i| report.gen_task[i]).sum();
    let c: f64 = partition.clean.iter().map(|&i| report.disc_task[i]).sum();
    (w + c) / report.len() as f64
}

/// Applies accumulated parameter gradients.
pub trait Optimizer {
    /// Updates every parameter that currently holds a gradient.
    fn step(&mut self, store: &mut ParamStore) -> Result<()>;
    fn learning_rate(&self) -> f64;
}

/// Plain gradient descent, `p ← p − η g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter_mut() {
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (v, g) in p.tensor.values_mut().iter_mut().zip(g) {
                *v -= self.lr * g;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Adam moment accumulators keyed by parameter; shapes mirror the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub moments: BTreeMap<ParamId, Moments>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: OptimizerState::default(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (id, p) in store.iter_mut() {
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let n = g.len();
            let mo = self.state.moments.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            if mo.m.len() != n {
                return Err(Error::invalid(format!("optimizer state for `{}` has the wrong size", p.name)));
            }
            mo.step += 1;
            let c1 = 1.0 - self.beta1.powi(mo.step as i32);
            let c2 = 1.0 - self.beta2.powi(mo.step as i32);
            for (k, v) in p.tensor.values_mut().iter_mut().enumerate() {
                mo.m[k] = self.beta1 * mo.m[k] + (1.0 - self.beta1) * g[k];
                mo.v[k] = self.beta2 * mo.v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = mo.m[k] / c1;
                let v_hat = mo.v[k] / c2;
                *v -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: BatchLossReport,
    pub ranked: Vec<RankedDiff>,
    pub partition: Partition,
    pub gradients: Gradients,
}

/// One forward pass, detection, routed gradients and one optimizer update.
///
/// Detection runs in every mode so that traces are comparable; only
/// [`Mode::Hybrid`] lets the partition influence the update.
pub fn ablation_step(
    model: &mut GridModel,
    batch: &Batch,
    mode: Mode,
    lambda: LambdaSpec,
    eps: &Tensor,
    optimizer: &mut dyn Optimizer,
) -> Result<StepOutcome> {
    let mut graph = StepGraph::build(model, batch, eps)?;
    let ranked = rank_loss_differences(graph.report())?;
    let partition = partition_batch(&ranked, lambda.resolve(batch.len()))?;
    let gradients = mode_gradients(&mut graph, mode, &partition)?;
    let store = model.store_mut();
    store.zero_grads();
    gradients.accumulate_into(store)?;
    optimizer.step(store)?;
    store.zero_grads();
    Ok(StepOutcome {
        report: graph.report,
        ranked,
        partition,
        gradients,
    })
}

pub fn train_step(
    model: &mut GridModel,
    batch: &Batch,
    lambda: LambdaSpec,
    eps: &Tensor,
    optimizer: &mut dyn Optimizer,
) -> Result<StepOutcome> {
    ablation_step(model, batch, Mode::Hybrid, lambda, eps, optimizer)
}
