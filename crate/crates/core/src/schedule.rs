//! Losses and the three-stage training procedure.
//!
//! 1. Train backbone and gates together with cross-entropy.
//! 2. Repeatedly: freeze a copy of the model as teacher, sum marks over the
//!    training set, prune the lowest-scoring blocks, then retrain with
//!    cross-entropy plus `λ·KL(teacher ‖ student)` at temperature `τ`.
//! 3. Fix every surviving block (gates bypassed) and fine-tune with
//!    cross-entropy.
//!
//! The learning rate starts at `α`, is multiplied by a factor on entering
//! stages 2 and 3, and within each stage-2 iteration is reset and decayed once
//! two thirds of the way through. Momentum buffers are cleared at every stage
//! and iteration boundary.

use std::fmt;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Tape, Var};
use crate::checkpoint::Phase;
use crate::compact::CompactModel;
use crate::data::{batches, epoch_rng, Dataset};
use crate::error::{Error, Result};
use crate::netcore::{GateMask, GatedNetwork};
use crate::optim::{apply_bn_updates, Sgd, SgdConfig};
use crate::params::ParamStore;
use crate::pruner::{mark_dump, pruning_loop, MarkLedger, PruneDriver, PruneState, PruningSummary};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEpochs {
    pub stage1: usize,
    /// Per pruning iteration.
    pub stage2: usize,
    pub stage3: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f32,
    pub stage2_factor: f32,
    pub stage3_factor: f32,
    /// Epoch within each stage-2 iteration at which the rate is decayed;
    /// defaults to two thirds of the iteration.
    #[serde(default)]
    pub stage2_decay_epoch: Option<usize>,
    pub stage2_decay_factor: f32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            stage2_factor: 0.1,
            stage3_factor: 0.1,
            stage2_decay_epoch: None,
            stage2_decay_factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn stage2_decay_at(&self, stage2_epochs: usize) -> usize {
        self.stage2_decay_epoch.unwrap_or(stage2_epochs * 2 / 3)
    }

    /// Rate for 0-based `epoch` within `stage`.
    pub fn lr(&self, stage: u8, epoch: usize, stage2_epochs: usize) -> f32 {
        match stage {
            1 => self.initial,
            2 => {
                let base = self.initial * self.stage2_factor;
                let d = self.stage2_decay_at(stage2_epochs);
                if d > 0 && epoch >= d {
                    base * self.stage2_decay_factor
                } else {
                    base
                }
            }
            _ => self.initial * self.stage2_factor * self.stage3_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: StageEpochs,
    pub lr: LrSchedule,
    pub sgd: SgdConfig,
    pub gamma: f64,
    /// Blocks pruned per iteration; `None` spreads the work over about three
    /// iterations.
    #[serde(default)]
    pub k: Option<usize>,
    pub tau: f32,
    /// Distillation weight; `None` means `τ²`.
    #[serde(default)]
    pub lambda: Option<f32>,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
}

impl TrainConfig {
    /// Full-length schedule: 60 / 30 per iteration / 60 epochs.
    pub fn paper() -> Self {
        Self {
            epochs: StageEpochs {
                stage1: 60,
                stage2: 30,
                stage3: 60,
            },
            lr: LrSchedule::default(),
            sgd: SgdConfig::default(),
            gamma: 0.4,
            k: None,
            tau: 3.0,
            lambda: None,
            batch_size: 128,
            seed: 0,
            augment: true,
        }
    }

    /// Short schedule for laptops and CI: 5 / 3 / 5 epochs, no augmentation.
    pub fn desk() -> Self {
        Self {
            epochs: StageEpochs {
                stage1: 5,
                stage2: 3,
                stage3: 5,
            },
            batch_size: 32,
            augment: false,
            ..Self::paper()
        }
    }

    pub fn lambda(&self) -> f32 {
        let l = self.lambda.unwrap_or(self.tau * self.tau);
        debug_assert!(self.lambda.is_some() || l == self.tau * self.tau);
        l
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("pruning ratio {} outside [0, 1)", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.k == Some(0) {
            return Err(Error::Config("blocks per iteration must be at least 1".into()));
        }
        if !(self.lr.initial > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.lambda.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::Config("distillation weight must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_logits(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.batch() != labels.len() {
        return Err(Error::Contract(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let c = logits.shape()[1];
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {y} outside {c} classes")));
    }
    Ok(())
}

/// Batch-mean cross-entropy.
pub fn loss_stage1(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    check_logits(logits, labels)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, labels);
    Ok(tape.value(ce).item())
}

/// Batch-mean `KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn loss_kd(student: &Tensor, teacher: &Tensor, tau: f32) -> Result<f32> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(Error::Contract(format!(
            "student {:?} and teacher {:?} logits differ in shape",
            student.shape(),
            teacher.shape()
        )));
    }
    if !student.all_finite() || !teacher.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let kd = tape.kl_distill(s, teacher, tau);
    Ok(tape.value(kd).item())
}

pub fn loss_stage2(ce: f32, kd: f32, lambda: f32) -> f32 {
    ce + lambda * kd
}

/// Records the stage-2 objective on `tape`; returns `(total, ce, kd)`.
pub fn stage2_objective(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    teacher: &Tensor,
    tau: f32,
    lambda: f32,
) -> (Var, Var, Var) {
    let ce = tape.cross_entropy(logits, labels);
    let kd = tape.kl_distill(logits, teacher, tau);
    let weighted = tape.scale(kd, lambda);
    (tape.add(ce, weighted), ce, kd)
}

/// Anything with a parameter store and a logits forward.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn logits(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var>;
}

/// A gated network together with its current mask.
#[derive(Debug, Clone)]
pub struct MaskedNetwork {
    pub net: GatedNetwork,
    pub mask: GateMask,
}

impl MaskedNetwork {
    /// Fresh mask: exempt blocks fixed, all others gate-controlled.
    pub fn new(net: GatedNetwork) -> Self {
        let mask = GateMask::initial(net.spec());
        Self { net, mask }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.infer(x, &self.mask)?.0)
    }
}

impl Trainable for MaskedNetwork {
    fn params(&self) -> &ParamStore {
        self.net.store()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.net.store_mut()
    }

    fn logits(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.net.forward(tape, x, &self.mask, mode)?.logits)
    }
}

impl Trainable for CompactModel {
    fn params(&self) -> &ParamStore {
        self.store()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.store_mut()
    }

    fn logits(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        self.backbone.forward(tape, x, mode)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based global epoch counter.
    pub epoch: u64,
    pub stage: u8,
    pub iter: usize,
    pub lr: f32,
    pub loss_ce: f32,
    pub loss_kd: Option<f32>,
    pub accuracy: f64,
    pub unpruned: usize,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} stage={} iter={} lr={:.6} loss_ce={:.6} loss_kd={} accuracy={:.4} unpruned={}",
            self.epoch,
            self.stage,
            self.iter,
            self.lr,
            self.loss_ce,
            self.loss_kd.map_or_else(|| "-".into(), |v| format!("{v:.6}")),
            self.accuracy,
            self.unpruned
        )
    }
}

/// Side effects of a run: metrics lines, mark dumps and checkpoints.
pub trait Observer {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_marks(&mut self, _iter: usize, _dump: &str) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _phase: Phase, _model: &MaskedNetwork, _ledger: Option<&MarkLedger>) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NoObserver;

impl Observer for NoObserver {}

/// Mutable state shared by the stages: data, config and counters.
pub struct TrainContext<'a> {
    pub cfg: TrainConfig,
    pub train: &'a Dataset,
    /// Used for the per-epoch accuracy column.
    pub eval: &'a Dataset,
    pub epochs_done: u64,
    pub records: Vec<EpochRecord>,
    sgd: Sgd,
}

impl<'a> TrainContext<'a> {
    pub fn new(cfg: TrainConfig, train: &'a Dataset, eval: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let sgd = Sgd::new(cfg.sgd);
        Ok(Self {
            cfg,
            train,
            eval,
            epochs_done: 0,
            records: Vec::new(),
            sgd,
        })
    }

    /// Learning rates of every recorded epoch, in order.
    pub fn lr_trace(&self) -> Vec<f32> {
        self.records.iter().map(|r| r.lr).collect()
    }

    /// One pass over the training set. With a teacher, the objective adds the
    /// weighted distillation term. Returns mean `(ce, kd)`.
    pub fn train_epoch<M: Trainable>(
        &mut self,
        model: &mut M,
        lr: f32,
        teacher: Option<&MaskedNetwork>,
    ) -> Result<(f32, Option<f32>)> {
        let order = batches(self.train.len(), self.cfg.batch_size, self.cfg.seed, self.epochs_done);
        let mut aug = epoch_rng(self.cfg.seed, self.epochs_done, 1);
        let (tau, lambda) = (self.cfg.tau, self.cfg.lambda());
        let (mut ce_sum, mut kd_sum) = (0.0f64, 0.0f64);
        for idx in &order {
            let (x, labels) = self.train.batch_tensor(idx, self.cfg.augment.then_some(&mut aug));
            let teacher_logits = teacher.map(|t| t.infer(&x)).transpose()?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = model.logits(&mut tape, xv, Mode::Train)?;
            let (loss, ce, kd) = match &teacher_logits {
                Some(t) => {
                    let (total, ce, kd) = stage2_objective(&mut tape, logits, &labels, t, tau, lambda);
                    (total, ce, Some(kd))
                }
                None => {
                    let ce = tape.cross_entropy(logits, &labels);
                    (ce, ce, None)
                }
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {value} in epoch {}",
                    self.epochs_done + 1
                )));
            }
            let n = labels.len() as f64;
            ce_sum += tape.value(ce).item() as f64 * n;
            if let Some(kd) = kd {
                kd_sum += tape.value(kd).item() as f64 * n;
            }
            let grads = tape.backward(loss);
            let updates = tape.take_bn_updates();
            let store = model.params_mut();
            apply_bn_updates(store, &updates);
            self.sgd.step(store, &grads, lr);
        }
        self.epochs_done += 1;
        let n = self.train.len() as f64;
        Ok(((ce_sum / n) as f32, teacher.map(|_| (kd_sum / n) as f32)))
    }

    pub(crate) fn epoch_and_record<M: Trainable>(
        &mut self,
        model: &mut M,
        (stage, iter, e): (u8, usize, usize),
        unpruned: usize,
        teacher: Option<&MaskedNetwork>,
        obs: &mut dyn Observer,
    ) -> Result<()> {
        let lr = self.cfg.lr.lr(stage, e, self.cfg.epochs.stage2);
        let (loss_ce, loss_kd) = self.train_epoch(model, lr, teacher)?;
        let accuracy = evaluate(model, self.eval, self.cfg.batch_size)?;
        let rec = EpochRecord {
            epoch: self.epochs_done,
            stage,
            iter,
            lr,
            loss_ce,
            loss_kd,
            accuracy,
            unpruned,
        };
        info!("{rec}");
        obs.on_epoch(&rec)?;
        self.records.push(rec);
        Ok(())
    }

    fn phase(&self, stage: u8, iter: usize) -> Phase {
        Phase {
            stage,
            iter,
            epochs_done: self.epochs_done,
        }
    }
}

/// Top-1 accuracy in eval mode, in `[0, 1]`. An empty set scores 0.
pub fn evaluate<M: Trainable>(model: &M, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch_tensor(chunk, None);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = model.logits(&mut tape, xv, Mode::Eval)?;
        let l = tape.value(logits);
        if l.shape()[1] != data.num_classes {
            return Err(Error::Contract(format!(
                "model predicts {} classes, dataset has {}",
                l.shape()[1],
                data.num_classes
            )));
        }
        correct += predictions(l).iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Arg-max per row, lowest index on ties.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    logits
        .data()
        .chunks(logits.shape()[1])
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Eval-mode sweep over `data` summing the marks of every gate-controlled
/// block. No parameters change.
pub fn accumulate_marks(model: &MaskedNetwork, data: &Dataset, batch_size: usize) -> Result<MarkLedger> {
    let mut ledger = MarkLedger::new(&model.mask);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch_tensor(chunk, None);
        let (_, marks) = model.net.infer(&x, &model.mask)?;
        ledger.accumulate(&marks)?;
    }
    Ok(ledger)
}

/// Stage 1: `E1` epochs of cross-entropy with gates blending every
/// non-exempt block.
pub fn run_stage1(model: &mut MaskedNetwork, ctx: &mut TrainContext<'_>, obs: &mut dyn Observer) -> Result<()> {
    if model.mask.states().iter().any(|&s| s == crate::netcore::BlockState::Pruned) {
        return Err(Error::Contract("stage 1 starts from an unpruned network".into()));
    }
    ctx.sgd.reset();
    let unpruned = model.mask.unpruned_count();
    for e in 0..ctx.cfg.epochs.stage1 {
        ctx.epoch_and_record(model, (1, 0, e), unpruned, None, obs)?;
    }
    obs.on_checkpoint(ctx.phase(1, 0), model, None)
}

struct Stage2Driver<'m, 'c, 'd, 'o> {
    model: &'m mut MaskedNetwork,
    ctx: &'c mut TrainContext<'d>,
    obs: &'o mut dyn Observer,
    teacher: Option<MaskedNetwork>,
    ledger: Option<MarkLedger>,
}

impl PruneDriver for Stage2Driver<'_, '_, '_, '_> {
    fn ledger(&mut self, iter: usize, mask: &GateMask) -> Result<MarkLedger> {
        debug_assert_eq!(mask, &self.model.mask);
        self.teacher = Some(self.model.clone());
        let ledger = accumulate_marks(self.model, self.ctx.train, self.ctx.cfg.batch_size)?;
        self.obs.on_marks(iter, &mark_dump(self.model.net.spec(), mask, &ledger))?;
        self.ledger = Some(ledger.clone());
        Ok(ledger)
    }

    fn after_prune(&mut self, iter: usize, state: &PruneState, pruned: &[usize]) -> Result<()> {
        info!("iteration {iter}: pruned blocks {pruned:?}");
        self.model.mask = state.mask.clone();
        let teacher = self.teacher.take().expect("teacher captured before pruning");
        self.ctx.sgd.reset();
        let unpruned = self.model.mask.unpruned_count();
        for e in 0..self.ctx.cfg.epochs.stage2 {
            self.ctx
                .epoch_and_record(self.model, (2, iter, e), unpruned, Some(&teacher), self.obs)?;
        }
        self.obs
            .on_checkpoint(self.ctx.phase(2, iter), self.model, self.ledger.as_ref())
    }
}

/// Stage 2: prune and self-distill until `floor(γ·N)` blocks are gone.
/// Iterations are numbered from `first_iter`.
pub fn run_stage2(
    model: &mut MaskedNetwork,
    ctx: &mut TrainContext<'_>,
    obs: &mut dyn Observer,
    first_iter: usize,
) -> Result<PruningSummary> {
    let mut state = PruneState::new(model.mask.clone(), ctx.cfg.gamma, ctx.cfg.k)?;
    let mut driver = Stage2Driver {
        model,
        ctx,
        obs,
        teacher: None,
        ledger: None,
    };
    pruning_loop(&mut state, &mut driver, first_iter)
}

/// Stage 3: fix every surviving block and fine-tune with cross-entropy.
pub fn run_stage3(model: &mut MaskedNetwork, ctx: &mut TrainContext<'_>, obs: &mut dyn Observer) -> Result<()> {
    model.mask.fix_unpruned();
    ctx.sgd.reset();
    let unpruned = model.mask.unpruned_count();
    for e in 0..ctx.cfg.epochs.stage3 {
        ctx.epoch_and_record(model, (3, 0, e), unpruned, None, obs)?;
    }
    obs.on_checkpoint(ctx.phase(3, 0), model, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub pruning: PruningSummary,
    /// Eval accuracy at the end of the last pruning iteration.
    pub accuracy_after_pruning: Option<f64>,
    pub final_accuracy: f64,
}

/// Runs whatever stages remain after `from` (the phase of the checkpoint the
/// model was loaded from; `Phase::default()` for a fresh model).
pub fn run_pipeline(
    model: &mut MaskedNetwork,
    ctx: &mut TrainContext<'_>,
    obs: &mut dyn Observer,
    from: Phase,
) -> Result<RunSummary> {
    ctx.epochs_done = from.epochs_done;
    if from.stage < 1 {
        run_stage1(model, ctx, obs)?;
    }
    let mut pruning = PruningSummary::default();
    let mut accuracy_after_pruning = None;
    if from.stage < 3 {
        let first_iter = if from.stage == 2 { from.iter + 1 } else { 0 };
        pruning = run_stage2(model, ctx, obs, first_iter)?;
        if !pruning.iterations.is_empty() {
            accuracy_after_pruning = Some(evaluate(model, ctx.eval, ctx.cfg.batch_size)?);
        }
        run_stage3(model, ctx, obs)?;
    }
    let final_accuracy = evaluate(model, ctx.eval, ctx.cfg.batch_size)?;
    Ok(RunSummary {
        pruning,
        accuracy_after_pruning,
        final_accuracy,
    })
}

/// Baseline with the same budget: the plain network (every block fixed)
/// trained with cross-entropy over `lrs`, one epoch per entry. Momentum is
/// cleared wherever `boundaries` marks the start of a new phase.
pub fn train_control(
    net: GatedNetwork,
    ctx: &mut TrainContext<'_>,
    lrs: &[f32],
    boundaries: &[bool],
) -> Result<(MaskedNetwork, f64)> {
    let mask = GateMask::all_fixed(net.spec());
    let mut model = MaskedNetwork { net, mask };
    for (i, &lr) in lrs.iter().enumerate() {
        if boundaries.get(i).copied().unwrap_or(i == 0) {
            ctx.sgd.reset();
        }
        ctx.train_epoch(&mut model, lr, None)?;
    }
    let acc = evaluate(&model, ctx.eval, ctx.cfg.batch_size)?;
    Ok((model, acc))
}

/// Learning rates and phase starts of a finished run, for [`train_control`].
pub fn budget_of(records: &[EpochRecord]) -> (Vec<f32>, Vec<bool>) {
    let lrs = records.iter().map(|r| r.lr).collect();
    let starts = records
        .iter()
        .enumerate()
        .map(|(i, r)| i == 0 || (records[i - 1].stage, records[i - 1].iter) != (r.stage, r.iter))
        .collect();
    (lrs, starts)
}
