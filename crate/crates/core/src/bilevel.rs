//! The distillation training loop: inner updates of the student on the
//! fused loss, outer updates of the fusion network on validation
//! cross-entropy through a one-step-unrolled hypergradient, plus the plain
//! cross-entropy trainer used for teachers and the scalar oracle that
//! verifies the hypergradient solver against a closed form.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    self, accuracy, discrepancy_grouping, early_stop, AlphaRecord, DiscrepancyGrouping,
    PARTITIONS,
};
use crate::fusion::{
    annealed_ratio, class_wise_ratio, combine, tgeo_ratio, wls_ratio, RatioPolicy,
};
use crate::geometry::{
    build_class_averages, build_feature, student_slice_signs, ClassAverageTable, FeatureMode,
    GeometryFeature, PredictionTriplet,
};
use crate::numcore::loss::{ce_loss_class, kd_loss, softmax_temp, LossValue};
use crate::numcore::net::{
    backward_from_trace, forward, forward_trace, ModelParams, Optimizer, OptimizerKind,
};
use crate::numcore::tensor::{argmax, Tensor};

/// How the outer step approximates the hypergradient of validation CE with
/// respect to the fusion-network weights through one unrolled inner step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HypergradMode {
    /// Keeps the mixed derivative but reads the validation gradient at the
    /// pre-step student, dropping the curvature correction in theta.
    FirstOrder,
    /// Reads the validation gradient after a virtual inner step and forms
    /// the mixed derivative by central finite differences around theta.
    UnrolledFd,
}

impl HypergradMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first_order" => Ok(HypergradMode::FirstOrder),
            "unrolled_fd" => Ok(HypergradMode::UnrolledFd),
            other => Err(Error::Config(format!(
                "unknown hypergrad mode {other:?} (expected first_order or unrolled_fd)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HypergradMode::FirstOrder => "first_order",
            HypergradMode::UnrolledFd => "unrolled_fd",
        }
    }
}

/// Per-step bookkeeping appended by the training loop.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub train_loss: f64,
    pub val_loss: f64,
    pub mean_alpha: f64,
}

/// Student and fusion-network parameters plus the step counter and learning
/// rates; the fusion network is absent for policies that do not learn.
#[derive(Debug, Clone)]
pub struct BilevelState {
    pub theta: ModelParams,
    pub omega: Option<ModelParams>,
    pub step: u64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub history: Vec<StepRecord>,
}

impl BilevelState {
    pub fn new(theta: ModelParams, omega: Option<ModelParams>, inner_lr: f64, outer_lr: f64) -> Result<Self> {
        if !(inner_lr > 0.0) {
            return Err(Error::Config(format!("inner learning rate must be positive, got {inner_lr}")));
        }
        if outer_lr < 0.0 {
            return Err(Error::Config(format!("outer learning rate must be nonnegative, got {outer_lr}")));
        }
        Ok(BilevelState {
            theta,
            omega,
            step: 0,
            inner_lr,
            outer_lr,
            history: Vec::new(),
        })
    }
}

/// Everything derived once from the frozen teacher over the training set:
/// logits, temperature-1 probabilities, per-sample teacher cross-entropy,
/// per-class teacher accuracy, and the class-average prediction table.
pub struct DistillContext {
    pub tau: f64,
    pub teacher_logits: Tensor,
    pub teacher_probs: Tensor,
    pub teacher_ce: Vec<f64>,
    pub class_accuracy: Vec<f64>,
    /// Absent when some class has no training samples; the learned policy
    /// fails fast on that, other policies run without the table.
    pub class_averages: Option<ClassAverageTable>,
}

impl DistillContext {
    pub fn new(teacher: &ModelParams, train: &Dataset, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        if teacher.input_dim() != train.dim() {
            return Err(Error::Config(format!(
                "teacher expects {} inputs but data has {} features",
                teacher.input_dim(),
                train.dim()
            )));
        }
        if teacher.output_dim() != train.classes {
            return Err(Error::Config(format!(
                "teacher emits {} classes but data has {}",
                teacher.output_dim(),
                train.classes
            )));
        }
        let n = train.len();
        let c = train.classes;
        let mut logits = Vec::with_capacity(n * c);
        let mut probs = Vec::with_capacity(n * c);
        let mut teacher_ce = Vec::with_capacity(n);
        let mut class_hits = vec![0usize; c];
        let mut class_counts = vec![0usize; c];
        for i in 0..n {
            let z = forward(teacher, train.sample(i))?;
            let p = softmax_temp(&z, 1.0)?;
            teacher_ce.push(ce_loss_class(&z, train.labels[i])?.value);
            class_counts[train.labels[i]] += 1;
            if argmax(&p) == train.labels[i] {
                class_hits[train.labels[i]] += 1;
            }
            logits.extend(z);
            probs.extend(p);
        }
        let class_accuracy: Vec<f64> = class_hits
            .iter()
            .zip(&class_counts)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect();
        let teacher_probs = Tensor::from_vec(vec![n, c], probs)?;
        let class_averages = if class_counts.iter().all(|&t| t > 0) {
            Some(build_class_averages(&teacher_probs, &train.labels)?)
        } else {
            None
        };
        Ok(DistillContext {
            tau,
            teacher_logits: Tensor::from_vec(vec![n, c], logits)?,
            teacher_probs,
            teacher_ce,
            class_accuracy,
            class_averages,
        })
    }
}

/// Runtime policy with config-level parameters resolved.
enum PolicyKind {
    Fixed { alpha: f64 },
    Annealed { horizon: u64 },
    ClassWise,
    Wls { gain: f64 },
    Tgeo { mode: FeatureMode },
}

impl PolicyKind {
    fn is_tgeo(&self) -> bool {
        matches!(self, PolicyKind::Tgeo { .. })
    }
}

struct SampleEval {
    kd: LossValue,
    gt: LossValue,
    alpha: f64,
    feature: Option<GeometryFeature>,
    student_probs: Vec<f64>,
}

/// Losses, fusion ratio, and (for the learned policy) the geometric feature
/// for one sample at the current student.
fn eval_sample(
    state: &BilevelState,
    kind: &PolicyKind,
    ctx: &DistillContext,
    train: &Dataset,
    i: usize,
    step: u64,
) -> Result<SampleEval> {
    let trace = forward_trace(&state.theta, train.sample(i))?;
    let z_s = trace.output();
    let kd = kd_loss(z_s, ctx.teacher_logits.row(i), ctx.tau)?;
    let gt = ce_loss_class(z_s, train.labels[i])?;
    let student_probs = softmax_temp(z_s, 1.0)?;
    let (alpha, feature) = match kind {
        PolicyKind::Fixed { alpha } => (*alpha, None),
        PolicyKind::Annealed { horizon } => (annealed_ratio(step, *horizon)?, None),
        PolicyKind::ClassWise => (class_wise_ratio(&ctx.class_accuracy, train.labels[i])?, None),
        PolicyKind::Wls { gain } => (wls_ratio(gt.value, ctx.teacher_ce[i], *gain)?, None),
        PolicyKind::Tgeo { mode } => {
            let omega = state
                .omega
                .as_ref()
                .ok_or_else(|| Error::Config("learned policy without a fusion net".into()))?;
            let table = ctx.class_averages.as_ref().ok_or_else(|| {
                Error::Config("a training class has no samples; cannot build class averages".into())
            })?;
            let triplet = PredictionTriplet::new(
                student_probs.clone(),
                ctx.teacher_probs.row(i).to_vec(),
                train.labels[i],
            )?;
            let feat = build_feature(&triplet, table, *mode)?;
            (tgeo_ratio(omega, &feat)?, Some(feat))
        }
    };
    Ok(SampleEval {
        kd,
        gt,
        alpha,
        feature,
        student_probs,
    })
}

/// Accumulates the mean fused-loss gradient over a batch into `grads` and
/// returns (mean loss, per-sample alphas). With the stop-gradient flag off,
/// the path from the student probabilities through the geometric feature and
/// the fusion network back into the student logits is included.
#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    state: &BilevelState,
    batch: &[usize],
    train: &Dataset,
    ctx: &DistillContext,
    kind: &PolicyKind,
    stop_grad_delta: bool,
    grads: &mut ModelParams,
    alphas: &mut Vec<f64>,
) -> Result<f64> {
    let b = batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        let trace = forward_trace(&state.theta, train.sample(i))?;
        let ev = eval_sample(state, kind, ctx, train, i, state.step)?;
        let combined = combine(ev.alpha, &ev.kd, &ev.gt)?;
        if !combined.value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss on sample {i}; aborting"
            )));
        }
        total += combined.value;
        alphas.push(ev.alpha);
        let mut seed: Vec<f64> = combined
            .grad_logits
            .as_slice()
            .iter()
            .map(|g| g / b)
            .collect();
        if !stop_grad_delta {
            if let (Some(feat), Some(omega)) = (&ev.feature, state.omega.as_ref()) {
                // d(loss)/d(alpha) flows through the fusion net into the
                // feature slices built from S, then through the softmax.
                let dl_dalpha = (ev.kd.value - ev.gt.value) / b;
                let fw = forward_trace(omega, feat.delta.as_slice())?;
                let (_, dfeat) = backward_from_trace(omega, &fw, &[1.0])?;
                let c = train.classes;
                let mut w = vec![0.0; c];
                for (slice, sign) in student_slice_signs(feat.mode) {
                    for j in 0..c {
                        w[j] += sign * dfeat[slice * c + j];
                    }
                }
                let s = &ev.student_probs;
                let wdots: f64 = w.iter().zip(s).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    seed[k] += dl_dalpha * s[k] * (w[k] - wdots);
                }
            }
        }
        let (g, _) = backward_from_trace(&state.theta, &trace, &seed)?;
        grads.axpy(1.0, &g);
    }
    Ok(total / b)
}

/// One student update on the fused loss: theta moves by the optimizer's rule
/// on the mean batch gradient; the fusion net is untouched. Returns the mean
/// loss and the per-sample fusion ratios used.
#[allow(clippy::too_many_arguments)]
fn inner_step(
    state: &mut BilevelState,
    batch: &[usize],
    train: &Dataset,
    ctx: &DistillContext,
    kind: &PolicyKind,
    stop_grad_delta: bool,
    opt: &mut Optimizer,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let mut grads = state.theta.zeros_like();
    let mut alphas = Vec::with_capacity(batch.len());
    let loss = batch_gradient(
        state,
        batch,
        train,
        ctx,
        kind,
        stop_grad_delta,
        &mut grads,
        &mut alphas,
    )?;
    opt.apply(&mut state.theta, &grads);
    if !state.theta.is_finite() {
        return Err(Error::Numeric("student parameters became non-finite".into()));
    }
    Ok((loss, alphas))
}

/// Mean validation cross-entropy and its gradient with respect to theta.
fn val_ce_grad(
    theta: &ModelParams,
    val: &Dataset,
    ids: &[usize],
) -> Result<(f64, ModelParams)> {
    let mut grads = theta.zeros_like();
    let mut total = 0.0;
    let b = ids.len() as f64;
    for &i in ids {
        let trace = forward_trace(theta, val.sample(i))?;
        let gt = ce_loss_class(trace.output(), val.labels[i])?;
        total += gt.value;
        let seed: Vec<f64> = gt.grad_logits.as_slice().iter().map(|g| g / b).collect();
        let (g, _) = backward_from_trace(theta, &trace, &seed)?;
        grads.axpy(1.0, &g);
    }
    Ok((total / b, grads))
}

/// The mixed second derivative of the training loss contracted with a
/// direction v, pushed through the fusion net: the exact route, using
/// per-sample student gradients of (KD - GT).
fn mixed_hypergrad_exact(
    state: &BilevelState,
    batch: &[usize],
    train: &Dataset,
    ctx: &DistillContext,
    kind: &PolicyKind,
    v: &ModelParams,
) -> Result<ModelParams> {
    let omega = state.omega.as_ref().unwrap();
    let mut ghat = omega.zeros_like();
    let b = batch.len() as f64;
    for &i in batch {
        let trace = forward_trace(&state.theta, train.sample(i))?;
        let ev = eval_sample(state, kind, ctx, train, i, state.step)?;
        let seed: Vec<f64> = ev
            .kd
            .grad_logits
            .as_slice()
            .iter()
            .zip(ev.gt.grad_logits.as_slice())
            .map(|(k, g)| k - g)
            .collect();
        let (gdiff, _) = backward_from_trace(&state.theta, &trace, &seed)?;
        let coeff = gdiff.dot(v);
        let feat = ev.feature.as_ref().unwrap();
        let gomega = crate::numcore::net::backward(omega, feat.delta.as_slice(), &[1.0])?;
        ghat.axpy(-state.inner_lr * coeff / b, &gomega);
    }
    Ok(ghat)
}

/// Same contraction approximated by a central finite difference of the
/// training loss's omega-gradient at theta +- eps*v, the feature and ratio
/// factors frozen at the current student.
#[allow(clippy::too_many_arguments)]
fn mixed_hypergrad_fd(
    state: &BilevelState,
    batch: &[usize],
    train: &Dataset,
    ctx: &DistillContext,
    kind: &PolicyKind,
    v: &ModelParams,
    eps: f64,
) -> Result<ModelParams> {
    let omega = state.omega.as_ref().unwrap();
    let mut theta_plus = state.theta.clone();
    theta_plus.axpy(eps, v);
    let mut theta_minus = state.theta.clone();
    theta_minus.axpy(-eps, v);
    let mut ghat = omega.zeros_like();
    let b = batch.len() as f64;
    for &i in batch {
        let ev = eval_sample(state, kind, ctx, train, i, state.step)?;
        let feat = ev.feature.as_ref().unwrap();
        let loss_gap = |theta: &ModelParams| -> Result<f64> {
            let z = forward(theta, train.sample(i))?;
            let kd = kd_loss(&z, ctx.teacher_logits.row(i), ctx.tau)?;
            let gt = ce_loss_class(&z, train.labels[i])?;
            Ok(kd.value - gt.value)
        };
        let coeff = (loss_gap(&theta_plus)? - loss_gap(&theta_minus)?) / (2.0 * eps);
        let gomega = crate::numcore::net::backward(omega, feat.delta.as_slice(), &[1.0])?;
        ghat.axpy(-state.inner_lr * coeff / b, &gomega);
    }
    Ok(ghat)
}

/// One fusion-net update against validation cross-entropy. The student is
/// never modified; a cloned virtual step supplies the post-update
/// validation gradient when the mode asks for it. A zero validation
/// gradient makes the step a no-op.
#[allow(clippy::too_many_arguments)]
fn outer_step(
    state: &mut BilevelState,
    train_batch: &[usize],
    val_batch: &[usize],
    train: &Dataset,
    val: &Dataset,
    ctx: &DistillContext,
    kind: &PolicyKind,
    mode: HypergradMode,
    stop_grad_delta: bool,
    opt: &mut Optimizer,
) -> Result<()> {
    if train_batch.is_empty() || val_batch.is_empty() {
        return Err(Error::Config("empty batch in outer step".into()));
    }
    if state.omega.is_none() {
        return Ok(());
    }
    let ghat = match mode {
        HypergradMode::FirstOrder => {
            let (_, v) = val_ce_grad(&state.theta, val, val_batch)?;
            if v.l2_norm() == 0.0 {
                return Ok(());
            }
            mixed_hypergrad_exact(state, train_batch, train, ctx, kind, &v)?
        }
        HypergradMode::UnrolledFd => {
            // virtual plain-gradient inner step
            let mut grads = state.theta.zeros_like();
            let mut alphas = Vec::new();
            batch_gradient(
                state,
                train_batch,
                train,
                ctx,
                kind,
                stop_grad_delta,
                &mut grads,
                &mut alphas,
            )?;
            let mut theta_next = state.theta.clone();
            theta_next.axpy(-state.inner_lr, &grads);
            let (_, v) = val_ce_grad(&theta_next, val, val_batch)?;
            let norm = v.l2_norm();
            if norm == 0.0 {
                return Ok(());
            }
            let eps = 0.01 / norm;
            mixed_hypergrad_fd(state, train_batch, train, ctx, kind, &v, eps)?
        }
    };
    if !ghat.is_finite() {
        return Err(Error::Numeric("non-finite hypergradient; aborting".into()));
    }
    let omega = state.omega.as_mut().unwrap();
    opt.apply(omega, &ghat);
    if !omega.is_finite() {
        return Err(Error::Numeric("fusion-net parameters became non-finite".into()));
    }
    Ok(())
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_ce: f64,
    pub val_acc: f64,
    pub alpha_mean: f64,
    pub alpha_std: f64,
    /// Means over the four analysis partitions, ordered as eval::PARTITIONS.
    pub partition_alpha: [Option<f64>; 4],
    pub alpha_normal: Option<f64>,
    pub alpha_outlier: Option<f64>,
    pub batch_checksum: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub rows: Vec<EpochRow>,
    pub best_epoch: Option<u64>,
    pub stopped_early: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".into(),
    }
}

impl TrainingLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "epoch\ttrain_loss\tval_ce\tval_acc\talpha_mean\talpha_std\t\
             alpha_teacher_incorrect_large_st\talpha_teacher_incorrect_small_st\t\
             alpha_teacher_correct_large_st\talpha_teacher_correct_small_st\t\
             alpha_normal\talpha_outlier\tbatch_checksum\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:016x}\n",
                r.epoch,
                r.train_loss,
                r.val_ce,
                r.val_acc,
                r.alpha_mean,
                r.alpha_std,
                fmt_opt(r.partition_alpha[0]),
                fmt_opt(r.partition_alpha[1]),
                fmt_opt(r.partition_alpha[2]),
                fmt_opt(r.partition_alpha[3]),
                fmt_opt(r.alpha_normal),
                fmt_opt(r.alpha_outlier),
                r.batch_checksum,
            ));
        }
        out
    }
}

/// One per-sample fusion-ratio observation written at dump epochs.
#[derive(Debug, Clone, Copy)]
pub struct AlphaDumpRow {
    pub sample: usize,
    pub epoch: u64,
    pub alpha: f64,
    pub teacher_correct: bool,
    pub st: f64,
    pub is_outlier: bool,
}

pub fn alpha_dump_to_tsv(rows: &[AlphaDumpRow]) -> String {
    let mut out = String::from("sample\tepoch\talpha\tteacher_correct\tst_discrepancy\tis_outlier\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.sample,
            r.epoch,
            r.alpha,
            u8::from(r.teacher_correct),
            r.st,
            u8::from(r.is_outlier)
        ));
    }
    out
}

/// Final-student snapshot of each training sample's prediction triplet.
#[derive(Debug, Clone)]
pub struct TripletDumpRow {
    pub sample: usize,
    pub class: usize,
    pub is_outlier: bool,
    pub student_probs: Vec<f64>,
    pub teacher_probs: Vec<f64>,
}

pub fn triplet_dump_to_tsv(rows: &[TripletDumpRow]) -> String {
    let c = rows.first().map_or(0, |r| r.student_probs.len());
    let mut out = String::from("sample\tclass\tis_outlier");
    for j in 0..c {
        out.push_str(&format!("\ts{j}"));
    }
    for j in 0..c {
        out.push_str(&format!("\tt{j}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}", r.sample, r.class, u8::from(r.is_outlier)));
        for v in &r.student_probs {
            out.push_str(&format!("\t{v}"));
        }
        for v in &r.teacher_probs {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    out
}

/// Training-loop knobs shared by the plain and distillation trainers.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub patience: usize,
    pub early_stopping: bool,
}

/// Distillation-specific knobs on top of the student's `TrainSettings`.
#[derive(Debug, Clone)]
pub struct DistillSettings {
    pub student: TrainSettings,
    pub tau: f64,
    pub outer_optimizer: OptimizerKind,
    pub outer_lr: f64,
    pub hypergrad: HypergradMode,
    pub stop_grad_delta: bool,
    /// Dump per-sample ratios every this many epochs (the last executed
    /// epoch always dumps); 0 dumps only the last.
    pub alpha_dump_every: u64,
    /// Epoch whose student predictions form the triplet snapshot used for
    /// the discrepancy analysis; 0 takes the final epoch. Matching the
    /// motivation-experiment protocol, a preliminary snapshot keeps the
    /// partition membership independent of the ratios learned later.
    pub snapshot_epoch: u64,
}

pub struct DistillOutcome {
    /// Best-validation-accuracy snapshot.
    pub student: ModelParams,
    /// Parameters at the last executed epoch.
    pub final_student: ModelParams,
    pub omega: Option<ModelParams>,
    pub log: TrainingLog,
    pub alpha_dump: Vec<AlphaDumpRow>,
    pub triplet_dump: Vec<TripletDumpRow>,
}

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    ids
}

fn class_probs(theta: &ModelParams, data: &Dataset) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(data.len() * data.classes);
    for i in 0..data.len() {
        let z = forward(theta, data.sample(i))?;
        rows.extend(softmax_temp(&z, 1.0)?);
    }
    Tensor::from_vec(vec![data.len(), data.classes], rows)
}

/// Mean validation CE over the whole split (values only).
fn full_val_ce(theta: &ModelParams, val: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..val.len() {
        let z = forward(theta, val.sample(i))?;
        total += ce_loss_class(&z, val.labels[i])?.value;
    }
    Ok(total / val.len() as f64)
}

struct EpochSweep {
    alphas: Vec<f64>,
    teacher_correct: Vec<bool>,
    st: Vec<f64>,
    grouping: DiscrepancyGrouping,
}

/// End-of-epoch pass over the full training set with the current student and
/// fusion net: per-sample ratios plus the discrepancy grouping snapshot.
fn epoch_sweep(
    state: &BilevelState,
    train: &Dataset,
    ctx: &DistillContext,
    kind: &PolicyKind,
) -> Result<EpochSweep> {
    let mut alphas = Vec::with_capacity(train.len());
    let mut triplets = Vec::with_capacity(train.len());
    for i in 0..train.len() {
        let ev = eval_sample(state, kind, ctx, train, i, state.step)?;
        alphas.push(ev.alpha);
        triplets.push(PredictionTriplet::new(
            ev.student_probs,
            ctx.teacher_probs.row(i).to_vec(),
            train.labels[i],
        )?);
    }
    let grouping = discrepancy_grouping(&triplets)?;
    let teacher_correct = grouping.assignments.iter().map(|a| a.teacher_correct).collect();
    let st = grouping.assignments.iter().map(|a| a.st).collect();
    Ok(EpochSweep {
        alphas,
        teacher_correct,
        st,
        grouping,
    })
}

fn partition_means(sweep: &EpochSweep) -> [Option<f64>; 4] {
    let mut out = [None; 4];
    for (p, part) in PARTITIONS.iter().enumerate() {
        let vals: Vec<f64> = sweep
            .grouping
            .assignments
            .iter()
            .zip(&sweep.alphas)
            .filter(|(a, _)| part.contains(a, &sweep.grouping))
            .map(|(_, &al)| al)
            .collect();
        out[p] = eval::mean(&vals);
    }
    out
}

fn flag_means(alphas: &[f64], flags: &[bool]) -> (Option<f64>, Option<f64>) {
    let normal: Vec<f64> = alphas
        .iter()
        .zip(flags)
        .filter(|(_, &f)| !f)
        .map(|(&a, _)| a)
        .collect();
    let outlier: Vec<f64> = alphas
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f)
        .map(|(&a, _)| a)
        .collect();
    (eval::mean(&normal), eval::mean(&outlier))
}

/// Runs the full distillation loop: per batch one inner step, then (for the
/// learned policy) one outer step on a fresh validation batch. Logs one row
/// per epoch, dumps per-sample ratios at the configured cadence, stops early
/// when validation accuracy goes stale, and returns the best-accuracy
/// student.
pub fn train_distill(
    init_student: ModelParams,
    policy: &RatioPolicy,
    teacher: &ModelParams,
    train: &Dataset,
    val: &Dataset,
    settings: &DistillSettings,
    batch_rng: &mut ChaCha8Rng,
    val_rng: &mut ChaCha8Rng,
) -> Result<DistillOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("empty training or validation split".into()));
    }
    init_student.validate()?;
    teacher.validate()?;
    let ctx = DistillContext::new(teacher, train, settings.tau)?;
    let s = &settings.student;
    if s.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let batches_per_epoch = train.len().div_ceil(s.batch_size) as u64;
    let total_steps = (s.epochs * batches_per_epoch).max(1);
    let (kind, omega) = match policy {
        RatioPolicy::Fixed { alpha } => {
            crate::fusion::fixed_ratio(*alpha)?;
            (PolicyKind::Fixed { alpha: *alpha }, None)
        }
        RatioPolicy::Annealed { horizon } => (
            PolicyKind::Annealed {
                horizon: if *horizon == 0 { total_steps } else { *horizon },
            },
            None,
        ),
        RatioPolicy::ClassWise { class_accuracy } => {
            if !class_accuracy.is_empty() && class_accuracy.len() != train.classes {
                return Err(Error::Config(format!(
                    "class accuracy table has {} entries for {} classes",
                    class_accuracy.len(),
                    train.classes
                )));
            }
            // an empty table defers to the teacher accuracies in the context
            (PolicyKind::ClassWise, None)
        }
        RatioPolicy::Wls { gain } => {
            wls_ratio(0.0, 0.0, *gain)?;
            (PolicyKind::Wls { gain: *gain }, None)
        }
        RatioPolicy::Tgeo { omega, mode } => {
            (PolicyKind::Tgeo { mode: *mode }, Some(omega.clone()))
        }
    };
    if let (PolicyKind::Tgeo { mode }, Some(om)) = (&kind, omega.as_ref()) {
        if om.input_dim() != mode.feature_len(train.classes) {
            return Err(Error::Config(format!(
                "fusion net expects width {}, feature mode {} with {} classes gives {}",
                om.input_dim(),
                mode.name(),
                train.classes,
                mode.feature_len(train.classes)
            )));
        }
    }
    let mut state = BilevelState::new(init_student, omega, s.lr, settings.outer_lr)?;
    let mut inner_opt = Optimizer::new(s.optimizer, s.lr);
    let mut outer_opt = Optimizer::new(settings.outer_optimizer, settings.outer_lr);
    let mut log = TrainingLog::default();
    let mut alpha_dump = Vec::new();
    let mut best: (ModelParams, Option<u64>, f64) = (state.theta.clone(), None, f64::NEG_INFINITY);
    let mut acc_history = Vec::new();
    let mut snapshot_theta: Option<ModelParams> = None;

    for epoch in 1..=s.epochs {
        let order = shuffled_indices(train.len(), batch_rng);
        let mut checksum = FNV_OFFSET;
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(s.batch_size) {
            for &i in chunk {
                checksum = fnv1a(checksum, &(i as u64).to_le_bytes());
            }
            let (loss, alphas) =
                inner_step(&mut state, chunk, train, &ctx, &kind, settings.stop_grad_delta, &mut inner_opt)?;
            epoch_loss += loss * chunk.len() as f64;
            if kind.is_tgeo() && settings.outer_lr > 0.0 {
                let val_batch: Vec<usize> = (0..chunk.len())
                    .map(|_| val_rng.gen_range(0..val.len()))
                    .collect();
                outer_step(
                    &mut state,
                    chunk,
                    &val_batch,
                    train,
                    val,
                    &ctx,
                    &kind,
                    settings.hypergrad,
                    settings.stop_grad_delta,
                    &mut outer_opt,
                )?;
            }
            let mean_alpha = alphas.iter().sum::<f64>() / alphas.len() as f64;
            state.step += 1;
            state.history.push(StepRecord {
                train_loss: loss,
                val_loss: f64::NAN,
                mean_alpha,
            });
        }
        let train_loss = epoch_loss / train.len() as f64;

        let sweep = epoch_sweep(&state, train, &ctx, &kind)?;
        let val_probs = class_probs(&state.theta, val)?;
        let val_acc = accuracy(&val_probs, &val.labels)?;
        let val_ce = full_val_ce(&state.theta, val)?;
        if let Some(last) = state.history.last_mut() {
            last.val_loss = val_ce;
        }
        acc_history.push(val_acc);
        let stopping = s.early_stopping && early_stop(&acc_history, s.patience);
        let is_last = stopping || epoch == s.epochs;

        let (alpha_normal, alpha_outlier) = flag_means(&sweep.alphas, &train.is_outlier);
        log.rows.push(EpochRow {
            epoch,
            train_loss,
            val_ce,
            val_acc,
            alpha_mean: eval::mean(&sweep.alphas).unwrap_or(0.0),
            alpha_std: eval::std_dev(&sweep.alphas).unwrap_or(0.0),
            partition_alpha: partition_means(&sweep),
            alpha_normal,
            alpha_outlier,
            batch_checksum: checksum,
        });

        let dump_now =
            is_last || (settings.alpha_dump_every > 0 && epoch % settings.alpha_dump_every == 0);
        if dump_now {
            for i in 0..train.len() {
                alpha_dump.push(AlphaDumpRow {
                    sample: i,
                    epoch,
                    alpha: sweep.alphas[i],
                    teacher_correct: sweep.teacher_correct[i],
                    st: sweep.st[i],
                    is_outlier: train.is_outlier[i],
                });
            }
        }

        if val_acc > best.2 {
            best = (state.theta.clone(), Some(epoch), val_acc);
        }
        if epoch == settings.snapshot_epoch {
            snapshot_theta = Some(state.theta.clone());
        }
        if stopping {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = best.1;

    let snapshot = snapshot_theta.as_ref().unwrap_or(&state.theta);
    let mut triplet_dump = Vec::with_capacity(train.len());
    for i in 0..train.len() {
        let z = forward(snapshot, train.sample(i))?;
        triplet_dump.push(TripletDumpRow {
            sample: i,
            class: train.labels[i],
            is_outlier: train.is_outlier[i],
            student_probs: softmax_temp(&z, 1.0)?,
            teacher_probs: ctx.teacher_probs.row(i).to_vec(),
        });
    }

    Ok(DistillOutcome {
        student: best.0,
        final_student: state.theta.clone(),
        omega: state.omega,
        log,
        alpha_dump,
        triplet_dump,
    })
}

/// Plain cross-entropy training with the same batching, logging, early
/// stopping, and best-model selection as the distillation loop. Used for
/// teachers and as the reference arm for the policy-equivalence checks.
pub fn train_plain_ce(
    init: ModelParams,
    train: &Dataset,
    val: &Dataset,
    settings: &TrainSettings,
    batch_rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, TrainingLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("empty training or validation split".into()));
    }
    init.validate()?;
    if init.input_dim() != train.dim() || init.output_dim() != train.classes {
        return Err(Error::Config(format!(
            "model geometry {}->{} does not fit data {}x{} classes",
            init.input_dim(),
            init.output_dim(),
            train.dim(),
            train.classes
        )));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut theta = init;
    let mut opt = Optimizer::new(settings.optimizer, settings.lr);
    let mut log = TrainingLog::default();
    let mut best: (ModelParams, Option<u64>, f64) = (theta.clone(), None, f64::NEG_INFINITY);
    let mut acc_history = Vec::new();

    for epoch in 1..=settings.epochs {
        let order = shuffled_indices(train.len(), batch_rng);
        let mut checksum = FNV_OFFSET;
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            for &i in chunk {
                checksum = fnv1a(checksum, &(i as u64).to_le_bytes());
            }
            let b = chunk.len() as f64;
            let mut grads = theta.zeros_like();
            let mut loss = 0.0;
            for &i in chunk {
                let trace = forward_trace(&theta, train.sample(i))?;
                let gt = ce_loss_class(trace.output(), train.labels[i])?;
                if !gt.value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss on sample {i}")));
                }
                loss += gt.value;
                let seed: Vec<f64> = gt.grad_logits.as_slice().iter().map(|g| g / b).collect();
                let (g, _) = backward_from_trace(&theta, &trace, &seed)?;
                grads.axpy(1.0, &g);
            }
            opt.apply(&mut theta, &grads);
            epoch_loss += loss;
        }
        let val_probs = class_probs(&theta, val)?;
        let val_acc = accuracy(&val_probs, &val.labels)?;
        let val_ce = full_val_ce(&theta, val)?;
        acc_history.push(val_acc);
        log.rows.push(EpochRow {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_ce,
            val_acc,
            alpha_mean: 0.0,
            alpha_std: 0.0,
            partition_alpha: [None; 4],
            alpha_normal: None,
            alpha_outlier: None,
            batch_checksum: checksum,
        });
        if val_acc > best.2 {
            best = (theta.clone(), Some(epoch), val_acc);
        }
        if settings.early_stopping && early_stop(&acc_history, settings.patience) {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = best.1;
    Ok((best.0, log))
}

/// Records ready for `eval::fusion_ratio_report`, keyed by training-sample
/// index.
pub fn alpha_records(dump: &[AlphaDumpRow]) -> Vec<AlphaRecord> {
    dump.iter()
        .map(|r| AlphaRecord {
            sample: r.sample,
            epoch: r.epoch,
            alpha: r.alpha,
        })
        .collect()
}

/// Scalar stand-in for the bilevel problem with a closed-form hypergradient:
/// one student parameter, one fusion parameter entering through a sigmoid,
/// a quadratic distillation-loss analog, a quadratic ground-truth analog
/// with a small cubic term (so the finite-difference truncation error is
/// visible), and a quadratic validation loss.
#[derive(Debug, Clone)]
pub struct ScalarBilevelToy {
    pub theta: f64,
    pub omega: f64,
    pub inner_lr: f64,
    /// KD analog: a/2 (x-t)^2
    pub a: f64,
    pub t: f64,
    /// GT analog: b/2 (x-g)^2 + cubic/6 (x-g)^3
    pub b: f64,
    pub g: f64,
    pub cubic: f64,
    /// Validation: p/2 (x-v0)^2 + q x
    pub p: f64,
    pub v0: f64,
    pub q: f64,
}

impl Default for ScalarBilevelToy {
    fn default() -> Self {
        ScalarBilevelToy {
            theta: 0.4,
            omega: 0.25,
            inner_lr: 0.35,
            a: 1.3,
            t: -0.7,
            b: 0.8,
            g: 0.9,
            cubic: 2.0,
            p: 1.1,
            v0: 0.3,
            q: 2.0,
        }
    }
}

impl ScalarBilevelToy {
    fn sigma(&self) -> f64 {
        1.0 / (1.0 + (-self.omega).exp())
    }

    fn kd_value(&self, x: f64) -> f64 {
        0.5 * self.a * (x - self.t) * (x - self.t)
    }

    fn gt_value(&self, x: f64) -> f64 {
        let d = x - self.g;
        0.5 * self.b * d * d + self.cubic / 6.0 * d * d * d
    }

    fn kd_grad(&self, x: f64) -> f64 {
        self.a * (x - self.t)
    }

    fn gt_grad(&self, x: f64) -> f64 {
        let d = x - self.g;
        self.b * d + 0.5 * self.cubic * d * d
    }

    fn inner_grad(&self, x: f64) -> f64 {
        let s = self.sigma();
        s * self.kd_grad(x) + (1.0 - s) * self.gt_grad(x)
    }

    fn val_grad(&self, x: f64) -> f64 {
        self.p * (x - self.v0) + self.q
    }

    pub fn theta_after_step(&self) -> f64 {
        self.theta - self.inner_lr * self.inner_grad(self.theta)
    }

    /// d/domega of the training loss at student value x.
    fn d_omega_train(&self, x: f64) -> f64 {
        let s = self.sigma();
        s * (1.0 - s) * (self.kd_value(x) - self.gt_value(x))
    }

    /// Closed-form derivative of validation loss after one inner step.
    pub fn exact_hypergrad(&self) -> f64 {
        let s = self.sigma();
        let mixed = s * (1.0 - s) * (self.kd_grad(self.theta) - self.gt_grad(self.theta));
        self.val_grad(self.theta_after_step()) * (-self.inner_lr) * mixed
    }

    /// The solver's estimate. For the finite-difference mode `eps` is the
    /// raw perturbation scale along the validation gradient.
    pub fn estimate(&self, mode: HypergradMode, eps: f64) -> f64 {
        match mode {
            HypergradMode::FirstOrder => {
                let s = self.sigma();
                let mixed = s * (1.0 - s) * (self.kd_grad(self.theta) - self.gt_grad(self.theta));
                self.val_grad(self.theta) * (-self.inner_lr) * mixed
            }
            HypergradMode::UnrolledFd => {
                let v = self.val_grad(self.theta_after_step());
                if v == 0.0 {
                    return 0.0;
                }
                let fd = (self.d_omega_train(self.theta + eps * v)
                    - self.d_omega_train(self.theta - eps * v))
                    / (2.0 * eps);
                -self.inner_lr * fd
            }
        }
    }

    pub fn relative_error(&self, mode: HypergradMode, eps: f64) -> f64 {
        let exact = self.exact_hypergrad();
        (self.estimate(mode, eps) - exact).abs() / 1.0f64.max(exact.abs())
    }
}

/// Diagnostic used by the self-check suite: relative error of the chosen
/// mode on the default scalar toy, finite differences at the same
/// 0.01-over-gradient-norm scale the solver uses.
pub fn hypergrad_oracle_check(mode: HypergradMode) -> f64 {
    let toy = ScalarBilevelToy::default();
    let v = toy.val_grad(toy.theta_after_step()).abs();
    let eps = if v > 0.0 { 0.01 / v } else { 0.01 };
    toy.relative_error(mode, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{min_max_normalize, synth_gaussian_clusters};
    use crate::numcore::io::params_to_bytes;
    use crate::numcore::net::{init_params, Activation, Layer};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_data(seed: u64) -> (Dataset, Dataset) {
        let ds = min_max_normalize(
            &synth_gaussian_clusters(2, 30, 4, 1.5, 0.0, &mut rng(seed)).unwrap(),
        );
        let splits = crate::data::split(&ds, 0.7, 0.15, &mut rng(seed + 1)).unwrap();
        (splits.train, splits.val)
    }

    fn teacher_for(train: &Dataset, val: &Dataset, seed: u64) -> ModelParams {
        let init = init_params(
            &[train.dim(), 8, train.classes],
            &[Activation::Relu, Activation::Identity],
            &mut rng(seed),
        );
        let settings = TrainSettings {
            epochs: 40,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd { momentum: 0.0 },
            lr: 0.5,
            patience: 10,
            early_stopping: false,
        };
        train_plain_ce(init, train, val, &settings, &mut rng(seed + 1))
            .unwrap()
            .0
    }

    fn student_settings(epochs: u64) -> DistillSettings {
        DistillSettings {
            student: TrainSettings {
                epochs,
                batch_size: 8,
                optimizer: OptimizerKind::Sgd { momentum: 0.0 },
                lr: 0.2,
                patience: 10,
                early_stopping: false,
            },
            tau: 2.0,
            outer_optimizer: OptimizerKind::Sgd { momentum: 0.0 },
            outer_lr: 0.5,
            hypergrad: HypergradMode::UnrolledFd,
            stop_grad_delta: true,
            alpha_dump_every: 1,
            snapshot_epoch: 0,
        }
    }

    fn fresh_student(train: &Dataset, seed: u64) -> ModelParams {
        init_params(
            &[train.dim(), 6, train.classes],
            &[Activation::Relu, Activation::Identity],
            &mut rng(seed),
        )
    }

    fn fusion_net(c: usize, seed: u64) -> ModelParams {
        init_params(
            &[9 * c, 8, 1],
            &[Activation::Relu, Activation::Sigmoid],
            &mut rng(seed),
        )
    }

    #[test]
    fn inner_step_matches_hand_derivation() {
        // 2 -> 1 (relu) -> 2 tiny net, one sample, fixed alpha 0.3, tau 2,
        // lr 0.1; expected values recomputed by explicit chain rule.
        let theta = ModelParams {
            layers: vec![
                Layer {
                    weight: Tensor::from_vec(vec![1, 2], vec![0.3, -0.2]).unwrap(),
                    bias: Tensor::vector(vec![0.1]).unwrap(),
                    activation: Activation::Relu,
                },
                Layer {
                    weight: Tensor::from_vec(vec![2, 1], vec![0.8, -0.5]).unwrap(),
                    bias: Tensor::vector(vec![0.05, -0.15]).unwrap(),
                    activation: Activation::Identity,
                },
            ],
        };
        let train = Dataset {
            features: Tensor::from_vec(vec![1, 2], vec![0.6, -0.4]).unwrap(),
            labels: vec![0],
            is_outlier: vec![false],
            classes: 2,
            provenance: "hand".into(),
        };
        // teacher net emitting exactly [1.2, -0.7] for this input
        let teacher = ModelParams {
            layers: vec![Layer {
                weight: Tensor::from_vec(vec![2, 2], vec![2.0, 0.0, 0.0, 0.0]).unwrap(),
                bias: Tensor::vector(vec![0.0, -0.7]).unwrap(),
                activation: Activation::Identity,
            }],
        };
        let ctx = DistillContext::new(&teacher, &train, 2.0).unwrap();
        assert_eq!(ctx.teacher_logits.row(0), &[1.2, -0.7]);
        let mut state = BilevelState::new(theta, None, 0.1, 0.0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1);
        let kind = PolicyKind::Fixed { alpha: 0.3 };
        let (loss, alphas) =
            inner_step(&mut state, &[0], &train, &ctx, &kind, true, &mut opt).unwrap();
        assert_eq!(alphas, vec![0.3]);
        assert!((loss - 0.33927603487508366).abs() < 1e-12, "loss {loss}");
        let w1 = state.theta.layers[0].weight.as_slice();
        let b1 = state.theta.layers[0].bias.as_slice();
        let w2 = state.theta.layers[1].weight.as_slice();
        let b2 = state.theta.layers[1].bias.as_slice();
        for (got, want) in [
            (w1[0], 0.32498270491036350),
            (w1[1], -0.21665513660690900),
            (b1[0], 0.14163784151727251),
            (w2[0], 0.81153047918939854),
            (w2[1], -0.51153047918939854),
            (b2[0], 0.08202910885944039),
            (b2[1], -0.18202910885944039),
        ] {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn alpha_zero_update_is_bitwise_a_ce_step() {
        let (train, val) = tiny_data(100);
        let teacher = teacher_for(&train, &val, 200);
        let ctx = DistillContext::new(&teacher, &train, 4.0).unwrap();
        let init = fresh_student(&train, 300);

        let mut state = BilevelState::new(init.clone(), None, 0.2, 0.0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.2);
        let batch: Vec<usize> = (0..8).collect();
        inner_step(&mut state, &batch, &train, &ctx, &PolicyKind::Fixed { alpha: 0.0 }, true, &mut opt)
            .unwrap();

        // reference: plain CE gradient step on the same batch
        let mut reference = init;
        let mut grads = reference.zeros_like();
        for &i in &batch {
            let trace = forward_trace(&reference, train.sample(i)).unwrap();
            let gt = ce_loss_class(trace.output(), train.labels[i]).unwrap();
            let seed: Vec<f64> = gt
                .grad_logits
                .as_slice()
                .iter()
                .map(|g| g / batch.len() as f64)
                .collect();
            let (g, _) = backward_from_trace(&reference, &trace, &seed).unwrap();
            grads.axpy(1.0, &g);
        }
        let mut ref_opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.2);
        ref_opt.apply(&mut reference, &grads);
        assert_eq!(params_to_bytes(&state.theta), params_to_bytes(&reference));
    }

    #[test]
    fn alpha_one_update_is_bitwise_a_kd_step() {
        let (train, val) = tiny_data(101);
        let teacher = teacher_for(&train, &val, 201);
        let ctx = DistillContext::new(&teacher, &train, 1.5).unwrap();
        let init = fresh_student(&train, 301);

        let mut state = BilevelState::new(init.clone(), None, 0.1, 0.0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1);
        let batch: Vec<usize> = (3..11).collect();
        inner_step(&mut state, &batch, &train, &ctx, &PolicyKind::Fixed { alpha: 1.0 }, true, &mut opt)
            .unwrap();

        let mut reference = init;
        let mut grads = reference.zeros_like();
        for &i in &batch {
            let trace = forward_trace(&reference, train.sample(i)).unwrap();
            let kd = kd_loss(trace.output(), ctx.teacher_logits.row(i), 1.5).unwrap();
            let seed: Vec<f64> = kd
                .grad_logits
                .as_slice()
                .iter()
                .map(|g| g / batch.len() as f64)
                .collect();
            let (g, _) = backward_from_trace(&reference, &trace, &seed).unwrap();
            grads.axpy(1.0, &g);
        }
        let mut ref_opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1);
        ref_opt.apply(&mut reference, &grads);
        assert_eq!(params_to_bytes(&state.theta), params_to_bytes(&reference));
    }

    #[test]
    fn outer_step_zero_lr_and_detached_alpha_leave_omega_fixed() {
        let (train, val) = tiny_data(102);
        let teacher = teacher_for(&train, &val, 202);
        let ctx = DistillContext::new(&teacher, &train, 2.0).unwrap();
        let omega = fusion_net(train.classes, 400);
        let kind = PolicyKind::Tgeo { mode: FeatureMode::R3 };
        let batch: Vec<usize> = (0..8).collect();
        let val_batch: Vec<usize> = (0..8).collect();

        // outer_lr = 0
        let mut state =
            BilevelState::new(fresh_student(&train, 302), Some(omega.clone()), 0.2, 0.0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.0);
        outer_step(
            &mut state, &batch, &val_batch, &train, &val, &ctx, &kind,
            HypergradMode::UnrolledFd, true, &mut opt,
        )
        .unwrap();
        assert_eq!(
            params_to_bytes(state.omega.as_ref().unwrap()),
            params_to_bytes(&omega)
        );

        // alpha constant in omega: a saturated sigmoid head has sigma' = 0
        // exactly in f64, so every omega gradient vanishes and omega must
        // stay put even with a positive outer rate.
        let mut frozen = fusion_net(train.classes, 401);
        for l in frozen.layers.iter_mut() {
            l.weight.as_mut_slice().fill(0.0);
            l.bias.as_mut_slice().fill(0.0);
        }
        let n_layers = frozen.layers.len();
        frozen.layers[n_layers - 1].bias.as_mut_slice()[0] = 1000.0;
        let mut state = BilevelState::new(
            fresh_student(&train, 303),
            Some(frozen.clone()),
            0.2,
            1.0,
        )
        .unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 1.0);
        outer_step(
            &mut state, &batch, &val_batch, &train, &val, &ctx, &kind,
            HypergradMode::UnrolledFd, true, &mut opt,
        )
        .unwrap();
        assert_eq!(
            params_to_bytes(state.omega.as_ref().unwrap()),
            params_to_bytes(&frozen)
        );
    }

    #[test]
    fn fd_and_exact_mixed_hypergrad_agree() {
        // The finite-difference route and the per-sample analytic route
        // compute the same contraction; they must agree to O(eps^2).
        let (train, val) = tiny_data(103);
        let teacher = teacher_for(&train, &val, 203);
        let ctx = DistillContext::new(&teacher, &train, 2.0).unwrap();
        let omega = fusion_net(train.classes, 402);
        let state = BilevelState::new(
            fresh_student(&train, 304),
            Some(omega),
            0.2,
            0.5,
        )
        .unwrap();
        let kind = PolicyKind::Tgeo { mode: FeatureMode::R3 };
        let batch: Vec<usize> = (0..12).collect();
        let (_, v) = val_ce_grad(&state.theta, &val, &(0..val.len()).collect::<Vec<_>>()).unwrap();
        let exact = mixed_hypergrad_exact(&state, &batch, &train, &ctx, &kind, &v).unwrap();
        let norm = v.l2_norm();
        let fd = mixed_hypergrad_fd(&state, &batch, &train, &ctx, &kind, &v, 0.01 / norm).unwrap();
        let mut diff = exact.clone();
        diff.axpy(-1.0, &fd);
        let rel = diff.l2_norm() / exact.l2_norm().max(1e-12);
        assert!(rel < 1e-4, "routes disagree: {rel}");
    }

    #[test]
    fn zero_epochs_returns_initial_student() {
        let (train, val) = tiny_data(104);
        let teacher = teacher_for(&train, &val, 204);
        let init = fresh_student(&train, 305);
        let mut settings = student_settings(0);
        settings.alpha_dump_every = 0;
        let out = train_distill(
            init.clone(),
            &RatioPolicy::Fixed { alpha: 0.5 },
            &teacher,
            &train,
            &val,
            &settings,
            &mut rng(500),
            &mut rng(501),
        )
        .unwrap();
        assert_eq!(params_to_bytes(&out.student), params_to_bytes(&init));
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn fixed_zero_policy_trajectory_equals_plain_ce_training() {
        let (train, val) = tiny_data(105);
        let teacher = teacher_for(&train, &val, 205);
        let init = fresh_student(&train, 306);
        let mut settings = student_settings(6);
        settings.student.early_stopping = true;
        let out = train_distill(
            init.clone(),
            &RatioPolicy::Fixed { alpha: 0.0 },
            &teacher,
            &train,
            &val,
            &settings,
            &mut rng(502),
            &mut rng(503),
        )
        .unwrap();
        let (plain_best, plain_log) =
            train_plain_ce(init, &train, &val, &settings.student, &mut rng(502)).unwrap();
        assert_eq!(params_to_bytes(&out.student), params_to_bytes(&plain_best));
        assert_eq!(out.log.rows.len(), plain_log.rows.len());
        for (a, b) in out.log.rows.iter().zip(&plain_log.rows) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_ce.to_bits(), b.val_ce.to_bits());
            assert_eq!(a.val_acc.to_bits(), b.val_acc.to_bits());
            assert_eq!(a.batch_checksum, b.batch_checksum);
        }
    }

    #[test]
    fn frozen_zero_fusion_net_matches_fixed_half() {
        let (train, val) = tiny_data(106);
        let teacher = teacher_for(&train, &val, 206);
        let init = fresh_student(&train, 307);
        let mut omega = fusion_net(train.classes, 403);
        for l in omega.layers.iter_mut() {
            l.weight.as_mut_slice().fill(0.0);
            l.bias.as_mut_slice().fill(0.0);
        }
        let mut settings = student_settings(5);
        settings.outer_lr = 0.0; // freeze omega
        let tgeo = train_distill(
            init.clone(),
            &RatioPolicy::Tgeo {
                omega,
                mode: FeatureMode::R3,
            },
            &teacher,
            &train,
            &val,
            &settings,
            &mut rng(504),
            &mut rng(505),
        )
        .unwrap();
        let fixed = train_distill(
            init,
            &RatioPolicy::Fixed { alpha: 0.5 },
            &teacher,
            &train,
            &val,
            &settings,
            &mut rng(504),
            &mut rng(506),
        )
        .unwrap();
        assert_eq!(
            params_to_bytes(&tgeo.final_student),
            params_to_bytes(&fixed.final_student)
        );
        for (a, b) in tgeo.log.rows.iter().zip(&fixed.log.rows) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_acc.to_bits(), b.val_acc.to_bits());
            assert_eq!(a.batch_checksum, b.batch_checksum);
        }
        assert!(tgeo.alpha_dump.iter().all(|r| r.alpha == 0.5));
    }

    #[test]
    fn batch_order_is_policy_independent() {
        let (train, val) = tiny_data(107);
        let teacher = teacher_for(&train, &val, 207);
        let settings = student_settings(3);
        let run = |policy: &RatioPolicy| {
            train_distill(
                fresh_student(&train, 308),
                policy,
                &teacher,
                &train,
                &val,
                &settings,
                &mut rng(507),
                &mut rng(508),
            )
            .unwrap()
        };
        let a = run(&RatioPolicy::Fixed { alpha: 0.2 });
        let b = run(&RatioPolicy::Wls { gain: 1.0 });
        let c = run(&RatioPolicy::Tgeo {
            omega: fusion_net(train.classes, 404),
            mode: FeatureMode::R3,
        });
        for ((ra, rb), rc) in a.log.rows.iter().zip(&b.log.rows).zip(&c.log.rows) {
            assert_eq!(ra.batch_checksum, rb.batch_checksum);
            assert_eq!(ra.batch_checksum, rc.batch_checksum);
        }
    }

    #[test]
    fn annealed_policy_reaches_zero_and_wls_stays_bounded() {
        let (train, val) = tiny_data(108);
        let teacher = teacher_for(&train, &val, 208);
        let settings = student_settings(4);
        let out = train_distill(
            fresh_student(&train, 309),
            &RatioPolicy::Annealed { horizon: 0 },
            &teacher,
            &train,
            &val,
            &settings,
            &mut rng(509),
            &mut rng(510),
        )
        .unwrap();
        let last = out.log.rows.last().unwrap();
        assert!(last.alpha_mean < 0.2);
        let first = &out.log.rows[0];
        assert!(first.alpha_mean > last.alpha_mean);

        let out = train_distill(
            fresh_student(&train, 310),
            &RatioPolicy::Wls { gain: 2.0 },
            &teacher,
            &train,
            &val,
            &settings,
            &mut rng(511),
            &mut rng(512),
        )
        .unwrap();
        assert!(out
            .alpha_dump
            .iter()
            .all(|r| r.alpha > 0.0 && r.alpha < 1.0));
    }

    #[test]
    fn tgeo_run_emits_open_interval_alphas_and_moves_omega() {
        let (train, val) = tiny_data(109);
        let teacher = teacher_for(&train, &val, 209);
        let omega0 = fusion_net(train.classes, 405);
        let settings = student_settings(4);
        let out = train_distill(
            fresh_student(&train, 311),
            &RatioPolicy::Tgeo {
                omega: omega0.clone(),
                mode: FeatureMode::R3,
            },
            &teacher,
            &train,
            &val,
            &settings,
            &mut rng(513),
            &mut rng(514),
        )
        .unwrap();
        assert!(out
            .alpha_dump
            .iter()
            .all(|r| r.alpha > 0.0 && r.alpha < 1.0));
        assert_ne!(
            params_to_bytes(out.omega.as_ref().unwrap()),
            params_to_bytes(&omega0)
        );
    }

    #[test]
    fn early_stopping_fires_on_stale_validation_accuracy() {
        let (train, val) = tiny_data(110);
        let teacher = teacher_for(&train, &val, 210);
        let mut settings = student_settings(400);
        settings.student.early_stopping = true;
        settings.student.patience = 5;
        settings.student.lr = 1e-9; // frozen student -> accuracy never improves
        settings.outer_lr = 0.0;
        let out = train_distill(
            fresh_student(&train, 312),
            &RatioPolicy::Fixed { alpha: 0.5 },
            &teacher,
            &train,
            &val,
            &settings,
            &mut rng(515),
            &mut rng(516),
        )
        .unwrap();
        assert!(out.log.stopped_early);
        assert_eq!(out.log.rows.len(), 6); // best at epoch 1 + 5 stale evals
    }

    #[test]
    fn non_stop_grad_delta_path_changes_the_update_and_stays_finite() {
        let (train, val) = tiny_data(111);
        let teacher = teacher_for(&train, &val, 211);
        let omega = fusion_net(train.classes, 406);
        let init = fresh_student(&train, 313);
        let mut with_flag = student_settings(2);
        with_flag.stop_grad_delta = false;
        let policy = RatioPolicy::Tgeo {
            omega,
            mode: FeatureMode::R3,
        };
        let a = train_distill(
            init.clone(), &policy, &teacher, &train, &val, &with_flag,
            &mut rng(517), &mut rng(518),
        )
        .unwrap();
        let without = student_settings(2);
        let b = train_distill(
            init, &policy, &teacher, &train, &val, &without,
            &mut rng(517), &mut rng(518),
        )
        .unwrap();
        assert_ne!(
            params_to_bytes(&a.final_student),
            params_to_bytes(&b.final_student)
        );
        assert!(a.final_student.is_finite());
    }

    #[test]
    fn outer_step_matches_end_to_end_finite_differences() {
        // Brute-force oracle: perturb one fusion-net coordinate, run one
        // real inner step from the same student, measure validation CE, and
        // centrally difference. The solver's hypergradient must match in
        // sign and value.
        let (train, val) = tiny_data(113);
        let teacher = teacher_for(&train, &val, 213);
        let ctx = DistillContext::new(&teacher, &train, 2.0).unwrap();
        let omega = fusion_net(train.classes, 407);
        let theta = fresh_student(&train, 314);
        let kind = PolicyKind::Tgeo { mode: FeatureMode::R3 };
        let batch: Vec<usize> = (0..16).collect();
        let val_ids: Vec<usize> = (0..val.len()).collect();
        let inner_lr = 0.2;

        let val_after_step = |om: &ModelParams| -> f64 {
            let mut st = BilevelState::new(theta.clone(), Some(om.clone()), inner_lr, 0.0).unwrap();
            let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, inner_lr);
            inner_step(&mut st, &batch, &train, &ctx, &kind, true, &mut opt).unwrap();
            full_val_ce(&st.theta, &val).unwrap()
        };

        // solver estimate (validation batch = the whole split, so the
        // stochastic and brute-force objectives coincide)
        let mut state =
            BilevelState::new(theta.clone(), Some(omega.clone()), inner_lr, 1.0).unwrap();
        // capture ghat by running with a plain SGD outer optimizer of lr 1:
        // omega' = omega - ghat
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 1.0);
        outer_step(
            &mut state, &batch, &val_ids, &train, &val, &ctx, &kind,
            HypergradMode::UnrolledFd, true, &mut opt,
        )
        .unwrap();
        let mut ghat = omega.clone();
        ghat.axpy(-1.0, state.omega.as_ref().unwrap());

        // spot-check a handful of coordinates across layers
        let h = 1e-4;
        let mut checked = 0;
        for li in 0..omega.layers.len() {
            for wi in [0usize, 3] {
                if wi >= omega.layers[li].weight.len() {
                    continue;
                }
                let mut plus = omega.clone();
                plus.layers[li].weight.as_mut_slice()[wi] += h;
                let mut minus = omega.clone();
                minus.layers[li].weight.as_mut_slice()[wi] -= h;
                let numeric = (val_after_step(&plus) - val_after_step(&minus)) / (2.0 * h);
                let analytic = ghat.layers[li].weight.as_slice()[wi];
                let denom = 1.0f64.max(numeric.abs()).max(analytic.abs());
                assert!(
                    (numeric - analytic).abs() / denom < 1e-3,
                    "layer {li} w[{wi}]: solver {analytic} vs brute force {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 3);
    }

    #[test]
    fn oracle_unrolled_fd_converges_quadratically() {
        let toy = ScalarBilevelToy::default();
        let coarse = toy.relative_error(HypergradMode::UnrolledFd, 1e-2);
        let fine = toy.relative_error(HypergradMode::UnrolledFd, 1e-3);
        assert!(coarse < 1e-4, "coarse error {coarse}");
        assert!(fine < coarse, "no shrink: {fine} vs {coarse}");
        assert!(fine > 0.0);
        // default-scale check used by the selfcheck command
        assert!(hypergrad_oracle_check(HypergradMode::UnrolledFd) < 1e-4);
    }

    #[test]
    fn oracle_first_order_exact_without_val_curvature() {
        let toy = ScalarBilevelToy {
            p: 0.0,
            ..Default::default()
        };
        assert!(toy.relative_error(HypergradMode::FirstOrder, 1e-2) < 1e-8);
        // dominant curvature: error is real but only reported
        let hard = ScalarBilevelToy {
            p: 50.0,
            ..Default::default()
        };
        assert!(hard.relative_error(HypergradMode::FirstOrder, 1e-2) > 1e-3);
    }

    #[test]
    fn context_rejects_mismatched_teacher() {
        let (train, _) = tiny_data(112);
        let bad_width = init_params(
            &[train.dim() + 1, 4, train.classes],
            &[Activation::Relu, Activation::Identity],
            &mut rng(600),
        );
        assert!(DistillContext::new(&bad_width, &train, 2.0).is_err());
        let bad_classes = init_params(
            &[train.dim(), 4, train.classes + 2],
            &[Activation::Relu, Activation::Identity],
            &mut rng(601),
        );
        assert!(DistillContext::new(&bad_classes, &train, 2.0).is_err());
        let ok = init_params(
            &[train.dim(), 4, train.classes],
            &[Activation::Relu, Activation::Identity],
            &mut rng(602),
        );
        assert!(DistillContext::new(&ok, &train, 0.0).is_err());
    }
}
