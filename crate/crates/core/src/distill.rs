//! Block-wise distillation and the training loop shared by every phase.
//!
//! Distillation matches each substitute block's output (after its MLP) to
//! the teacher's block output with a cosine loss, plus cross-entropy on the
//! logits. Only substitute parameters train in that phase; later phases
//! unfreeze everything.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::Variant;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{argmax, ForwardOptions, Model};
use crate::optim::{AdamW, Schedule};
use crate::par::Executor;
use crate::params::{ParamGroup, ParamId};
use crate::prune::{apply_masks, model_penalty_var, Reduction};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Plain classification training of the attention teacher.
    Teacher,
    Distill,
    Finetune,
    PruneRegularize,
    PruneFinetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Distill => "distill",
            Phase::Finetune => "finetune",
            Phase::PruneRegularize => "prune-regularize",
            Phase::PruneFinetune => "prune-finetune",
        }
    }
}

/// How the cosine in the similarity loss is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosineMode {
    /// Cosine per token over the feature axis, averaged over tokens.
    #[default]
    PerToken,
    /// One cosine over the flattened `T·D` tensors.
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Weight of the similarity terms (distill phase only).
    pub lambda: f64,
    pub cosine: CosineMode,
    /// Layers whose block outputs are supervised; `None` means all.
    pub supervised: Option<Vec<usize>>,
    /// Hoyer penalty coefficient (prune-regularize phase only).
    pub reg_coeff: f64,
    pub reduction: Reduction,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            epochs: 50,
            batch_size: 64,
            lr: 5e-4,
            warmup_epochs: 5,
            warmup_lr: 1e-5,
            min_lr: 1e-6,
            weight_decay: 0.05,
            lambda: 1.0,
            cosine: CosineMode::PerToken,
            supervised: None,
            reg_coeff: 1e-4,
            reduction: Reduction::Sum,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad("lambda must be >= 0");
        }
        if self.reg_coeff.is_nan() || self.reg_coeff < 0.0 {
            return bad("reg_coeff must be >= 0");
        }
        if !(self.lr >= 0.0 && self.warmup_lr >= 0.0 && self.min_lr >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        Ok(())
    }

    fn uses_similarity(&self) -> bool {
        self.phase == Phase::Distill && self.lambda > 0.0
    }

    fn uses_penalty(&self) -> bool {
        self.phase == Phase::PruneRegularize && self.reg_coeff > 0.0
    }
}

/// `1 − cos(teacher, student)`. The teacher side is detached.
pub fn similarity_loss<F: Real>(
    g: &mut Graph<'_, F>,
    teacher: Var,
    student: Var,
    mode: CosineMode,
) -> Result<Var> {
    let t = g.detach(teacher);
    let (t, s) = match mode {
        CosineMode::PerToken => (t, student),
        CosineMode::Flatten => {
            let n = g.value(t).numel();
            (g.reshape(t, &[1, n])?, g.reshape(student, &[1, n])?)
        }
    };
    let cos = g.row_cosine(t, s)?;
    let mean = g.mean(cos);
    let neg = g.scale(mean, -F::one());
    Ok(g.add_scalar(neg, F::one()))
}

/// `λ·Σ sims + ce`.
pub fn combined_loss<F: Real>(g: &mut Graph<'_, F>, sims: &[Var], ce: Var, lambda: f64) -> Result<Var> {
    if sims.is_empty() || lambda == 0.0 {
        return Ok(ce);
    }
    let mut total = sims[0];
    for &s in &sims[1..] {
        total = g.add(total, s)?;
    }
    let weighted = g.scale(total, F::lit(lambda));
    g.add(weighted, ce)
}

/// Sets trainable flags for `phase` and returns the trainable ids.
pub fn freeze_plan<F: Real>(model: &mut Model<F>, phase: Phase) -> Vec<ParamId> {
    match phase {
        Phase::Distill => model.set_trainable_groups(Some(&[ParamGroup::Substitute])),
        _ => model.set_trainable_groups(None),
    }
    model.store.ids().filter(|&id| model.store.is_trainable(id)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-sample objective (plus the weighted penalty, if any).
    pub loss: f64,
    pub ce: f64,
    /// Mean similarity loss per supervised block; empty when not computed.
    pub sim: Vec<f64>,
    pub acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn sim_mean(&self) -> Option<f64> {
        (!self.sim.is_empty()).then(|| self.sim.iter().sum::<f64>() / self.sim.len() as f64)
    }

    /// Mean per-block cosine similarity, i.e. `1 − sim_mean`.
    pub fn cosine_mean(&self) -> Option<f64> {
        self.sim_mean().map(|s| 1.0 - s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub rows: Vec<EpochMetrics>,
    pub teacher_forwards: usize,
}

/// Aggregate of a forward-only pass over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub ce: f64,
    pub sim: Vec<f64>,
    pub acc: f64,
}

impl EvalMetrics {
    pub fn cosine_mean(&self) -> Option<f64> {
        (!self.sim.is_empty()).then(|| 1.0 - self.sim.iter().sum::<f64>() / self.sim.len() as f64)
    }
}

struct SampleOut<F: Real> {
    loss: f64,
    ce: f64,
    sims: Vec<f64>,
    correct: bool,
    grads: Vec<(ParamId, Tensor<F>)>,
}

fn supervised_layers(cfg: &TrainConfig, layers: usize) -> Result<Vec<usize>> {
    match &cfg.supervised {
        None => Ok((0..layers).collect()),
        Some(r) => {
            if let Some(&bad) = r.iter().find(|&&l| l >= layers) {
                return Err(Error::Config(format!("supervised layer {bad} out of range")));
            }
            Ok(r.clone())
        }
    }
}

fn sample_pass<F: Real>(
    model: &Model<F>,
    sample: &Sample,
    teacher_blocks: Option<&[Tensor<F>]>,
    layers: &[usize],
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<SampleOut<F>> {
    let mut g = Graph::new();
    let image = sample.image_as::<F>();
    let out = model.forward(&mut g, &image, &ForwardOptions::default())?;
    let ce = g.cross_entropy(out.logits, &[sample.label])?;
    let mut sims = Vec::new();
    if let Some(tb) = teacher_blocks {
        for &l in layers {
            let t = g.constant(tb[l].clone());
            sims.push(similarity_loss(&mut g, t, out.block_outputs[l], cfg.cosine)?);
        }
    }
    let lambda = if cfg.uses_similarity() { cfg.lambda } else { 0.0 };
    let loss = combined_loss(&mut g, &sims, ce, lambda)?;
    let scalar = |g: &Graph<F>, v: Var| g.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
    let correct = argmax(g.value(out.logits).data()) == sample.label;
    let res_loss = scalar(&g, loss);
    let res_ce = scalar(&g, ce);
    let sim_vals = sims.iter().map(|&s| scalar(&g, s)).collect();
    let grads = if want_grads && res_loss.is_finite() {
        g.backward(loss)?;
        g.param_grads().into_iter().map(|(id, t)| (id, t.clone())).collect()
    } else {
        Vec::new()
    };
    Ok(SampleOut {
        loss: res_loss,
        ce: res_ce,
        sims: sim_vals,
        correct,
        grads,
    })
}

/// Teacher block outputs for `samples`, counted in `counter`.
fn teacher_blocks<F: Real>(
    teacher: &Model<F>,
    samples: &[&Sample],
    exec: &Executor,
    counter: &AtomicUsize,
) -> Result<Vec<Vec<Tensor<F>>>> {
    exec.map(samples, |s| {
        counter.fetch_add(1, Ordering::Relaxed);
        teacher.teacher_forward(&s.image_as::<F>()).map(|(_, b)| b)
    })
    .into_iter()
    .collect()
}

fn check_models<F: Real>(model: &Model<F>, teacher: Option<&Model<F>>, cfg: &TrainConfig) -> Result<()> {
    let needs_far = matches!(cfg.phase, Phase::Distill | Phase::PruneRegularize | Phase::PruneFinetune);
    if needs_far && model.variant != Variant::Far {
        return Err(Error::Config(format!("phase {} needs a FAR model", cfg.phase.name())));
    }
    if cfg.uses_similarity() {
        let t = teacher.ok_or_else(|| Error::Config("distillation needs a teacher".into()))?;
        if t.config.layers != model.config.layers || t.config.dim != model.config.dim {
            return Err(Error::Config("teacher and student geometry differ".into()));
        }
    }
    Ok(())
}

/// Forward-only pass over `samples` with the phase's objective (without the
/// pruning penalty).
pub fn evaluate<F: Real>(
    model: &Model<F>,
    teacher: Option<&Model<F>>,
    samples: &[Sample],
    cfg: &TrainConfig,
    exec: &Executor,
) -> Result<EvalMetrics> {
    check_models(model, teacher, cfg)?;
    let layers = supervised_layers(cfg, model.config.layers)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let counter = AtomicUsize::new(0);
    let tb = match (cfg.uses_similarity(), teacher) {
        (true, Some(t)) => Some(teacher_blocks(t, &refs, exec, &counter)?),
        _ => None,
    };
    let idx: Vec<usize> = (0..samples.len()).collect();
    let outs: Vec<SampleOut<F>> = exec
        .map(&idx, |&i| {
            sample_pass(model, &samples[i], tb.as_ref().map(|t| t[i].as_slice()), &layers, cfg, false)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let n = outs.len().max(1) as f64;
    let mut sim = vec![0.0; if tb.is_some() { layers.len() } else { 0 }];
    for o in &outs {
        for (a, b) in sim.iter_mut().zip(&o.sims) {
            *a += b;
        }
    }
    Ok(EvalMetrics {
        loss: outs.iter().map(|o| o.loss).sum::<f64>() / n,
        ce: outs.iter().map(|o| o.ce).sum::<f64>() / n,
        sim: sim.into_iter().map(|s| s / n).collect(),
        acc: outs.iter().filter(|o| o.correct).count() as f64 / n,
    })
}

/// Classification accuracy of `model` on `samples`.
pub fn accuracy<F: Real>(model: &Model<F>, samples: &[Sample], exec: &Executor) -> Result<f64> {
    let preds: Vec<Result<usize>> = exec.map(samples, |s| model.predict(&s.image_as::<F>()));
    let mut correct = 0usize;
    for (p, s) in preds.into_iter().zip(samples) {
        if p? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Trains `model` for `cfg.epochs` epochs of `cfg.phase` on `data.train`,
/// logging one row per epoch. Installed masks are re-applied after every
/// optimizer step so masked weights stay exactly zero.
pub fn run_phase<F: Real>(
    model: &mut Model<F>,
    teacher: Option<&Model<F>>,
    data: &Dataset,
    cfg: &TrainConfig,
    exec: &Executor,
) -> Result<PhaseReport> {
    cfg.validate()?;
    check_models(model, teacher, cfg)?;
    if data.train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let layers = supervised_layers(cfg, model.config.layers)?;
    freeze_plan(model, cfg.phase);
    apply_masks(model);

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = Schedule {
        base_lr: cfg.lr,
        warmup_lr: cfg.warmup_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::<F>::new(cfg.weight_decay);
    let counter = AtomicUsize::new(0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut correct) = (0.0, 0.0, 0usize);
        let mut sim_sum = vec![0.0; if cfg.uses_similarity() { layers.len() } else { 0 }];
        let mut lr = schedule.lr_at(step);

        for (s_in_epoch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = schedule.lr_at(step);
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let tb = match (cfg.uses_similarity(), teacher) {
                (true, Some(t)) => Some(teacher_blocks(t, &batch, exec, &counter)?),
                _ => None,
            };
            let pos: Vec<usize> = (0..batch.len()).collect();
            let outs: Vec<SampleOut<F>> = {
                let m: &Model<F> = model;
                exec.map(&pos, |&k| {
                    sample_pass(m, batch[k], tb.as_ref().map(|t| t[k].as_slice()), &layers, cfg, true)
                })
                .into_iter()
                .collect::<Result<_>>()?
            };

            let mut acc: Vec<Option<Tensor<F>>> = vec![None; model.store.len()];
            for o in &outs {
                if !o.loss.is_finite() {
                    return Err(Error::Diverged { epoch, step: s_in_epoch });
                }
                loss_sum += o.loss;
                ce_sum += o.ce;
                correct += o.correct as usize;
                for (a, b) in sim_sum.iter_mut().zip(&o.sims) {
                    *a += b;
                }
                for (id, g) in &o.grads {
                    match &mut acc[id.index()] {
                        Some(t) => t.add_assign(g),
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
            let inv = F::lit(1.0 / batch.len() as f64);
            for t in acc.iter_mut().flatten() {
                t.scale_assign(inv);
            }

            if cfg.uses_penalty() {
                let mut g = Graph::new();
                let p = model_penalty_var(&mut g, model, cfg.reduction)?;
                let weighted = g.scale(p, F::lit(cfg.reg_coeff));
                let pv = g.value(weighted).data()[0].to_f64().unwrap_or(f64::NAN);
                if !pv.is_finite() {
                    return Err(Error::Diverged { epoch, step: s_in_epoch });
                }
                loss_sum += pv * batch.len() as f64;
                g.backward(weighted)?;
                for (id, gr) in g.param_grads() {
                    match &mut acc[id.index()] {
                        Some(t) => t.add_assign(gr),
                        slot => *slot = Some(gr.clone()),
                    }
                }
            }

            let grads: Vec<(ParamId, Tensor<F>)> = acc
                .into_iter()
                .enumerate()
                .filter_map(|(i, t)| t.map(|t| (ParamId(i), t)))
                .collect();
            opt.step(&mut model.store, &grads, lr)?;
            apply_masks(model);
            step += 1;
        }

        let nf = n as f64;
        let row = EpochMetrics {
            epoch,
            phase: cfg.phase,
            loss: loss_sum / nf,
            ce: ce_sum / nf,
            sim: sim_sum.into_iter().map(|s| s / nf).collect(),
            acc: correct as f64 / nf,
            val_acc: accuracy(model, &data.val, exec)?,
            lr,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5} acc {:.3} val {:.3}",
            cfg.phase.name(),
            row.loss,
            row.acc,
            row.val_acc
        );
        rows.push(row);
    }
    Ok(PhaseReport {
        rows,
        teacher_forwards: counter.load(Ordering::Relaxed),
    })
}

/// CSV header for metrics rows with `blocks` similarity columns.
fn metrics_header(blocks: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "phase", "loss", "sim_mean"].map(String::from).to_vec();
    h.extend((0..blocks).map(|b| format!("sim_{b}")));
    h.extend(["acc", "val_acc", "lr"].map(String::from));
    h
}

/// Writes the per-epoch log. Similarity columns are blank for phases that do
/// not compute them.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[EpochMetrics], blocks: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(blocks))?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.phase.name().to_string(), r.loss.to_string()];
        rec.push(r.sim_mean().map(|s| s.to_string()).unwrap_or_default());
        for b in 0..blocks {
            rec.push(r.sim.get(b).map(|s| s.to_string()).unwrap_or_default());
        }
        rec.extend([r.acc.to_string(), r.val_acc.to_string(), r.lr.to_string()]);
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))
}

pub fn save_metrics_csv(path: &Path, rows: &[EpochMetrics], blocks: usize) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows, blocks)?;
    crate::binio::write_atomic(path, &buf)
}
