//! Group-HS structured pruning of BiLSTM hidden units.
//!
//! Each hidden unit owns one row of a per-direction composite matrix. The
//! mandatory row is the unit's four gate rows of `w_ih` followed by its four
//! gate rows of `w_hh`. The extended row also takes the unit's `w_hh`
//! columns, its bias entries and its `out_proj` column. The penalty only
//! looks at the mandatory part; removing a unit always zeroes the extended
//! set.

use std::path::Path;

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::data::Dataset;
use crate::distill::{run_phase, Phase, PhaseReport, TrainConfig};
use crate::error::{Error, Result};
use crate::far::{FarBlockParams, LstmDirParams};
use crate::mask::{Direction, MaskSet, PruneMask};
use crate::model::Model;
use crate::par::Executor;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// `(Σ_g ‖w_g‖)² / Σ_g ‖w_g‖²` from the group norms. All-zero input yields 0.
pub fn group_hs_from_norms(norms: &[f64]) -> f64 {
    let sum: f64 = norms.iter().sum();
    let sq: f64 = norms.iter().map(|n| n * n).sum();
    if sq == 0.0 {
        log::warn!("group_hs of an all-zero tensor; returning 0");
        return 0.0;
    }
    sum * sum / sq
}

/// Group-HS of `w` under a partition of its flat entries into groups.
pub fn group_hs<F: Real>(w: &Tensor<F>, groups: &[Vec<usize>]) -> Result<f64> {
    let n = w.numel();
    let mut seen = vec![false; n];
    let mut norms = Vec::with_capacity(groups.len());
    for grp in groups {
        let mut sq = 0.0;
        for &i in grp {
            if i >= n || seen[i] {
                return Err(Error::invalid("group_hs", "groups do not partition the tensor"));
            }
            seen[i] = true;
            let v = w.data()[i].to_f64().unwrap_or(f64::NAN);
            sq += v * v;
        }
        norms.push(sq.sqrt());
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid("group_hs", "groups do not cover the tensor"));
    }
    Ok(group_hs_from_norms(&norms))
}

/// Partition of a `[rows × cols]` matrix into its rows.
pub fn row_groups(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    (0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect()
}

/// ℓ₂ norm of every row of a 2-D tensor.
pub fn row_norms<F: Real>(w: &Tensor<F>) -> Vec<f64> {
    let cols = w.shape().get(1).copied().unwrap_or(1);
    w.data()
        .chunks(cols.max(1))
        .map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Hoyer penalty of a composite matrix: Group-HS with one group per row.
pub fn hoyer_penalty<F: Real>(w: &Tensor<F>) -> f64 {
    group_hs_from_norms(&row_norms(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompositeOptions {
    /// Append `w_hh` columns, biases and the `out_proj` column to each row.
    pub extended: bool,
}

/// Composite matrix `[hidden × G]` of one (layer, head, direction).
pub fn composite_matrix<F: Real>(
    store: &ParamStore<F>,
    block: &FarBlockParams,
    head: usize,
    dir: Direction,
    opts: CompositeOptions,
) -> Result<Tensor<F>> {
    let p = block.dir(head, dir);
    let h = p.hidden(store);
    let (w_ih, w_hh) = (store.get(p.w_ih), store.get(p.w_hh));
    let input = w_ih.shape()[1];
    if w_ih.shape()[0] != 4 * h || w_hh.shape() != [4 * h, h] {
        return Err(Error::ShapeMismatch {
            op: "composite_matrix",
            lhs: w_ih.shape().to_vec(),
            rhs: w_hh.shape().to_vec(),
        });
    }
    let (b_ih, b_hh) = (store.get(p.b_ih), store.get(p.b_hh));
    let out = store.get(block.out_proj.weight);
    let (start, width) = block.out_proj_span(store, head, dir);
    if opts.extended && (width != h || b_ih.numel() != 4 * h || b_hh.numel() != 4 * h) {
        return Err(Error::invalid("composite_matrix", "inconsistent hidden size"));
    }
    let d = out.shape()[0];
    let cols = composite_width(input, h, d, opts);
    let mut data = Vec::with_capacity(h * cols);
    for j in 0..h {
        for gate in 0..4 {
            data.extend_from_slice(w_ih.row(gate * h + j));
        }
        for gate in 0..4 {
            data.extend_from_slice(w_hh.row(gate * h + j));
        }
        if opts.extended {
            for gate in 0..4 {
                data.extend((0..h).map(|r| w_hh.at2(gate * h + r, j)));
            }
            data.extend((0..4).map(|gate| b_ih.data()[gate * h + j]));
            data.extend((0..4).map(|gate| b_hh.data()[gate * h + j]));
            data.extend((0..d).map(|r| out.at2(r, start + j)));
        }
    }
    Tensor::new(vec![h, cols], data)
}

/// Column count of a composite matrix.
pub fn composite_width(input: usize, hidden: usize, dim: usize, opts: CompositeOptions) -> usize {
    let base = 4 * input + 4 * hidden;
    if opts.extended {
        base + 4 * hidden + 8 + dim
    } else {
        base
    }
}

/// Hoyer penalty of one direction built inside the graph from the raw
/// gate matrices, so gradients flow back to `w_ih` and `w_hh`.
pub fn hoyer_penalty_var<'a, F: Real>(
    g: &mut Graph<'a, F>,
    store: &'a ParamStore<F>,
    p: &LstmDirParams,
) -> Result<Var> {
    let h = p.hidden(store);
    let mut unit_sq = None;
    for id in [p.w_ih, p.w_hh] {
        let w = g.param(store, id);
        let sq = g.mul(w, w)?;
        let per_row = g.sum_axis(sq, 1)?;
        let by_gate = g.reshape(per_row, &[4, h])?;
        let per_unit = g.sum_axis(by_gate, 0)?;
        unit_sq = Some(match unit_sq {
            None => per_unit,
            Some(acc) => g.add(acc, per_unit)?,
        });
    }
    let unit_sq = unit_sq.expect("two gate matrices");
    let denom = g.sum(unit_sq);
    if g.value(denom).data()[0] == F::zero() {
        log::warn!("hoyer penalty of all-zero weights; returning 0");
        return Ok(g.constant(Tensor::scalar(F::zero())));
    }
    let norms = g.sqrt(unit_sq);
    let s = g.sum(norms);
    let num = g.mul(s, s)?;
    g.div(num, denom)
}

/// How per-direction penalties are combined before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Penalty over every (layer, head, direction) of the model.
pub fn model_penalty_var<'a, F: Real>(
    g: &mut Graph<'a, F>,
    model: &'a Model<F>,
    reduction: Reduction,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (_, block) in model.far_blocks() {
        for dirs in &block.heads {
            for p in dirs {
                terms.push(hoyer_penalty_var(g, &model.store, p)?);
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::Config("hoyer penalty needs a FAR model".into()));
    }
    let n = terms.len();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, F::lit(1.0 / n as f64)),
    })
}

/// Same quantity as [`model_penalty_var`], evaluated on explicit composite
/// matrices.
pub fn model_penalty<F: Real>(model: &Model<F>, reduction: Reduction) -> Result<f64> {
    let mut vals = Vec::new();
    for (_, block) in model.far_blocks() {
        for head in 0..block.heads.len() {
            for dir in Direction::BOTH {
                let w = composite_matrix(&model.store, block, head, dir, CompositeOptions::default())?;
                vals.push(hoyer_penalty(&w));
            }
        }
    }
    let total: f64 = vals.iter().sum();
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / vals.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Keep units whose composite row norm exceeds τ.
    Absolute(f64),
    /// Keep units whose norm exceeds τ times the largest norm in the same
    /// (layer, head, direction).
    Relative(f64),
}

impl Threshold {
    pub fn value(self) -> f64 {
        match self {
            Threshold::Absolute(t) | Threshold::Relative(t) => t,
        }
    }
}

/// Keep flags for one direction given its unit norms. The largest-norm unit
/// always survives.
pub fn select_units(norms: &[f64], threshold: Threshold) -> Result<PruneMask> {
    let t = threshold.value();
    if t < 0.0 || !t.is_finite() {
        return Err(Error::invalid("prune_by_threshold", format!("threshold {t} must be >= 0")));
    }
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let cut = match threshold {
        Threshold::Absolute(t) => t,
        Threshold::Relative(t) => t * max,
    };
    let mut keep: Vec<bool> = if t == 0.0 {
        vec![true; norms.len()]
    } else {
        norms.iter().map(|&n| n > cut).collect()
    };
    if !keep.iter().any(|&k| k) && !norms.is_empty() {
        let best = crate::model::argmax(norms);
        keep[best] = true;
    }
    Ok(PruneMask { keep })
}

/// Thresholds every direction on its mandatory composite row norms,
/// installs the resulting masks (intersected with any existing ones) and
/// zeroes the coupled weights.
pub fn prune_by_threshold<F: Real>(model: &mut Model<F>, threshold: Threshold) -> Result<MaskSet> {
    let mut masks = Vec::new();
    for (l, block) in model.far_blocks() {
        let mut heads = Vec::with_capacity(block.heads.len());
        for head in 0..block.heads.len() {
            let mut pair = [PruneMask::full(0), PruneMask::full(0)];
            for dir in Direction::BOTH {
                let w = composite_matrix(&model.store, block, head, dir, CompositeOptions::default())?;
                let mut m = select_units(&row_norms(&w), threshold)?;
                if let Some(old) = model.masks() {
                    let prev = old.get(l, head, dir);
                    for (k, &p) in m.keep.iter_mut().zip(&prev.keep) {
                        *k &= p;
                    }
                }
                pair[dir.index()] = m;
            }
            heads.push(pair);
        }
        masks.push(heads);
    }
    if masks.is_empty() {
        return Err(Error::Config("pruning needs a FAR model".into()));
    }
    let set = MaskSet { masks };
    model.set_masks(Some(set.clone()))?;
    apply_masks(model);
    Ok(set)
}

/// Writes exact zeros into every coordinate coupled to a masked unit:
/// gate rows of `w_ih`/`w_hh`, `w_hh` columns, biases and `out_proj`
/// columns.
pub fn apply_masks<F: Real>(model: &mut Model<F>) {
    let Some(masks) = model.masks().cloned() else {
        return;
    };
    let blocks: Vec<(usize, FarBlockParams)> =
        model.far_blocks().map(|(l, b)| (l, b.clone())).collect();
    for (l, block) in blocks {
        for head in 0..block.heads.len() {
            for dir in Direction::BOTH {
                let m = masks.get(l, head, dir);
                if m.is_full() {
                    continue;
                }
                let p = *block.dir(head, dir);
                let (start, _) = block.out_proj_span(&model.store, head, dir);
                let h = m.units();
                for j in m.keep.iter().enumerate().filter(|(_, &k)| !k).map(|(j, _)| j) {
                    for gate in 0..4 {
                        let r = gate * h + j;
                        zero_row(model.store.get_mut(p.w_ih), r);
                        zero_row(model.store.get_mut(p.w_hh), r);
                        model.store.get_mut(p.b_ih).data_mut()[r] = F::zero();
                        model.store.get_mut(p.b_hh).data_mut()[r] = F::zero();
                    }
                    zero_col(model.store.get_mut(p.w_hh), j);
                    zero_col(model.store.get_mut(block.out_proj.weight), start + j);
                }
            }
        }
    }
}

fn zero_row<F: Real>(t: &mut Tensor<F>, r: usize) {
    let cols = t.shape()[1];
    t.data_mut()[r * cols..(r + 1) * cols].fill(F::zero());
}

fn zero_col<F: Real>(t: &mut Tensor<F>, c: usize) {
    let cols = t.shape()[1];
    for v in t.data_mut().iter_mut().skip(c).step_by(cols) {
        *v = F::zero();
    }
}

/// Copy of `model` with masked units physically removed and every coupled
/// matrix re-packed. The result carries no masks.
pub fn shrink_model<F: Real>(model: &Model<F>) -> Result<Model<F>> {
    let mut out = model.clone();
    out.set_masks(None)?;
    let Some(masks) = model.masks() else {
        return Ok(out);
    };
    let blocks: Vec<(usize, FarBlockParams)> =
        model.far_blocks().map(|(l, b)| (l, b.clone())).collect();
    for (l, block) in blocks {
        let out_w = model.store.get(block.out_proj.weight);
        let d = out_w.shape()[0];
        let mut out_cols = Vec::new();
        for head in 0..block.heads.len() {
            for dir in Direction::BOTH {
                let m = masks.get(l, head, dir);
                let p = *block.dir(head, dir);
                let h = m.units();
                let keep = m.retained_indices();
                let rows: Vec<usize> = (0..4)
                    .flat_map(|gate| keep.iter().map(move |&j| gate * h + j))
                    .collect();
                let s = &model.store;
                *out.store.get_mut(p.w_ih) = take(s.get(p.w_ih), &rows, None);
                *out.store.get_mut(p.w_hh) = take(s.get(p.w_hh), &rows, Some(&keep));
                *out.store.get_mut(p.b_ih) = take_vec(s.get(p.b_ih), &rows);
                *out.store.get_mut(p.b_hh) = take_vec(s.get(p.b_hh), &rows);
                let (start, _) = block.out_proj_span(s, head, dir);
                out_cols.extend(keep.iter().map(|&j| start + j));
            }
        }
        let n = out_cols.len();
        let packed = Tensor::from_fn(&[d, n], |i| out_w.at2(i / n, out_cols[i % n]));
        *out.store.get_mut(block.out_proj.weight) = packed;
    }
    Ok(out)
}

fn take<F: Real>(t: &Tensor<F>, rows: &[usize], cols: Option<&[usize]>) -> Tensor<F> {
    let width = t.shape()[1];
    let all: Vec<usize> = (0..width).collect();
    let cols = cols.unwrap_or(&all);
    let n = cols.len();
    Tensor::from_fn(&[rows.len(), n], |i| t.at2(rows[i / n], cols[i % n]))
}

fn take_vec<F: Real>(t: &Tensor<F>, idx: &[usize]) -> Tensor<F> {
    Tensor::from_fn(&[idx.len()], |i| t.data()[idx[i]])
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RetentionRow {
    pub layer: usize,
    pub head: usize,
    pub direction: String,
    pub retained: usize,
    pub total: usize,
    pub ratio: f64,
}

/// One row per (layer, head, direction).
pub fn retention_report(masks: &MaskSet) -> Vec<RetentionRow> {
    masks
        .iter()
        .map(|(layer, head, d, m)| RetentionRow {
            layer,
            head,
            direction: d.name().to_string(),
            retained: m.retained(),
            total: m.units(),
            ratio: m.ratio(),
        })
        .collect()
}

pub fn write_retention_csv(path: &Path, rows: &[RetentionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    /// Stage 1; its `reg_coeff` weights the penalty.
    pub regularize: TrainConfig,
    pub threshold: Threshold,
    /// Stage 3, run with the masks held fixed.
    pub finetune: TrainConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            regularize: TrainConfig {
                lr: 5e-5,
                ..TrainConfig::new(Phase::PruneRegularize)
            },
            threshold: Threshold::Absolute(1e-4),
            finetune: TrainConfig {
                lr: 5e-5,
                ..TrainConfig::new(Phase::PruneFinetune)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub regularize: PhaseReport,
    pub masks: MaskSet,
    pub retention: Vec<RetentionRow>,
    pub finetune: PhaseReport,
}

/// Regularize with the Hoyer penalty, threshold-prune, then finetune with
/// the masked weights held at zero. `model` is pruned in place.
pub fn three_stage_pipeline<F: Real>(
    model: &mut Model<F>,
    data: &Dataset,
    cfg: &PruneConfig,
    exec: &Executor,
) -> Result<PruneReport> {
    let mut reg = cfg.regularize.clone();
    reg.phase = Phase::PruneRegularize;
    let mut fin = cfg.finetune.clone();
    fin.phase = Phase::PruneFinetune;
    let regularize = run_phase(model, None, data, &reg, exec)?;
    let masks = prune_by_threshold(model, cfg.threshold)?;
    let retention = retention_report(&masks);
    let finetune = run_phase(model, None, data, &fin, exec)?;
    Ok(PruneReport {
        regularize,
        masks,
        retention,
        finetune,
    })
}
