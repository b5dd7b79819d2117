//! CLS-to-patch saliency and token-to-token dependency maps.
//!
//! Attention layers report their softmax weights. Substitute layers have no
//! attention, so both maps come from gradients taken with respect to the
//! layer's input tokens.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::Variant;
use crate::error::{Error, Result};
use crate::far::{far_block_forward, FarForwardOptions};
use crate::model::{argmax, ForwardOptions, Model};
use crate::par::Executor;
use crate::tensor::{Real, Tensor};

/// Scalar whose gradient defines substitute saliency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// ℓ₂ norm of the head's CLS output.
    #[default]
    Norm,
    /// Sum of the head's CLS output.
    Sum,
    /// Logit of the predicted class at the end of the network.
    Logit,
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(Self::Norm),
            "sum" => Ok(Self::Sum),
            "logit" => Ok(Self::Logit),
            other => Err(Error::Config(format!("unknown attribution target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    /// One score per token, CLS included. For attention layers this is the
    /// CLS attention row and sums to 1.
    pub raw: Vec<f64>,
    /// Patch scores on the `grid × grid` layout, min-max normalized.
    pub map: Tensor<f64>,
}

fn check_range<F: Real>(model: &Model<F>, layer: usize, head: usize) -> Result<()> {
    let c = &model.config;
    if layer >= c.layers {
        return Err(Error::invalid("attribution", format!("layer {layer} out of range ({} layers)", c.layers)));
    }
    if head >= c.heads {
        return Err(Error::invalid("attribution", format!("head {head} out of range ({} heads)", c.heads)));
    }
    Ok(())
}

/// Tokens entering `layer`.
fn layer_input<F: Real>(model: &Model<F>, image: &Tensor<F>, layer: usize) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let mut x = model.embed_tokens(&mut g, image)?;
    for l in 0..layer {
        x = model.layer_forward(&mut g, l, x, &ForwardOptions::default())?.out;
    }
    Ok(g.value(x).clone())
}

fn f<F: Real>(v: F) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Maps values to `[0, 1]`; a constant input maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

fn patch_map(raw: &[f64], grid: usize) -> Tensor<f64> {
    Tensor::new(vec![grid, grid], min_max(&raw[1..])).expect("grid matches patch count")
}

/// ℓ₂ norm of each row of `grad[T × D]`.
pub fn row_norms<F: Real>(grad: &Tensor<F>) -> Vec<f64> {
    let (t, d) = grad.dims2();
    (0..t)
        .map(|r| {
            grad.data()[r * d..(r + 1) * d]
                .iter()
                .map(|v| f(*v) * f(*v))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// `‖row‖₂` or `Σ row` as a scalar; `None` when the norm is taken at zero.
fn scalarize<F: Real>(g: &mut Graph<'_, F>, row: Var, target: Target) -> Option<Var> {
    match target {
        Target::Sum | Target::Logit => Some(g.sum(row)),
        Target::Norm => {
            let sq = g.mul(row, row).ok()?;
            let s = g.sum(sq);
            if g.value(s).data()[0] == F::zero() {
                None
            } else {
                Some(g.sqrt(s))
            }
        }
    }
}

/// Per-token gradient norms of a scalar built from `layer`'s input.
fn input_gradient<'a, F: Real>(
    x0: &Tensor<F>,
    build: impl FnOnce(&mut Graph<'a, F>, Var) -> Result<Option<Var>>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.input(x0.clone());
    match build(&mut g, x)? {
        None => Ok(vec![0.0; x0.shape()[0]]),
        Some(s) => {
            g.backward(s)?;
            match g.grad(x) {
                Some(gr) => Ok(row_norms(gr)),
                None => Ok(vec![0.0; x0.shape()[0]]),
            }
        }
    }
}

/// Saliency of each patch for the CLS token at (`layer`, `head`).
pub fn cls_saliency<F: Real>(
    model: &Model<F>,
    image: &Tensor<F>,
    layer: usize,
    head: usize,
    target: Target,
) -> Result<Saliency> {
    check_range(model, layer, head)?;
    let grid = model.config.grid();
    let x0 = layer_input(model, image, layer)?;
    let raw = match model.variant {
        Variant::Attention => {
            let mut g = Graph::new();
            let x = g.input(x0);
            let out = model.layer_forward(&mut g, layer, x, &ForwardOptions::default())?;
            let attn = g.value(out.attention[head]);
            attn.row(0).iter().map(|&v| f(v)).collect()
        }
        Variant::Far => match target {
            Target::Logit => input_gradient(&x0, |g, x| {
                let mut h = model.layer_forward(g, layer, x, &ForwardOptions::default())?.out;
                for l in layer + 1..model.config.layers {
                    h = model.layer_forward(g, l, h, &ForwardOptions::default())?.out;
                }
                let logits = model.classify(g, h)?;
                let class = argmax(g.value(logits).data());
                Ok(Some(g.slice(logits, 1, class, 1)?))
            })?,
            _ => {
                let block = model
                    .far_block(layer)
                    .ok_or_else(|| Error::invalid("cls_saliency", "layer has no substitute block"))?;
                let masks = model.masks().map(|m| m.masks[layer].as_slice());
                input_gradient(&x0, |g, x| {
                    let out = far_block_forward(g, &model.store, block, x, masks, FarForwardOptions::default())?;
                    let cls = g.slice(out.heads[head], 0, 0, 1)?;
                    Ok(scalarize(g, cls, target))
                })?
            }
        },
    };
    let map = patch_map(&raw, grid);
    Ok(Saliency { raw, map })
}

/// Saliency for many images, in input order.
pub fn cls_saliency_batch<F: Real>(
    model: &Model<F>,
    images: &[Tensor<F>],
    layer: usize,
    head: usize,
    target: Target,
    exec: &Executor,
) -> Result<Vec<Saliency>> {
    exec.map(images, |img| cls_saliency(model, img, layer, head, target))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DependencyOptions {
    /// When false the reverse scans are removed, giving a causal map.
    pub reverse: bool,
}

impl Default for DependencyOptions {
    fn default() -> Self {
        Self { reverse: true }
    }
}

/// Row-normalized `[T × T]` map of how much output token `q` depends on
/// input token `k` at `layer`. Attention layers use head-averaged weights.
/// Substitute layers use `‖∂‖mixer_q‖ / ∂x_k‖` on the pre-residual output.
pub fn token_dependency<F: Real>(
    model: &Model<F>,
    image: &Tensor<F>,
    layer: usize,
    opts: DependencyOptions,
) -> Result<Tensor<f64>> {
    check_range(model, layer, 0)?;
    let x0 = layer_input(model, image, layer)?;
    let t = x0.shape()[0];
    let mut m = vec![0.0; t * t];
    match model.variant {
        Variant::Attention => {
            let mut g = Graph::new();
            let x = g.input(x0);
            let out = model.layer_forward(&mut g, layer, x, &ForwardOptions::default())?;
            let heads = out.attention.len() as f64;
            for &a in &out.attention {
                for (dst, v) in m.iter_mut().zip(g.value(a).data()) {
                    *dst += f(*v) / heads;
                }
            }
        }
        Variant::Far => {
            let block = model
                .far_block(layer)
                .ok_or_else(|| Error::invalid("token_dependency", "layer has no substitute block"))?;
            let masks = model.masks().map(|m| m.masks[layer].as_slice());
            let far = FarForwardOptions { reverse: opts.reverse };
            for q in 0..t {
                let row = input_gradient(&x0, |g, x| {
                    let out = far_block_forward(g, &model.store, block, x, masks, far)?;
                    let tok = g.slice(out.mixer, 0, q, 1)?;
                    Ok(scalarize(g, tok, Target::Norm))
                })?;
                m[q * t..(q + 1) * t].copy_from_slice(&row);
            }
        }
    }
    for row in m.chunks_mut(t) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Tensor::new(vec![t, t], m)
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

/// Fraction of the total mass within `|q − k| ≤ width`.
pub fn band_mass(m: &Tensor<f64>, width: usize) -> f64 {
    let (rows, cols) = m.dims2();
    let mut band = 0.0;
    let mut total = 0.0;
    for q in 0..rows {
        for k in 0..cols {
            let v = m.at2(q, k);
            total += v;
            if q.abs_diff(k) <= width {
                band += v;
            }
        }
    }
    if total > 0.0 {
        band / total
    } else {
        0.0
    }
}

/// Band fraction of a uniform `[t × t]` matrix.
pub fn uniform_band_fraction(t: usize, width: usize) -> f64 {
    let inside = (0..t)
        .flat_map(|q| (0..t).map(move |k| (q, k)))
        .filter(|&(q, k)| q.abs_diff(k) <= width)
        .count();
    inside as f64 / (t * t) as f64
}

/// Binary PGM with the maximum entry at 255 and the minimum at 0.
pub fn pgm_bytes(m: &Tensor<f64>) -> Vec<u8> {
    let (h, w) = m.dims2();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        min_max(m.data())
            .into_iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

fn write_pgm(m: &Tensor<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, pgm_bytes(m)).map_err(|e| Error::io(path, e))
}

fn write_csv(m: &Tensor<f64>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let (_, cols) = m.dims2();
    for row in m.data().chunks(cols) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headerless numeric CSV written by [`export_heatmaps`].
pub fn read_csv_matrix(path: &Path) -> Result<Tensor<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for rec in r.records() {
        let rec = rec?;
        cols = rec.len();
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Checkpoint(format!("{}: bad number `{field}`", path.display())))?;
            data.push(v);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, cols], data)
}

/// Writes `dir/{name}.pgm` and `dir/{name}.csv` for each matrix.
pub fn export_heatmaps(matrices: &[(String, Tensor<f64>)], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, m) in matrices {
        if m.shape().len() != 2 {
            return Err(Error::invalid("export_heatmaps", format!("`{name}` is not a matrix")));
        }
        let pgm = dir.join(format!("{name}.pgm"));
        write_pgm(m, &pgm)?;
        let csv = dir.join(format!("{name}.csv"));
        write_csv(m, &csv)?;
        written.push(pgm);
        written.push(csv);
    }
    Ok(written)
}

/// Renders a matrix as rows of space-separated values with 4 decimals.
pub fn render<W: Write>(m: &Tensor<f64>, mut out: W) -> std::io::Result<()> {
    let (_, cols) = m.dims2();
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}
