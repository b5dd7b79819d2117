//! Closed-form parameter and FLOP counts, and a wall-clock latency harness.
//!
//! FLOPs follow the multiply-accumulate convention: `macs` counts one per
//! multiply-add in matrix products and is the figure comparable to
//! published model tables; `flops = 2·macs`. Normalization, softmax and
//! pointwise nonlinearities are only counted in verbose mode, as
//! `extra_ops`.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::mask::{Direction, MaskSet};
use crate::model::Model;
use crate::tensor::{DType, Real, Tensor};

/// Per-element costs used by verbose mode.
const LN_OPS: u64 = 5;
const SOFTMAX_OPS: u64 = 3;
const GELU_OPS: u64 = 8;
const GATE_OPS: u64 = 4;
const CELL_OPS: u64 = 5;

/// Hidden sizes `[head][dir]` for one layer.
fn hidden_sizes(cfg: &ModelConfig, masks: Option<&MaskSet>, layer: usize) -> Vec<[u64; 2]> {
    (0..cfg.heads)
        .map(|h| {
            Direction::BOTH.map(|d| match masks {
                Some(m) => m.get(layer, h, d).retained() as u64,
                None => cfg.head_dim as u64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub extra_ops: u64,
}

fn attention_cost(cfg: &ModelConfig, t: u64) -> (u64, u64, u64) {
    let d = cfg.dim as u64;
    let params = 2 * d + 3 * d * d + 3 * d + d * d + d;
    let macs = t * d * 3 * d + 2 * t * t * d + t * d * d;
    let heads = cfg.heads as u64;
    let extra = LN_OPS * t * d + SOFTMAX_OPS * heads * t * t + t * d;
    (params, macs, extra)
}

fn far_cost(cfg: &ModelConfig, t: u64, hidden: &[[u64; 2]]) -> (u64, u64, u64) {
    let d = cfg.dim as u64;
    let input = d / cfg.heads as u64;
    let mut params = 2 * d + d * d + d + d;
    let mut macs = t * d * d;
    let mut extra = LN_OPS * t * d + t * d;
    let mut total_h = 0;
    for pair in hidden {
        for &h in pair {
            params += 4 * h * input + 4 * h * h + 8 * h;
            macs += t * (4 * h * input + 4 * h * h);
            extra += t * (GATE_OPS * 4 * h + CELL_OPS * h);
            total_h += h;
        }
    }
    params += d * total_h;
    macs += t * d * total_h;
    (params, macs, extra)
}

fn mlp_cost(cfg: &ModelConfig, t: u64) -> (u64, u64, u64) {
    let (d, h) = (cfg.dim as u64, cfg.mlp_hidden() as u64);
    let params = 2 * d + d * h + h + h * d + d;
    let macs = 2 * t * d * h;
    let extra = LN_OPS * t * d + GELU_OPS * t * h + t * d;
    (params, macs, extra)
}

/// MACs of one attention sublayer at `t` tokens.
pub fn attention_block_macs(cfg: &ModelConfig, t: usize) -> u64 {
    attention_cost(cfg, t as u64).1
}

/// MACs of one unpruned substitute sublayer at `t` tokens.
pub fn far_block_macs(cfg: &ModelConfig, t: usize) -> u64 {
    far_cost(cfg, t as u64, &hidden_sizes(cfg, None, 0)).1
}

/// Per-component costs at `t` tokens (the positional table is sized by the
/// config's image geometry). Entries: `embed`, `layer.{l}.mixer`,
/// `layer.{l}.mlp`, `head`.
pub fn breakdown(
    cfg: &ModelConfig,
    variant: Variant,
    t: usize,
    masks: Option<&MaskSet>,
) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    if let Some(m) = masks {
        if variant != Variant::Far || m.layers() != cfg.layers {
            return Err(Error::Config("masks do not match the model".into()));
        }
        let entries = m.iter().count();
        let fits = m.iter().all(|(_, h, _, pm)| h < cfg.heads && pm.units() == cfg.head_dim);
        if !fits || entries != cfg.layers * cfg.heads * 2 {
            return Err(Error::Config("masks do not match the model".into()));
        }
    }
    let t64 = t as u64;
    let d = cfg.dim as u64;
    let patches = t64.saturating_sub(1);
    let p = cfg.patch_dim() as u64;
    let mut out = vec![LayerCost {
        name: "embed".into(),
        params: d * p + d + d + cfg.tokens() as u64 * d,
        macs: patches * p * d,
        extra_ops: t64 * d,
    }];
    for l in 0..cfg.layers {
        let (params, macs, extra_ops) = match variant {
            Variant::Attention => attention_cost(cfg, t64),
            Variant::Far => far_cost(cfg, t64, &hidden_sizes(cfg, masks, l)),
        };
        out.push(LayerCost {
            name: format!("layer.{l}.mixer"),
            params,
            macs,
            extra_ops,
        });
        let (params, macs, extra_ops) = mlp_cost(cfg, t64);
        out.push(LayerCost {
            name: format!("layer.{l}.mlp"),
            params,
            macs,
            extra_ops,
        });
    }
    let c = cfg.num_classes as u64;
    out.push(LayerCost {
        name: "head".into(),
        params: 2 * d + d * c + c,
        macs: d * c,
        extra_ops: LN_OPS * d,
    });
    Ok(out)
}

/// Exact parameter total; masked units are excluded.
pub fn count_params(cfg: &ModelConfig, variant: Variant, masks: Option<&MaskSet>) -> Result<u64> {
    Ok(breakdown(cfg, variant, cfg.tokens(), masks)?.iter().map(|c| c.params).sum())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopCount {
    pub tokens: usize,
    pub macs: u64,
    pub flops: u64,
    /// Nonzero only in verbose mode.
    pub extra_ops: u64,
    pub layers: Vec<LayerCost>,
}

/// Forward cost of one image at `t` tokens.
pub fn count_flops(
    cfg: &ModelConfig,
    variant: Variant,
    t: usize,
    masks: Option<&MaskSet>,
    verbose: bool,
) -> Result<FlopCount> {
    let layers = breakdown(cfg, variant, t, masks)?;
    let macs = layers.iter().map(|c| c.macs).sum();
    let extra_ops = if verbose {
        layers.iter().map(|c| c.extra_ops).sum()
    } else {
        0
    };
    Ok(FlopCount {
        tokens: t,
        macs,
        flops: 2 * macs,
        extra_ops,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub runs: usize,
    pub warmups: usize,
    pub threads: usize,
    pub precision: String,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn summarize(samples: &[Duration], warmups: usize, threads: usize, precision: &str) -> Result<LatencyStats> {
    if samples.is_empty() {
        return Err(Error::invalid("bench_latency", "runs must be positive"));
    }
    let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(|a, b| a.total_cmp(b));
    let n = ms.len();
    let median = if n % 2 == 1 {
        ms[n / 2]
    } else {
        0.5 * (ms[n / 2 - 1] + ms[n / 2])
    };
    Ok(LatencyStats {
        median_ms: median,
        mean_ms: ms.iter().sum::<f64>() / n as f64,
        p10_ms: percentile(&ms, 10.0),
        p90_ms: percentile(&ms, 90.0),
        min_ms: ms[0],
        max_ms: ms[n - 1],
        runs: n,
        warmups,
        threads,
        precision: precision.to_string(),
    })
}

/// Runs `f` `warmups` times untimed, then `runs` times timed.
pub fn bench_fn(warmups: usize, runs: usize, threads: usize, precision: &str, mut f: impl FnMut()) -> Result<LatencyStats> {
    if runs == 0 {
        return Err(Error::invalid("bench_latency", "runs must be positive"));
    }
    for _ in 0..warmups {
        f();
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f();
        samples.push(t0.elapsed());
    }
    summarize(&samples, warmups, threads, precision)
}

/// Single-image forward latency on a seeded random input.
pub fn bench_latency<F: Real>(model: &Model<F>, warmups: usize, runs: usize, seed: u64) -> Result<LatencyStats> {
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::<F>::from_fn(&[c.channels, c.image_size, c.image_size], |_| {
        F::lit(rng.random_range(-1.0..1.0))
    });
    let name = match F::DTYPE {
        DType::F64 => "f64",
        _ => "f32",
    };
    let mut err = None;
    let stats = bench_fn(warmups, runs, 1, name, || {
        if let Err(e) = model.logits(&image) {
            err.get_or_insert(e);
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(stats),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub variant: Variant,
    pub image_size: usize,
    pub params: u64,
    pub flops: FlopCount,
    pub latency: Option<LatencyStats>,
}

impl CostReport {
    pub fn new(cfg: &ModelConfig, variant: Variant, masks: Option<&MaskSet>, verbose: bool) -> Result<Self> {
        Ok(Self {
            variant,
            image_size: cfg.image_size,
            params: count_params(cfg, variant, masks)?,
            flops: count_flops(cfg, variant, cfg.tokens(), masks, verbose)?,
            latency: None,
        })
    }

    /// CSV with one row per component and a final `total` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["component", "params", "macs", "flops", "extra_ops"])?;
        for c in &self.flops.layers {
            w.write_record([
                c.name.clone(),
                c.params.to_string(),
                c.macs.to_string(),
                (2 * c.macs).to_string(),
                if self.flops.extra_ops > 0 { c.extra_ops } else { 0 }.to_string(),
            ])?;
        }
        w.write_record([
            "total".to_string(),
            self.params.to_string(),
            self.flops.macs.to_string(),
            self.flops.flops.to_string(),
            self.flops.extra_ops.to_string(),
        ])?;
        w.flush().map_err(|e| Error::io("<report>", e))
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:?} @{}px: {:.2}M params, {:.3}G MACs ({:.3}G FLOPs)",
            self.variant,
            self.image_size,
            self.params as f64 / 1e6,
            self.flops.macs as f64 / 1e9,
            self.flops.flops as f64 / 1e9
        );
        if let Some(l) = &self.latency {
            s.push_str(&format!(
                ", latency median {:.3} ms (p10 {:.3}, p90 {:.3}; {} runs after {} warmups, {} thread, {})",
                l.median_ms, l.p10_ms, l.p90_ms, l.runs, l.warmups, l.threads, l.precision
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests;
