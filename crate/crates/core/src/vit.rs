//! DeiT-style backbone: patch embedding, pre-norm self-attention and MLP
//! sublayers.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// `y = x · Wᵀ + b` with `W` stored `[out × in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn apply<'a, F: Real>(
        &self,
        g: &mut Graph<'a, F>,
        store: &'a ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn apply<'a, F: Real>(
        &self,
        g: &mut Graph<'a, F>,
        store: &'a ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, F::lit(LN_EPS))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedParams {
    pub patch: Linear,
    /// `[1 × D]`
    pub cls: ParamId,
    /// `[T × D]`
    pub pos: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub ln1: LayerNormParams,
    /// `[3D × D]`, output columns ordered q | k | v, each split by head.
    pub qkv: Linear,
    pub proj: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Cuts a `[C × H × W]` image into non-overlapping patches, one row per
/// patch in raster order, each flattened channel-major.
pub fn image_to_patches<F: Real>(image: &Tensor<F>, cfg: &ModelConfig) -> Result<Tensor<F>> {
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != want {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            lhs: image.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    let (p, s, grid) = (cfg.patch_size, cfg.image_size, cfg.grid());
    let pd = cfg.patch_dim();
    let src = image.data();
    let mut out = Vec::with_capacity(cfg.num_patches() * pd);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    let row = (c * s + gy * p + dy) * s + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), pd], out)
}

/// Patch projection, CLS token at position 0, plus positional embedding.
pub fn patch_embed<'a, F: Real>(
    g: &mut Graph<'a, F>,
    store: &'a ParamStore<F>,
    p: &EmbedParams,
    image: &Tensor<F>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let patches = g.constant(image_to_patches(image, cfg)?);
    let emb = p.patch.apply(g, store, patches)?;
    let cls = g.param(store, p.cls);
    let seq = g.concat(&[cls, emb], 0)?;
    let pos = g.param(store, p.pos);
    g.add(seq, pos)
}

/// `y = x + Attn(LN1(x))`. Also returns each head's `[T × T]` softmax
/// attention matrix.
pub fn attention_block<'a, F: Real>(
    g: &mut Graph<'a, F>,
    store: &'a ParamStore<F>,
    p: &AttentionParams,
    x: Var,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    let (d, dh) = (cfg.dim, cfg.head_dim);
    if g.shape(x).len() != 2 || g.shape(x)[1] != d {
        return Err(Error::ShapeMismatch {
            op: "attention_block",
            lhs: g.shape(x).to_vec(),
            rhs: vec![0, d],
        });
    }
    let h = p.ln1.apply(g, store, x)?;
    let qkv = p.qkv.apply(g, store, h)?;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attn = Vec::with_capacity(cfg.heads);
    for n in 0..cfg.heads {
        let q = g.slice(qkv, 1, n * dh, dh)?;
        let k = g.slice(qkv, 1, d + n * dh, dh)?;
        let v = g.slice(qkv, 1, 2 * d + n * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax(scores, 1)?;
        heads.push(g.matmul(a, v)?);
        attn.push(a);
    }
    let merged = g.concat(&heads, 1)?;
    let out = p.proj.apply(g, store, merged)?;
    Ok((g.add(x, out)?, attn))
}

/// `x_next = y + MLP(LN2(y))`.
pub fn mlp_block<'a, F: Real>(
    g: &mut Graph<'a, F>,
    store: &'a ParamStore<F>,
    p: &MlpParams,
    y: Var,
) -> Result<Var> {
    let h = p.ln2.apply(g, store, y)?;
    let h = p.fc1.apply(g, store, h)?;
    let h = g.gelu(h);
    let h = p.fc2.apply(g, store, h)?;
    g.add(y, h)
}
