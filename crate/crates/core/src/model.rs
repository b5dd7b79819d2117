//! Whole-network assembly for both the attention teacher and the FAR
//! student.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::far::{far_block_forward, FarBlockParams, FarForwardOptions, LstmDirParams};
use crate::init::{trunc_normal, uniform, TRUNC_STD};
use crate::mask::{Direction, MaskSet};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vit::{
    attention_block, mlp_block, patch_embed, AttentionParams, EmbedParams, LayerNormParams,
    Linear, MlpParams,
};

#[derive(Debug, Clone)]
pub enum Mixer {
    Attention(AttentionParams),
    Far(FarBlockParams),
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub mixer: Mixer,
    pub mlp: MlpParams,
}

/// A vision transformer whose token mixers are either all self-attention
/// (the teacher) or all BiLSTM substitutes.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub variant: Variant,
    pub store: ParamStore<F>,
    pub embed: EmbedParams,
    pub layers: Vec<Layer>,
    pub norm: LayerNormParams,
    pub head: Linear,
    masks: Option<MaskSet>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub far: FarForwardOptions,
}

/// Everything a forward pass exposes to the trainers and analyses.
pub struct ForwardOutput {
    /// `[1 × classes]`
    pub logits: Var,
    /// `block_outputs[i]` is the output of layer `i` after its MLP sublayer.
    pub block_outputs: Vec<Var>,
    /// Per layer, per head `[T × T]` attention (empty for FAR layers).
    pub attention: Vec<Vec<Var>>,
}

pub struct LayerOutput {
    /// output of the full layer
    pub out: Var,
    /// token mixer output before its residual add
    pub mixer: Var,
    pub attention: Vec<Var>,
}

/// How fresh parameters are filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Seed(u64),
    Zeros,
}

struct Builder<F: Real> {
    store: ParamStore<F>,
    rng: Option<ChaCha8Rng>,
}

impl<F: Real> Builder<F> {
    fn new(init: Init) -> Self {
        Self {
            store: ParamStore::new(),
            rng: match init {
                Init::Seed(s) => Some(ChaCha8Rng::seed_from_u64(s)),
                Init::Zeros => None,
            },
        }
    }

    fn trunc(&mut self, name: String, group: ParamGroup, shape: &[usize]) -> ParamId {
        let t = match &mut self.rng {
            Some(r) => trunc_normal(r, shape, TRUNC_STD),
            None => Tensor::zeros(shape),
        };
        self.store.add(name, group, t)
    }

    fn uniform(&mut self, name: String, group: ParamGroup, shape: &[usize], bound: f64) -> ParamId {
        let t = match &mut self.rng {
            Some(r) => uniform(r, shape, bound),
            None => Tensor::zeros(shape),
        };
        self.store.add(name, group, t)
    }

    fn fill(&mut self, name: String, group: ParamGroup, shape: &[usize], v: f64) -> ParamId {
        let v = if self.rng.is_some() { v } else { 0.0 };
        self.store.add(name, group, Tensor::full(shape, F::lit(v)))
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, fan_out: usize, fan_in: usize) -> Linear {
        let weight = self.trunc(format!("{prefix}.weight"), group, &[fan_out, fan_in]);
        let bias = Some(self.fill(format!("{prefix}.bias"), group, &[fan_out], 0.0));
        Linear { weight, bias }
    }

    fn layer_norm(&mut self, prefix: &str, group: ParamGroup, d: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: self.fill(format!("{prefix}.gamma"), group, &[d], 1.0),
            beta: self.fill(format!("{prefix}.beta"), group, &[d], 0.0),
        }
    }

    fn attention(&mut self, l: usize, cfg: &ModelConfig) -> AttentionParams {
        let g = ParamGroup::Attention;
        let d = cfg.dim;
        AttentionParams {
            ln1: self.layer_norm(&format!("blocks.{l}.ln1"), g, d),
            qkv: self.linear(&format!("blocks.{l}.attn.qkv"), g, 3 * d, d),
            proj: self.linear(&format!("blocks.{l}.attn.proj"), g, d, d),
        }
    }

    fn lstm_dir(&mut self, prefix: &str, input: usize, hidden: usize) -> LstmDirParams {
        let g = ParamGroup::Substitute;
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = self.uniform(format!("{prefix}.w_ih"), g, &[4 * hidden, input], bound);
        let w_hh = self.uniform(format!("{prefix}.w_hh"), g, &[4 * hidden, hidden], bound);
        // forget-gate bias starts at +1
        let b_ih = {
            let mut t = Tensor::<F>::zeros(&[4 * hidden]);
            if self.rng.is_some() {
                for v in &mut t.data_mut()[hidden..2 * hidden] {
                    *v = F::one();
                }
            }
            self.store.add(format!("{prefix}.b_ih"), g, t)
        };
        let b_hh = self.fill(format!("{prefix}.b_hh"), g, &[4 * hidden], 0.0);
        LstmDirParams {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        }
    }

    fn far(&mut self, l: usize, cfg: &ModelConfig) -> FarBlockParams {
        let g = ParamGroup::Substitute;
        let (d, dh) = (cfg.dim, cfg.head_dim);
        let ln = self.layer_norm(&format!("far.{l}.ln"), g, d);
        let in_proj = self.linear(&format!("far.{l}.in_proj"), g, d, d);
        let heads = (0..cfg.heads)
            .map(|n| {
                Direction::BOTH.map(|dir| {
                    self.lstm_dir(&format!("far.{l}.{n}.{}", dir.name()), d / cfg.heads, dh)
                })
            })
            .collect();
        let out_proj = self.linear(&format!("far.{l}.out_proj"), g, d, 2 * cfg.heads * dh);
        FarBlockParams {
            ln,
            in_proj,
            heads,
            out_proj,
        }
    }

    fn mlp(&mut self, l: usize, cfg: &ModelConfig) -> MlpParams {
        let g = ParamGroup::Backbone;
        MlpParams {
            ln2: self.layer_norm(&format!("blocks.{l}.ln2"), g, cfg.dim),
            fc1: self.linear(&format!("blocks.{l}.mlp.fc1"), g, cfg.mlp_hidden(), cfg.dim),
            fc2: self.linear(&format!("blocks.{l}.mlp.fc2"), g, cfg.dim, cfg.mlp_hidden()),
        }
    }
}

impl<F: Real> Model<F> {
    /// Builds a freshly initialized model. Projections use truncated normal
    /// (σ = 0.02), LayerNorms start at identity, LSTM weights are uniform in
    /// ±1/√hidden with forget bias +1.
    pub fn new(config: ModelConfig, variant: Variant, init: Init) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut b = Builder::<F>::new(init);
        let bb = ParamGroup::Backbone;
        let embed = EmbedParams {
            patch: b.linear("embed.patch", bb, cfg.dim, cfg.patch_dim()),
            cls: b.trunc("embed.cls".into(), bb, &[1, cfg.dim]),
            pos: b.trunc("embed.pos".into(), bb, &[cfg.tokens(), cfg.dim]),
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                let mixer = match variant {
                    Variant::Attention => Mixer::Attention(b.attention(l, cfg)),
                    Variant::Far => Mixer::Far(b.far(l, cfg)),
                };
                Layer {
                    mixer,
                    mlp: b.mlp(l, cfg),
                }
            })
            .collect();
        let norm = b.layer_norm("norm", bb, cfg.dim);
        let head = b.linear("head", bb, cfg.num_classes, cfg.dim);
        Ok(Self {
            config,
            variant,
            store: b.store,
            embed,
            layers,
            norm,
            head,
            masks: None,
        })
    }

    pub fn masks(&self) -> Option<&MaskSet> {
        self.masks.as_ref()
    }

    /// Installs retention masks; zeroing of the coupled weights is the
    /// pruner's job.
    pub fn set_masks(&mut self, masks: Option<MaskSet>) -> Result<()> {
        if let Some(m) = &masks {
            if self.variant != Variant::Far {
                return Err(Error::Config("masks only apply to FAR models".into()));
            }
            if m.layers() != self.layers.len() {
                return Err(Error::Config(format!(
                    "mask set covers {} layers, model has {}",
                    m.layers(),
                    self.layers.len()
                )));
            }
            for (l, h, d, pm) in m.iter() {
                let block = self.far_block(l).expect("far");
                if h >= block.heads.len() || pm.units() != block.dir(h, d).hidden(&self.store) {
                    return Err(Error::Config(format!(
                        "mask ({l},{h},{}) does not match parameters",
                        d.name()
                    )));
                }
            }
        }
        self.masks = masks;
        Ok(())
    }

    pub fn far_block(&self, layer: usize) -> Option<&FarBlockParams> {
        match &self.layers.get(layer)?.mixer {
            Mixer::Far(p) => Some(p),
            Mixer::Attention(_) => None,
        }
    }

    pub fn far_blocks(&self) -> impl Iterator<Item = (usize, &FarBlockParams)> {
        self.layers.iter().enumerate().filter_map(|(l, layer)| match &layer.mixer {
            Mixer::Far(p) => Some((l, p)),
            Mixer::Attention(_) => None,
        })
    }

    pub fn embed_tokens<'a>(&'a self, g: &mut Graph<'a, F>, image: &Tensor<F>) -> Result<Var> {
        patch_embed(g, &self.store, &self.embed, image, &self.config)
    }

    /// Runs layer `l` on `x[T × D]`.
    pub fn layer_forward<'a>(
        &'a self,
        g: &mut Graph<'a, F>,
        l: usize,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<LayerOutput> {
        let layer = self
            .layers
            .get(l)
            .ok_or_else(|| Error::invalid("layer_forward", format!("layer {l} out of range")))?;
        let (y, mixer, attention) = match &layer.mixer {
            Mixer::Attention(p) => {
                let (y, attn) = attention_block(g, &self.store, p, x, &self.config)?;
                let mixer = g.sub(y, x)?;
                (y, mixer, attn)
            }
            Mixer::Far(p) => {
                let masks = self.masks.as_ref().map(|m| m.masks[l].as_slice());
                let out = far_block_forward(g, &self.store, p, x, masks, opts.far)?;
                (out.y, out.mixer, Vec::new())
            }
        };
        let out = mlp_block(g, &self.store, &layer.mlp, y)?;
        Ok(LayerOutput {
            out,
            mixer,
            attention,
        })
    }

    /// Final LayerNorm on the CLS token, then the linear classifier.
    pub fn classify<'a>(&'a self, g: &mut Graph<'a, F>, x: Var) -> Result<Var> {
        let cls = g.slice(x, 0, 0, 1)?;
        let cls = self.norm.apply(g, &self.store, cls)?;
        self.head.apply(g, &self.store, cls)
    }

    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, F>,
        image: &Tensor<F>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let mut x = self.embed_tokens(g, image)?;
        let mut block_outputs = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let out = self.layer_forward(g, l, x, opts)?;
            x = out.out;
            block_outputs.push(x);
            attention.push(out.attention);
        }
        let logits = self.classify(g, x)?;
        Ok(ForwardOutput {
            logits,
            block_outputs,
            attention,
        })
    }

    /// Logits and per-layer block outputs as plain tensors.
    pub fn teacher_forward(&self, image: &Tensor<F>) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, &ForwardOptions::default())?;
        let blocks = out
            .block_outputs
            .iter()
            .map(|&v| g.value(v).clone())
            .collect();
        Ok((g.value(out.logits).clone(), blocks))
    }

    pub fn logits(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, &ForwardOptions::default())?;
        Ok(g.value(out.logits).clone())
    }

    pub fn predict(&self, image: &Tensor<F>) -> Result<usize> {
        let logits = self.logits(image)?;
        Ok(argmax(logits.data()))
    }

    /// Marks every parameter of `group` (and only those) trainable when
    /// `only` is given, or all parameters otherwise.
    pub fn set_trainable_groups(&mut self, only: Option<&[ParamGroup]>) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let on = only.is_none_or(|gs| gs.contains(&self.store.group(id)));
            self.store.set_trainable(id, on);
        }
    }
}

pub fn argmax<F: Real>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Swaps every attention sublayer of `teacher` for a fresh BiLSTM block.
/// Embeddings, MLP sublayers, LN2, final norm and head are copied over
/// unchanged; each substitute LayerNorm starts from the teacher's LN1.
pub fn replace_attention<F: Real>(teacher: &Model<F>, seed: u64) -> Result<Model<F>> {
    if teacher.variant != Variant::Attention {
        return Err(Error::Config("replace_attention expects an attention teacher".into()));
    }
    let cfg = teacher.config;
    if !cfg.dim.is_multiple_of(cfg.heads) {
        return Err(Error::Config(format!(
            "dim {} is not divisible by heads {}",
            cfg.dim, cfg.heads
        )));
    }
    let mut student = Model::<F>::new(cfg, Variant::Far, Init::Seed(seed))?;
    for (id, name, _) in teacher.store.iter() {
        if teacher.store.group(id) != ParamGroup::Backbone {
            continue;
        }
        let sid = student
            .store
            .find(name)
            .ok_or_else(|| Error::Config(format!("student lacks backbone tensor {name}")))?;
        *student.store.get_mut(sid) = teacher.store.get(id).clone();
    }
    for l in 0..cfg.layers {
        let Mixer::Attention(attn) = &teacher.layers[l].mixer else {
            unreachable!()
        };
        let far = student.far_block(l).expect("far layer").ln;
        *student.store.get_mut(far.gamma) = teacher.store.get(attn.ln1.gamma).clone();
        *student.store.get_mut(far.beta) = teacher.store.get(attn.ln1.beta).clone();
    }
    Ok(student)
}
