//! Multi-head bidirectional LSTM substitute for self-attention.
//!
//! `y = x + out_proj(concat_n BiLSTM_n(split_n(in_proj(LN(x)))))`
//!
//! Gate blocks are stacked in the fixed order input, forget, cell, output;
//! each block is `hidden` rows tall. Hidden sizes are read from the
//! parameter shapes, so a physically shrunk block (different hidden size
//! per direction) runs through the same code as a full one.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::{Direction, PruneMask};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vit::{LayerNormParams, Linear};

/// Gate order within the stacked LSTM matrices.
pub const GATES: [&str; 4] = ["input", "forget", "cell", "output"];

#[derive(Debug, Clone, Copy)]
pub struct LstmDirParams {
    /// `[4·hidden × input]`
    pub w_ih: ParamId,
    /// `[4·hidden × hidden]`
    pub w_hh: ParamId,
    /// `[4·hidden]`
    pub b_ih: ParamId,
    /// `[4·hidden]`
    pub b_hh: ParamId,
}

impl LstmDirParams {
    pub fn hidden<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.w_hh).shape()[1]
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }

    /// Graph leaves for this direction, multiplied by the mask when given.
    pub fn vars<'a, F: Real>(
        &self,
        g: &mut Graph<'a, F>,
        store: &'a ParamStore<F>,
        mask: Option<&PruneMask>,
    ) -> Result<DirVars> {
        let hidden = self.hidden(store);
        let input = store.get(self.w_ih).shape()[1];
        let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
            if store.get(id).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "lstm params",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            Ok(())
        };
        expect(self.w_ih, &[4 * hidden, input])?;
        expect(self.w_hh, &[4 * hidden, hidden])?;
        expect(self.b_ih, &[4 * hidden])?;
        expect(self.b_hh, &[4 * hidden])?;

        let mut w_ih = g.param(store, self.w_ih);
        let mut w_hh = g.param(store, self.w_hh);
        let mut b_ih = g.param(store, self.b_ih);
        let mut b_hh = g.param(store, self.b_hh);
        if let Some(m) = mask {
            if m.units() != hidden {
                return Err(Error::invalid(
                    "far_block_forward",
                    format!("mask has {} units but the direction has {hidden}", m.units()),
                ));
            }
            let rows = g.constant(m.gate_matrix(input, false));
            let rows_cols = g.constant(m.gate_matrix(hidden, true));
            let bias = g.constant(m.gate_vector());
            w_ih = g.mul(w_ih, rows)?;
            w_hh = g.mul(w_hh, rows_cols)?;
            b_ih = g.mul(b_ih, bias)?;
            b_hh = g.mul(b_hh, bias)?;
        }
        Ok(DirVars {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            hidden,
        })
    }
}

/// One direction's parameters as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct DirVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct FarBlockParams {
    pub ln: LayerNormParams,
    /// `[D × D]`; output column block `n` feeds head `n`.
    pub in_proj: Linear,
    /// `heads[n][Direction::index()]`
    pub heads: Vec<[LstmDirParams; 2]>,
    /// `[D × Σ hidden]`; input columns ordered head 0 fwd, head 0 rev,
    /// head 1 fwd, ...
    pub out_proj: Linear,
}

impl FarBlockParams {
    pub fn dir(&self, head: usize, dir: Direction) -> &LstmDirParams {
        &self.heads[head][dir.index()]
    }

    /// First column of `out_proj` fed by (head, dir), and its width.
    pub fn out_proj_span<F: Real>(
        &self,
        store: &ParamStore<F>,
        head: usize,
        dir: Direction,
    ) -> (usize, usize) {
        let mut start = 0;
        for (n, dirs) in self.heads.iter().enumerate() {
            for d in Direction::BOTH {
                let w = dirs[d.index()].hidden(store);
                if n == head && d == dir {
                    return (start, w);
                }
                start += w;
            }
        }
        unreachable!("head {head} out of range")
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln.gamma, self.ln.beta, self.in_proj.weight];
        ids.extend(self.in_proj.bias);
        for dirs in &self.heads {
            for d in dirs {
                ids.extend(d.ids());
            }
        }
        ids.push(self.out_proj.weight);
        ids.extend(self.out_proj.bias);
        ids
    }
}

/// Toggles for ablations used by the attribution analysis.
#[derive(Debug, Clone, Copy)]
pub struct FarForwardOptions {
    /// When false the reverse scans are skipped and their output columns are
    /// zero.
    pub reverse: bool,
}

impl Default for FarForwardOptions {
    fn default() -> Self {
        Self { reverse: true }
    }
}

pub struct FarBlockOutput {
    /// `x + mixer`
    pub y: Var,
    /// substitute output before the residual add
    pub mixer: Var,
    /// `[T × (h_fwd + h_rev)]` per head, before `out_proj`
    pub heads: Vec<Var>,
}

/// One LSTM cell update. `x_t` is `[1 × input]`, `h` and `c` are
/// `[1 × hidden]`.
pub fn lstm_step<F: Real>(
    g: &mut Graph<'_, F>,
    x_t: Var,
    h: Var,
    c: Var,
    p: &DirVars,
) -> Result<(Var, Var)> {
    let from_x = g.linear(x_t, p.w_ih, Some(p.b_ih))?;
    let from_h = g.linear(h, p.w_hh, Some(p.b_hh))?;
    let gates = g.add(from_x, from_h)?;
    let hd = p.hidden;
    let parts = g.split(gates, 1, &[hd, hd, hd, hd])?;
    let i = g.sigmoid(parts[0]);
    let f = g.sigmoid(parts[1]);
    let cand = g.tanh(parts[2]);
    let o = g.sigmoid(parts[3]);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Runs one direction over `input[T × in]` from zero state; row `t` of the
/// result is the hidden state at original position `t`.
pub fn lstm_scan<F: Real>(
    g: &mut Graph<'_, F>,
    input: Var,
    p: &DirVars,
    reverse: bool,
) -> Result<Var> {
    let steps = g.shape(input)[0];
    let mut h = g.constant(Tensor::zeros(&[1, p.hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, p.hidden]));
    let mut outs = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let x_t = g.slice(input, 0, t, 1)?;
        (h, c) = lstm_step(g, x_t, h, c, p)?;
        outs[t] = h;
    }
    g.concat(&outs, 0)
}

/// Forward scan in the leading columns, reverse scan (re-aligned to
/// original positions) in the trailing columns.
pub fn bilstm_head<F: Real>(
    g: &mut Graph<'_, F>,
    input: Var,
    fwd: &DirVars,
    rev: Option<&DirVars>,
    rev_hidden: usize,
) -> Result<Var> {
    let steps = g.shape(input)[0];
    let hf = lstm_scan(g, input, fwd, false)?;
    let hr = match rev {
        Some(p) => lstm_scan(g, input, p, true)?,
        None => g.constant(Tensor::zeros(&[steps, rev_hidden])),
    };
    g.concat(&[hf, hr], 1)
}

/// Full substitute block on `x[T × D]`. `masks`, when given, holds one
/// `[fwd, rev]` pair per head.
pub fn far_block_forward<'a, F: Real>(
    g: &mut Graph<'a, F>,
    store: &'a ParamStore<F>,
    p: &FarBlockParams,
    x: Var,
    masks: Option<&[[PruneMask; 2]]>,
    opts: FarForwardOptions,
) -> Result<FarBlockOutput> {
    let heads = p.heads.len();
    let xs = g.shape(x).to_vec();
    let d = store.get(p.in_proj.weight).shape()[0];
    if xs.len() != 2 || xs[1] != d {
        return Err(Error::ShapeMismatch {
            op: "far_block_forward",
            lhs: xs,
            rhs: vec![0, d],
        });
    }
    if !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    if let Some(m) = masks {
        if m.len() != heads {
            return Err(Error::invalid(
                "far_block_forward",
                format!("{} head masks for {heads} heads", m.len()),
            ));
        }
    }
    let head_in = d / heads;
    let h = p.ln.apply(g, store, x)?;
    let projected = p.in_proj.apply(g, store, h)?;

    let mut head_outs = Vec::with_capacity(heads);
    for (n, dirs) in p.heads.iter().enumerate() {
        let input = g.slice(projected, 1, n * head_in, head_in)?;
        let mask_of = |dir: Direction| masks.map(|m| &m[n][dir.index()]);
        let fwd = dirs[0].vars(g, store, mask_of(Direction::Forward))?;
        let rev_hidden = dirs[1].hidden(store);
        let rev = if opts.reverse {
            Some(dirs[1].vars(g, store, mask_of(Direction::Reverse))?)
        } else {
            None
        };
        head_outs.push(bilstm_head(g, input, &fwd, rev.as_ref(), rev_hidden)?);
    }
    let merged = g.concat(&head_outs, 1)?;

    let mut w = g.param(store, p.out_proj.weight);
    if let Some(m) = masks {
        let cols: Vec<F> = m
            .iter()
            .flat_map(|pair| pair.iter())
            .flat_map(|pm| pm.keep.iter().map(|&k| if k { F::one() } else { F::zero() }))
            .collect();
        let total = g.shape(w)[1];
        if cols.len() != total {
            return Err(Error::invalid(
                "far_block_forward",
                format!("masks cover {} units, out_proj consumes {total}", cols.len()),
            ));
        }
        let wm = Tensor::from_fn(&[d, total], |i| cols[i % total]);
        let wm = g.constant(wm);
        w = g.mul(w, wm)?;
    }
    let b = p.out_proj.bias.map(|b| g.param(store, b));
    let mixer = g.linear(merged, w, b)?;
    let y = g.add(x, mixer)?;
    Ok(FarBlockOutput {
        y,
        mixer,
        heads: head_outs,
    })
}

#[cfg(test)]
mod tests;
