//! Central finite-difference gradient checks.
//!
//! The estimate only ever calls the forward computation, so it stays
//! independent of the backward rules it validates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub coords: usize,
    /// max over coords of |analytic − fd| / max(1, |analytic|)
    pub max_rel_err: f64,
}

/// Relative error with the `max(1, |analytic|)` floor.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(1.0)
}

fn pick(n: usize, max_coords: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max_coords {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, max_coords).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Checks `d f / d inputs` for a scalar function built from input leaves.
pub fn check_inputs<B>(
    inputs: &[Tensor<f64>],
    build: B,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    B: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let flat = pick(total, max_coords, &mut rng);
    let mut work = inputs.to_vec();
    let mut worst = 0.0_f64;
    for &f in &flat {
        let (mut which, mut pos) = (0, f);
        while pos >= work[which].numel() {
            pos -= work[which].numel();
            which += 1;
        }
        let orig = work[which].data()[pos];
        work[which].data_mut()[pos] = orig + h;
        let up = eval(&work)?;
        work[which].data_mut()[pos] = orig - h;
        let down = eval(&work)?;
        work[which].data_mut()[pos] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[which].data()[pos], fd));
    }
    Ok(GradCheckReport {
        coords: flat.len(),
        max_rel_err: worst,
    })
}

/// Checks `d loss / d params` for a loss computed from a parameter store.
/// `loss` must build a fresh graph over `store` and return the scalar node;
/// `coords` coordinates are drawn uniformly over all listed parameters.
pub fn check_params<L>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    loss: L,
    h: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    L: for<'g> Fn(&mut Graph<'g, f64>, &'g ParamStore<f64>) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        g.backward(out)?;
        let grads = g.param_grads();
        ids.iter()
            .map(|id| {
                grads
                    .iter()
                    .find(|(gid, _)| gid == id)
                    .map(|(_, t)| (*t).clone())
                    .unwrap_or_else(|| Tensor::zeros(store.get(*id).shape()))
            })
            .collect()
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.value(out).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = ids.iter().map(|&id| store.get(id).numel()).sum();
    let flat = pick(total, coords, &mut rng);
    let mut worst = 0.0_f64;
    for &f in &flat {
        let (mut which, mut pos) = (0, f);
        while pos >= store.get(ids[which]).numel() {
            pos -= store.get(ids[which]).numel();
            which += 1;
        }
        let id = ids[which];
        let orig = store.get(id).data()[pos];
        store.get_mut(id).data_mut()[pos] = orig + h;
        let up = eval(store)?;
        store.get_mut(id).data_mut()[pos] = orig - h;
        let down = eval(store)?;
        store.get_mut(id).data_mut()[pos] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[which].data()[pos], fd));
    }
    Ok(GradCheckReport {
        coords: flat.len(),
        max_rel_err: worst,
    })
}
