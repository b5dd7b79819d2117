use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::{ModelConfig, Variant};
use crate::gradcheck::check_params;
use crate::model::{Init, Model};
use crate::params::ParamGroup;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn dir_store(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> (ParamStore<f64>, LstmDirParams) {
    let mut s = ParamStore::new();
    let g = ParamGroup::Substitute;
    let p = LstmDirParams {
        w_ih: s.add("w_ih", g, rand_t(rng, &[4 * hidden, input], 0.5)),
        w_hh: s.add("w_hh", g, rand_t(rng, &[4 * hidden, hidden], 0.5)),
        b_ih: s.add("b_ih", g, rand_t(rng, &[4 * hidden], 0.5)),
        b_hh: s.add("b_hh", g, rand_t(rng, &[4 * hidden], 0.5)),
    };
    (s, p)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-element reference LSTM cell.
fn scalar_step(
    s: &ParamStore<f64>,
    p: &LstmDirParams,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hd = h.len();
    let (wi, wh) = (s.get(p.w_ih), s.get(p.w_hh));
    let (bi, bh) = (s.get(p.b_ih).data(), s.get(p.b_hh).data());
    let pre = |row: usize| {
        let mut acc = bi[row] + bh[row];
        for (k, xv) in x.iter().enumerate() {
            acc += wi.at2(row, k) * xv;
        }
        for (k, hv) in h.iter().enumerate() {
            acc += wh.at2(row, k) * hv;
        }
        acc
    };
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for j in 0..hd {
        let i = sig(pre(j));
        let f = sig(pre(hd + j));
        let gg = pre(2 * hd + j).tanh();
        let o = sig(pre(3 * hd + j));
        c2[j] = f * c[j] + i * gg;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

#[test]
fn lstm_step_all_zero() {
    let mut s = ParamStore::<f64>::new();
    let g0 = ParamGroup::Substitute;
    let p = LstmDirParams {
        w_ih: s.add("a", g0, Tensor::zeros(&[8, 2])),
        w_hh: s.add("b", g0, Tensor::zeros(&[8, 2])),
        b_ih: s.add("c", g0, Tensor::zeros(&[8])),
        b_hh: s.add("d", g0, Tensor::zeros(&[8])),
    };
    let mut g = Graph::new();
    let dv = p.vars(&mut g, &s, None).unwrap();
    let x = g.constant(Tensor::zeros(&[1, 2]));
    let h = g.constant(Tensor::zeros(&[1, 2]));
    let c = g.constant(Tensor::zeros(&[1, 2]));
    let (h2, c2) = lstm_step(&mut g, x, h, c, &dv).unwrap();
    assert_eq!(g.value(h2).data(), &[0.0, 0.0]);
    assert_eq!(g.value(c2).data(), &[0.0, 0.0]);
}

#[test]
fn lstm_step_saturated_forget_gate_keeps_memory() {
    let hd = 3;
    let mut s = ParamStore::<f64>::new();
    let g0 = ParamGroup::Substitute;
    let mut b = Tensor::zeros(&[4 * hd]);
    for v in &mut b.data_mut()[hd..2 * hd] {
        *v = 60.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = LstmDirParams {
        w_ih: s.add("a", g0, Tensor::zeros(&[4 * hd, 2])),
        w_hh: s.add("b", g0, Tensor::zeros(&[4 * hd, hd])),
        b_ih: s.add("c", g0, b),
        b_hh: s.add("d", g0, Tensor::zeros(&[4 * hd])),
    };
    let c0 = rand_t(&mut rng, &[1, hd], 2.0);
    let mut g = Graph::new();
    let dv = p.vars(&mut g, &s, None).unwrap();
    let x = g.constant(rand_t(&mut rng, &[1, 2], 1.0));
    let h = g.constant(rand_t(&mut rng, &[1, hd], 1.0));
    let c = g.constant(c0.clone());
    let (_, c2) = lstm_step(&mut g, x, h, c, &dv).unwrap();
    assert!(g.value(c2).max_abs_diff(&c0) < 1e-12);
}

#[test]
fn lstm_step_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (s, p) = dir_store(&mut rng, 5, 4);
    let x = rand_t(&mut rng, &[1, 5], 1.0);
    let h = rand_t(&mut rng, &[1, 4], 1.0);
    let c = rand_t(&mut rng, &[1, 4], 1.0);
    let (want_h, want_c) = scalar_step(&s, &p, x.data(), h.data(), c.data());
    let mut g = Graph::new();
    let dv = p.vars(&mut g, &s, None).unwrap();
    let (vx, vh, vc) = (g.constant(x), g.constant(h), g.constant(c));
    let (h2, c2) = lstm_step(&mut g, vx, vh, vc, &dv).unwrap();
    for j in 0..4 {
        assert!((g.value(h2).data()[j] - want_h[j]).abs() <= 1e-12);
        assert!((g.value(c2).data()[j] - want_c[j]).abs() <= 1e-12);
    }
}

#[test]
fn lstm_step_rejects_bad_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (s, p) = dir_store(&mut rng, 5, 4);
    let mut g = Graph::new();
    let dv = p.vars(&mut g, &s, None).unwrap();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let h = g.constant(Tensor::zeros(&[1, 4]));
    let c = g.constant(Tensor::zeros(&[1, 4]));
    assert!(lstm_step(&mut g, x, h, c, &dv).is_err());
}

fn head_run(s: &ParamStore<f64>, p: &LstmDirParams, input: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let dv = p.vars(&mut g, s, None).unwrap();
    let x = g.constant(input.clone());
    let hd = dv.hidden;
    let out = bilstm_head(&mut g, x, &dv, Some(&dv), hd).unwrap();
    g.value(out).clone()
}

#[test]
fn bilstm_single_step_halves_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (s, p) = dir_store(&mut rng, 4, 4);
    let out = head_run(&s, &p, &rand_t(&mut rng, &[1, 4], 1.0));
    assert_eq!(&out.data()[..4], &out.data()[4..]);
}

#[test]
fn bilstm_reversal_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s, p) = dir_store(&mut rng, 4, 3);
    let steps = 6;
    let x = rand_t(&mut rng, &[steps, 4], 1.0);
    let flipped = Tensor::from_fn(&[steps, 4], |i| x.at2(steps - 1 - i / 4, i % 4));
    let a = head_run(&s, &p, &x);
    let b = head_run(&s, &p, &flipped);
    for t in 0..steps {
        for j in 0..3 {
            let tf = steps - 1 - t;
            assert!((b.at2(t, j) - a.at2(tf, 3 + j)).abs() <= 1e-12);
            assert!((b.at2(t, 3 + j) - a.at2(tf, j)).abs() <= 1e-12);
        }
    }
}

#[test]
fn bilstm_directional_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (s, p) = dir_store(&mut rng, 4, 3);
    let steps = 7;
    let x = rand_t(&mut rng, &[steps, 4], 1.0);
    let base = head_run(&s, &p, &x);
    for cut in 0..steps {
        let mut y = x.clone();
        for v in &mut y.data_mut()[cut * 4..(cut + 1) * 4] {
            *v += 0.75;
        }
        let out = head_run(&s, &p, &y);
        for t in 0..steps {
            for j in 0..3 {
                if t < cut {
                    assert_eq!(out.at2(t, j), base.at2(t, j), "fwd t={t} cut={cut}");
                }
                if t > cut {
                    assert_eq!(out.at2(t, 3 + j), base.at2(t, 3 + j), "rev t={t} cut={cut}");
                }
            }
        }
    }
}

fn desk64() -> ModelConfig {
    ModelConfig {
        precision: crate::config::Precision::F64,
        ..ModelConfig::desk()
    }
}

fn block_out(
    m: &Model<f64>,
    x: &Tensor<f64>,
    masks: Option<&[[PruneMask; 2]]>,
) -> BlockSnapshot {
    let mut g = Graph::new();
    let p = m.far_block(0).unwrap();
    let vx = g.constant(x.clone());
    let out = far_block_forward(&mut g, &m.store, p, vx, masks, FarForwardOptions::default()).unwrap();
    BlockSnapshot {
        y: g.value(out.y).clone(),
        heads: out.heads.iter().map(|&h| g.value(h).clone()).collect(),
    }
}

struct BlockSnapshot {
    y: Tensor<f64>,
    heads: Vec<Tensor<f64>>,
}

#[test]
fn zero_out_proj_is_identity_for_any_length() {
    let mut m = Model::<f64>::new(desk64(), Variant::Far, Init::Seed(5)).unwrap();
    let p = m.far_block(0).unwrap().clone();
    *m.store.get_mut(p.out_proj.weight) = Tensor::zeros(&[32, 64]);
    *m.store.get_mut(p.out_proj.bias.unwrap()) = Tensor::zeros(&[32]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for steps in [1, 2, 17] {
        let x = rand_t(&mut rng, &[steps, 32], 1.0);
        let out = block_out(&m, &x, None);
        assert_eq!(out.y.shape(), &[steps, 32]);
        assert_eq!(out.y, x);
    }
}

#[test]
fn full_mask_is_bit_identical_to_no_mask() {
    let m = Model::<f64>::new(desk64(), Variant::Far, Init::Seed(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&mut rng, &[17, 32], 1.0);
    let full = vec![[PruneMask::full(16), PruneMask::full(16)]; 2];
    let a = block_out(&m, &x, None);
    let b = block_out(&m, &x, Some(&full));
    assert_eq!(a.y, b.y);
}

#[test]
fn inconsistent_mask_is_rejected() {
    let m = Model::<f64>::new(desk64(), Variant::Far, Init::Seed(8)).unwrap();
    let p = m.far_block(0).unwrap();
    let bad = vec![[PruneMask::full(15), PruneMask::full(16)]; 2];
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 32]));
    assert!(far_block_forward(&mut g, &m.store, p, x, Some(&bad), FarForwardOptions::default()).is_err());
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 31]));
    assert!(far_block_forward(&mut g, &m.store, p, x, None, FarForwardOptions::default()).is_err());
}

#[test]
fn masked_units_output_exact_zero() {
    let m = Model::<f64>::new(desk64(), Variant::Far, Init::Seed(10)).unwrap();
    let mut masks = vec![[PruneMask::full(16), PruneMask::full(16)]; 2];
    masks[1][1].keep[3] = false;
    masks[0][0].keep[0] = false;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let out = block_out(&m, &rand_t(&mut rng, &[17, 32], 1.0), Some(&masks));
    for t in 0..17 {
        assert_eq!(out.heads[1].at2(t, 16 + 3), 0.0);
        assert_eq!(out.heads[0].at2(t, 0), 0.0);
    }
}

#[test]
fn head_isolation() {
    let m = Model::<f64>::new(desk64(), Variant::Far, Init::Seed(12)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_t(&mut rng, &[9, 32], 1.0);
    let base = block_out(&m, &x, None);
    for n in 0..2 {
        let mut pert = m.clone();
        let id = pert.far_block(0).unwrap().heads[n][1].w_hh;
        for v in pert.store.get_mut(id).data_mut() {
            *v += 0.1;
        }
        let out = block_out(&pert, &x, None);
        for k in 0..2 {
            if k == n {
                assert!(out.heads[k].max_abs_diff(&base.heads[k]) > 0.0);
            } else {
                assert_eq!(out.heads[k], base.heads[k]);
            }
        }
    }
}

#[test]
fn far_block_parameter_gradients_match_finite_differences() {
    let mut m = Model::<f64>::new(desk64(), Variant::Far, Init::Seed(14)).unwrap();
    let p = m.far_block(0).unwrap().clone();
    let ids = p.param_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_t(&mut rng, &[5, 32], 1.0);
    let target = rand_t(&mut rng, &[5, 32], 1.0);
    let rep = check_params(
        &mut m.store,
        &ids,
        |g, store| {
            let vx = g.constant(x.clone());
            let out = far_block_forward(g, store, &p, vx, None, FarForwardOptions::default())?;
            let t = g.constant(target.clone());
            let d = g.sub(out.y, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        },
        1e-6,
        120,
        16,
    )
    .unwrap();
    assert!(rep.coords >= 100);
    assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
}
