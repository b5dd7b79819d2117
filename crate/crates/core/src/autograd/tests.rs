use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check_inputs;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
    }
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let c = g.matmul(i2, b).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[4, 2]);
    let mut want = [0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                want[i * 2 + j] += a.at2(i, k) * b.at2(k, j);
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    assert_close(g.value(c).data(), &want, 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 4], &[5.0; 4]));
    let gamma = g.constant(Tensor::ones(&[4]));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert_close(g.value(y).data(), &[1.0, -1.0], 1e-9);
}

#[test]
fn layer_norm_output_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn(&[4, 8], |_| rng.random_range(-3.0..5.0));
    let mut g = Graph::<f64>::new();
    let vx = g.constant(x);
    let gamma = g.constant(Tensor::ones(&[8]));
    let beta = g.constant(Tensor::zeros(&[8]));
    let y = g.layer_norm(vx, gamma, beta, 1e-5).unwrap();
    for r in 0..4 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-3);
    }
}

#[test]
fn layer_norm_rejects_bad_gamma_and_eps() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 4]));
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    assert!(g.layer_norm(x, gamma, beta, 1e-5).is_err());
    let gamma = g.constant(Tensor::ones(&[4]));
    let beta = g.constant(Tensor::zeros(&[4]));
    assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[1000.0, 1000.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[0.0, 3.0_f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    assert_close(g.value(y).data(), &[0.25, 0.75], 1e-15);

    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn softmax_along_leading_axis_normalizes_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_t(&mut rng, &[3, 4]));
    let y = g.softmax(x, 0).unwrap();
    for c in 0..4 {
        let s: f64 = (0..3).map(|r| g.value(y).at2(r, c)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pointwise_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);

    // matching logits with a huge margin give vanishing NLL
    let logits = g.constant(t(&[1, 3], &[1e3, 0.0, 0.0]));
    let ce = g.cross_entropy(logits, &[0]).unwrap();
    assert_eq!(g.value(ce).data(), &[0.0]);
}

#[test]
fn tanh_backward_matches_central_difference() {
    let x0 = 0.3_f64;
    let h = 1e-6;
    let fd = ((x0 + h).tanh() - (x0 - h).tanh()) / (2.0 * h);
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(x0));
    let y = g.tanh(x);
    g.backward(y).unwrap();
    let an = g.grad(x).unwrap().data()[0];
    assert!((an - fd).abs() / fd.abs() <= 1e-7);
}

#[test]
fn backward_simple_identities() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(2.0));
    let y = g.input(Tensor::scalar(3.0));
    let p = g.mul(x, y).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
    assert_eq!(g.grad(y).unwrap().data(), &[2.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(2.0));
    let y = g.scale(x, 3.0);
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", crate::params::ParamGroup::Backbone, Tensor::ones(&[2]));
    let b = store.add("b", crate::params::ParamGroup::Substitute, Tensor::ones(&[2]));
    store.set_trainable(a, false);
    let mut g = Graph::new();
    let va = g.param(&store, a);
    let vb = g.param(&store, b);
    let p = g.mul(va, vb).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let grads = g.param_grads();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].0, b);
    assert!(g.grad(va).is_none());
}

#[test]
fn concat_split_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&mut rng, &[3, 7]);
    for (axis, sizes) in [(1usize, vec![2, 4, 1]), (0, vec![1, 2])] {
        let mut g = Graph::<f64>::new();
        let v = g.constant(x.clone());
        let parts = g.split(v, axis, &sizes).unwrap();
        let back = g.concat(&parts, axis).unwrap();
        assert_eq!(g.value(back), &x);
    }
}

#[test]
fn row_cosine_zero_norm_convention() {
    let mut g = Graph::<f64>::new();
    let a = g.input(t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]));
    let b = g.input(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
    let c = g.row_cosine(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert_eq!(&g.grad(a).unwrap().data()[..2], &[0.0, 0.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::<f64>::new();
        let x = g.input(rand_t(&mut rng, &[5, 6]));
        let w = g.input(rand_t(&mut rng, &[4, 6]));
        let y = g.linear(x, w, None).unwrap();
        let y = g.tanh(y);
        let y = g.softmax(y, 1).unwrap();
        let s = g.sum(y);
        let s2 = g.mul(s, s).unwrap();
        g.backward(s2).unwrap();
        (g.value(y).clone(), g.grad(w).unwrap().clone())
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert_eq!(y1, y2);
    assert_eq!(g1, g2);
}

// ------------------------------------------------------------------ FD sweeps

const FD_H: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;

/// Runs the FD check at `points` independently drawn input sets.
fn fd_sweep<B>(shapes: &[&[usize]], points: usize, build: B)
where
    B: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var> + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for p in 0..points {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
        let rep = check_inputs(&inputs, build, FD_H, 16, p as u64).unwrap();
        assert!(
            rep.max_rel_err <= FD_TOL,
            "point {p}: rel err {} > {FD_TOL}",
            rep.max_rel_err
        );
    }
}

/// Contracts a tensor-valued output to a scalar with fixed random weights so
/// every output coordinate carries a distinct upstream gradient.
fn contract<'g>(g: &mut Graph<'g, f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64) * 0.618).sin() + 0.1);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn fd_matmul() {
    fd_sweep(&[&[3, 4], &[4, 2]], 50, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        contract(g, y)
    });
}

#[test]
fn fd_linear() {
    fd_sweep(&[&[3, 4], &[5, 4], &[5]], 50, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        contract(g, y)
    });
}

#[test]
fn fd_elementwise_binary() {
    fd_sweep(&[&[2, 3], &[2, 3]], 50, |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(a, v[1])?;
        let m = g.mul(s, v[1])?;
        let shifted = g.add_scalar(v[1], 3.0);
        let d = g.div(m, shifted)?;
        contract(g, d)
    });
}

#[test]
fn fd_add_row_and_scale() {
    fd_sweep(&[&[3, 4], &[4]], 50, |g, v| {
        let y = g.add_row(v[0], v[1])?;
        let y = g.scale(y, -1.7);
        contract(g, y)
    });
}

#[test]
fn fd_activations() {
    fd_sweep(&[&[2, 5]], 50, |g, v| {
        let a = g.sigmoid(v[0]);
        let b = g.tanh(v[0]);
        let c = g.gelu(v[0]);
        let ab = g.add(a, b)?;
        let y = g.add(ab, c)?;
        contract(g, y)
    });
}

#[test]
fn fd_sqrt() {
    fd_sweep(&[&[2, 3]], 50, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let pos = g.add_scalar(sq, 0.5);
        let y = g.sqrt(pos);
        contract(g, y)
    });
}

#[test]
fn fd_softmax_both_axes() {
    fd_sweep(&[&[3, 4]], 50, |g, v| {
        let a = g.softmax(v[0], 1)?;
        let b = g.softmax(v[0], 0)?;
        let y = g.add(a, b)?;
        contract(g, y)
    });
}

#[test]
fn fd_layer_norm() {
    fd_sweep(&[&[3, 6], &[6], &[6]], 50, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        contract(g, y)
    });
}

#[test]
fn fd_shape_ops() {
    fd_sweep(&[&[3, 4], &[3, 2]], 50, |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let parts = g.split(c, 1, &[1, 5])?;
        let tr = g.transpose(parts[1])?;
        let r = g.reshape(tr, &[15])?;
        let s = g.slice(r, 0, 2, 10)?;
        contract(g, s)
    });
}

#[test]
fn fd_reductions() {
    fd_sweep(&[&[3, 4]], 50, |g, v| {
        let a = g.sum_axis(v[0], 0)?;
        let b = g.sum_axis(v[0], 1)?;
        let ca = contract(g, a)?;
        let cb = contract(g, b)?;
        let m = g.mean(v[0]);
        let s = g.add(ca, cb)?;
        g.add(s, m)
    });
}

#[test]
fn fd_cross_entropy() {
    fd_sweep(&[&[3, 5]], 50, |g, v| g.cross_entropy(v[0], &[0, 4, 2]));
}

#[test]
fn fd_row_cosine() {
    fd_sweep(&[&[4, 6], &[4, 6]], 50, |g, v| {
        let c = g.row_cosine(v[0], v[1])?;
        contract(g, c)
    });
}
