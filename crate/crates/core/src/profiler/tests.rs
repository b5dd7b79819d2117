use std::time::Duration;

use super::*;
use crate::model::Init;
use crate::prune::shrink_model;

fn rel(a: u64, b: f64) -> f64 {
    (a as f64 - b).abs() / b
}

/// Keeps `keep(l, h, dir, j)` units.
fn masks_with(cfg: &ModelConfig, keep: impl Fn(usize, usize, usize, usize) -> bool) -> MaskSet {
    let mut m = MaskSet::full(cfg.layers, cfg.heads, cfg.head_dim);
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            for d in Direction::BOTH {
                let pm = m.get_mut(l, h, d);
                for j in 0..cfg.head_dim {
                    pm.keep[j] = keep(l, h, d.index(), j);
                }
            }
        }
    }
    m
}

#[test]
fn closed_form_matches_store_for_both_variants() {
    for variant in [Variant::Attention, Variant::Far] {
        let cfg = ModelConfig::desk();
        let m = Model::<f32>::new(cfg, variant, Init::Zeros).unwrap();
        assert_eq!(count_params(&cfg, variant, None).unwrap(), m.store.numel() as u64);
    }
}

#[test]
fn reference_geometries_match_published_sizes() {
    let tiny = ModelConfig::deit_tiny();
    assert_eq!(count_params(&tiny, Variant::Attention, None).unwrap(), 5_717_416);
    assert!(rel(count_params(&tiny, Variant::Far, None).unwrap(), 7.7e6) < 0.05);
    let small = ModelConfig::deit_small();
    assert_eq!(count_params(&small, Variant::Attention, None).unwrap(), 22_050_664);
    assert!(rel(count_params(&small, Variant::Far, None).unwrap(), 25.1e6) < 0.05);
    let base = ModelConfig::deit_base();
    assert!(rel(count_params(&base, Variant::Attention, None).unwrap(), 86.6e6) < 0.01);
    assert!(rel(count_params(&base, Variant::Far, None).unwrap(), 89.1e6) < 0.05);

    let t = tiny.tokens();
    assert_eq!(t, 197);
    let teacher = count_flops(&tiny, Variant::Attention, t, None, false).unwrap();
    let far = count_flops(&tiny, Variant::Far, t, None, false).unwrap();
    assert!(rel(teacher.macs, 1.3e9) < 0.10, "{}", teacher.macs);
    assert!(rel(far.macs, 1.5e9) < 0.10, "{}", far.macs);
    assert_eq!(far.flops, 2 * far.macs);
}

#[test]
fn full_mask_equals_no_mask() {
    let cfg = ModelConfig::deit_tiny();
    let full = MaskSet::full(cfg.layers, cfg.heads, cfg.head_dim);
    assert_eq!(
        count_params(&cfg, Variant::Far, Some(&full)).unwrap(),
        count_params(&cfg, Variant::Far, None).unwrap()
    );
    let a = count_flops(&cfg, Variant::Far, 197, Some(&full), true).unwrap();
    let b = count_flops(&cfg, Variant::Far, 197, None, true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn masked_counts_equal_shrunk_model_numel() {
    let cfg = ModelConfig::desk();
    let mut m = Model::<f64>::new(cfg, Variant::Far, Init::Seed(3)).unwrap();
    let masks = masks_with(&cfg, |l, h, d, j| (j * 7 + l + h + d) % 5 != 0);
    m.set_masks(Some(masks.clone())).unwrap();
    let small = shrink_model(&m).unwrap();
    assert_eq!(count_params(&cfg, Variant::Far, Some(&masks)).unwrap(), small.store.numel() as u64);
}

#[test]
fn masked_direction_closed_form() {
    let cfg = ModelConfig::desk();
    let base = count_params(&cfg, Variant::Far, None).unwrap();
    let r = 5u64;
    let masks = masks_with(&cfg, |l, h, d, j| !(l == 1 && h == 0 && d == 1) || (j as u64) < r);
    let p = count_params(&cfg, Variant::Far, Some(&masks)).unwrap();
    let (dh, din, d) = (cfg.head_dim as u64, (cfg.dim / cfg.heads) as u64, cfg.dim as u64);
    let full_dir = 4 * dh * din + 4 * dh * dh + 8 * dh + d * dh;
    let kept_dir = 4 * r * din + 4 * r * r + 8 * r + d * r;
    assert_eq!(base - p, full_dir - kept_dir);

    let t = cfg.tokens() as u64;
    let f0 = count_flops(&cfg, Variant::Far, cfg.tokens(), None, false).unwrap().macs;
    let f1 = count_flops(&cfg, Variant::Far, cfg.tokens(), Some(&masks), false).unwrap().macs;
    let full_macs = t * (4 * dh * din + 4 * dh * dh + d * dh);
    let kept_macs = t * (4 * r * din + 4 * r * r + d * r);
    assert_eq!(f0 - f1, full_macs - kept_macs);
}

#[test]
fn pruning_never_increases_cost() {
    let cfg = ModelConfig::desk();
    let t = cfg.tokens();
    let base_p = count_params(&cfg, Variant::Far, None).unwrap();
    let base_f = count_flops(&cfg, Variant::Far, t, None, false).unwrap().macs;
    for seed in 0..20usize {
        let masks = masks_with(&cfg, |l, h, d, j| (j * 13 + l * 7 + h * 3 + d + seed) % (2 + seed % 4) != 0);
        assert!(count_params(&cfg, Variant::Far, Some(&masks)).unwrap() <= base_p);
        assert!(count_flops(&cfg, Variant::Far, t, Some(&masks), false).unwrap().macs <= base_f);
    }
}

#[test]
fn totals_are_the_sum_of_components() {
    for variant in [Variant::Attention, Variant::Far] {
        let cfg = ModelConfig::deit_small();
        let f = count_flops(&cfg, variant, cfg.tokens(), None, true).unwrap();
        assert_eq!(f.macs, f.layers.iter().map(|c| c.macs).sum::<u64>());
        assert_eq!(f.extra_ops, f.layers.iter().map(|c| c.extra_ops).sum::<u64>());
        assert_eq!(f.layers.len(), 2 * cfg.layers + 2);
        assert_eq!(f.layers[0].name, "embed");
        assert_eq!(f.layers.last().unwrap().name, "head");
        let quiet = count_flops(&cfg, variant, cfg.tokens(), None, false).unwrap();
        assert_eq!((quiet.macs, quiet.extra_ops), (f.macs, 0));
    }
}

/// Least-squares quadratic fit through (x, y) with x scaled to [0, 1].
fn quad_fit(xs: &[f64], ys: &[f64]) -> [f64; 3] {
    let mut a = [[0.0; 4]; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let row = [1.0, x, x * x];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += row[i] * row[j];
            }
            a[i][3] += row[i] * y;
        }
    }
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..3 {
            if r != c {
                let k = a[r][c] / a[c][c];
                for j in c..4 {
                    a[r][j] -= k * a[c][j];
                }
            }
        }
    }
    [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]]
}

#[test]
fn attention_is_quadratic_and_substitute_is_linear_in_tokens() {
    let cfg = ModelConfig::deit_tiny();
    let ts = [64usize, 128, 256, 512];
    let xs: Vec<f64> = ts.iter().map(|&t| t as f64 / 512.0).collect();
    let att: Vec<f64> = ts.iter().map(|&t| attention_block_macs(&cfg, t) as f64).collect();
    let far: Vec<f64> = ts.iter().map(|&t| far_block_macs(&cfg, t) as f64).collect();
    let ca = quad_fit(&xs, &att);
    let cf = quad_fit(&xs, &far);
    assert!(ca[2] > 0.0);
    assert!(cf[2].abs() < 1e-6 * cf[1].abs(), "{cf:?}");
    for w in ts.windows(2) {
        assert!(far_block_macs(&cfg, w[1]) > far_block_macs(&cfg, w[0]));
        assert!(attention_block_macs(&cfg, w[1]) > attention_block_macs(&cfg, w[0]));
    }
}

#[test]
fn doubling_tokens_costs_attention_more() {
    let cfg = ModelConfig::deit_tiny();
    for t in [197usize, 300, 577, 1024] {
        let ra = attention_block_macs(&cfg, 2 * t) as f64 / attention_block_macs(&cfg, t) as f64;
        let rf = far_block_macs(&cfg, 2 * t) as f64 / far_block_macs(&cfg, t) as f64;
        assert!(ra > rf, "T={t}: {ra} vs {rf}");
        assert!((rf - 2.0).abs() < 1e-12);
    }
}

#[test]
fn higher_resolution_favours_the_substitute() {
    let cfg = ModelConfig::deit_tiny().with_image_size(384);
    assert_eq!(cfg.tokens(), 577);
    let teacher = count_flops(&cfg, Variant::Attention, 577, None, false).unwrap().macs;
    let far = count_flops(&cfg, Variant::Far, 577, None, false).unwrap().macs;
    assert!(far < teacher);
}

#[test]
fn mismatched_masks_are_rejected() {
    let cfg = ModelConfig::desk();
    let wrong = MaskSet::full(cfg.layers + 1, cfg.heads, cfg.head_dim);
    assert!(count_params(&cfg, Variant::Far, Some(&wrong)).is_err());
    let ok = MaskSet::full(cfg.layers, cfg.heads, cfg.head_dim);
    assert!(count_params(&cfg, Variant::Attention, Some(&ok)).is_err());
}

#[test]
fn summary_statistics_of_known_samples() {
    let samples: Vec<Duration> = (1..=10).map(Duration::from_millis).collect();
    let s = summarize(&samples, 3, 1, "f32").unwrap();
    assert!((s.median_ms - 5.5).abs() < 1e-9);
    assert!((s.mean_ms - 5.5).abs() < 1e-9);
    assert!((s.p10_ms - 1.0).abs() < 1e-9);
    assert!((s.p90_ms - 9.0).abs() < 1e-9);
    assert_eq!((s.runs, s.warmups, s.threads), (10, 3, 1));
    assert!(summarize(&[], 0, 1, "f32").is_err());
}

#[test]
fn constant_time_stub_has_tight_spread() {
    let s = bench_fn(2, 15, 1, "f32", || std::thread::sleep(Duration::from_millis(2))).unwrap();
    assert_eq!(s.runs, 15);
    assert!(s.median_ms >= 2.0);
    assert!(s.p10_ms <= s.median_ms && s.median_ms <= s.p90_ms);
    assert!(s.min_ms <= s.p10_ms && s.p90_ms <= s.max_ms);
}

#[test]
fn zero_runs_is_an_error() {
    let mut calls = 0;
    assert!(bench_fn(1, 0, 1, "f32", || calls += 1).is_err());
    assert_eq!(calls, 0);
    let m = Model::<f32>::new(ModelConfig::desk(), Variant::Far, Init::Seed(0)).unwrap();
    assert!(bench_latency(&m, 0, 0, 0).is_err());
    let s = bench_latency(&m, 1, 3, 0).unwrap();
    assert_eq!((s.runs, s.precision.as_str()), (3, "f32"));
}

#[test]
fn report_csv_has_a_total_row() {
    let cfg = ModelConfig::desk();
    let r = CostReport::new(&cfg, Variant::Far, None, false).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "component,params,macs,flops,extra_ops");
    assert_eq!(lines.len(), 1 + 2 * cfg.layers + 2 + 1);
    let total: Vec<&str> = lines.last().unwrap().split(',').collect();
    assert_eq!(total[0], "total");
    assert_eq!(total[1].parse::<u64>().unwrap(), r.params);
    assert!(r.summary().contains("MACs"));
}
