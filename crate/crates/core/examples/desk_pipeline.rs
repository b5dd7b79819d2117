//! Runs the full desk-scale pipeline on synthetic data and prints a summary:
//! teacher training, distillation, finetuning and three-stage pruning.

use std::time::Instant;

use far_core::data::{synth_dataset, SynthOptions};
use far_core::distill::{accuracy, evaluate, run_phase, Phase, TrainConfig};
use far_core::par::Executor;
use far_core::prune::{three_stage_pipeline, PruneConfig, Threshold};
use far_core::{replace_attention, Init, Model, ModelConfig, Variant};

fn main() -> far_core::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (n, teacher_epochs, distill_epochs, fin_epochs) = (arg(1, 500), arg(2, 30), arg(3, 20), arg(4, 10));
    let argf = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (reg_lr, reg_coeff, rel) = (argf(5, 2e-3), argf(6, 1e-2), argf(7, 0.3));
    let (d_lr, d_warm) = (argf(8, 5e-4), arg(9, 5));
    let exec = Executor::from_env(0)?;
    let t0 = Instant::now();
    let data = synth_dataset(7, n, 10, 32, SynthOptions::default())?;
    let cfg = ModelConfig::desk();
    let mut teacher = Model::<f32>::new(cfg, Variant::Attention, Init::Seed(1))?;
    let tcfg = TrainConfig {
        epochs: teacher_epochs,
        lr: 1e-3,
        batch_size: 32,
        warmup_epochs: 2,
        ..TrainConfig::new(Phase::Teacher)
    };
    run_phase(&mut teacher, None, &data, &tcfg, &exec)?;
    let t_acc = accuracy(&teacher, &data.train, &exec)?;
    println!("teacher train acc {t_acc:.3} val {:.3} [{:.0?}]", accuracy(&teacher, &data.val, &exec)?, t0.elapsed());

    let mut far = replace_attention(&teacher, 2)?;
    let dcfg = TrainConfig {
        epochs: distill_epochs,
        lr: d_lr,
        batch_size: 32,
        warmup_epochs: d_warm,
        ..TrainConfig::new(Phase::Distill)
    };
    let before = evaluate(&far, Some(&teacher), &data.train, &dcfg, &exec)?;
    let rep = run_phase(&mut far, Some(&teacher), &data, &dcfg, &exec)?;
    let after = evaluate(&far, Some(&teacher), &data.train, &dcfg, &exec)?;
    for r in &rep.rows {
        println!("  distill {} loss {:.4} cos {:.4} acc {:.3}", r.epoch, r.loss, r.cosine_mean().unwrap(), r.acc);
    }
    println!(
        "distill: loss {:.4} -> {:.4}, cos {:.4} -> {:.4} [{:.0?}]",
        before.loss,
        after.loss,
        before.cosine_mean().unwrap(),
        after.cosine_mean().unwrap(),
        t0.elapsed()
    );

    let fcfg = TrainConfig {
        epochs: fin_epochs,
        lr: 2e-4,
        batch_size: 32,
        warmup_epochs: 0,
        ..TrainConfig::new(Phase::Finetune)
    };
    run_phase(&mut far, None, &data, &fcfg, &exec)?;
    let f_acc = accuracy(&far, &data.train, &exec)?;
    println!("finetune train acc {f_acc:.3} (teacher {t_acc:.3}) [{:.0?}]", t0.elapsed());

    let pcfg = PruneConfig {
        regularize: TrainConfig {
            epochs: fin_epochs,
            lr: reg_lr,
            batch_size: 32,
            warmup_epochs: 0,
            reg_coeff,
            ..TrainConfig::new(Phase::PruneRegularize)
        },
        threshold: Threshold::Relative(rel),
        finetune: fcfg.clone(),
    };
    let prep = three_stage_pipeline(&mut far, &data, &pcfg, &exec)?;
    let p_acc = accuracy(&far, &data.train, &exec)?;
    println!(
        "pruned acc {p_acc:.3} (unpruned {f_acc:.3}) retention {:.3} [{:.0?}]",
        prep.masks.mean_retention(),
        t0.elapsed()
    );
    for r in &prep.retention {
        print!("{}:{}:{}={:.2} ", r.layer, r.head, r.direction, r.ratio);
    }
    println!();
    Ok(())
}
