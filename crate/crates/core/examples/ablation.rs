//! Toy ablation: aligned vs unaligned conversion of a small trained teacher.
//!
//! cargo run --release -p gqa-core --example ablation -- [seeds] [steps] [teacher_steps] [lr_model] [lr_mask]
//!
//! Env: FIRST_SEED, KV_GROUPS (comma list), TEACHER_LR, TEACHER_ONLY, DUMP.

use std::time::Instant;

use gqa_core::grouping::GroupingPlan;
use gqa_core::linalg::GpaOptions;
use gqa_core::model::{collect_kv, ModelConfig, ModelWeights};
use gqa_core::pruning::{
    distill_eval, finalize_gqa, max_layer_spread, mean_pool_init, prune_train, MaskState,
    PatternTask, TeacherTraining, TrainSchedule,
};
use gqa_core::similarity::Criterion;
use gqa_core::transform::transform_model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn convert(
    teacher: &ModelWeights,
    cfg: &ModelConfig,
    student: &ModelWeights,
    plan: &GroupingPlan,
    schedule: &TrainSchedule,
    train: &[Vec<u32>],
    held_out: &[Vec<u32>],
) -> (f64, f64, f64, f64) {
    let heads = mean_pool_init(student, cfg, plan).unwrap();
    let masks = MaskState::new(cfg.n_layers, cfg.n_heads);
    let (g0, c0, _) = finalize_gqa(student, cfg, &heads, &masks).unwrap();
    let init = distill_eval((&g0, &c0), (teacher, cfg), held_out, 16).unwrap();
    let out = prune_train(student, cfg, &heads, &masks, schedule, teacher, train).unwrap();
    if std::env::var("DUMP").is_ok() {
        for (l, row) in out.masks.log_alpha.iter().enumerate() {
            println!("    la[{l}] {:?}", row.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>());
        }
        for s in out.log.iter().step_by(schedule.total_steps / 10) {
            println!("    step {} T {:.2} distill {:.4} l0 {:.4} E[z] {:.3}", s.step, s.target, s.distill, s.l0, s.expected_gate);
        }
    }
    let (gqa, gcfg, report) = finalize_gqa(&out.weights, cfg, &out.heads, &out.masks).unwrap();
    let loss = distill_eval((&gqa, &gcfg), (teacher, cfg), held_out, 16).unwrap();
    (init, loss, report.mean_gate, max_layer_spread(&out.trajectory))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let defaults = TrainSchedule::default();
    let arg = |i: usize| args.get(i).and_then(|s| s.parse::<f64>().ok());
    let steps = arg(2).map_or(defaults.total_steps, |v| v as usize);
    let teacher_steps = arg(3).map_or(TeacherTraining::default().steps, |v| v as usize);
    let lr_model = arg(4).unwrap_or(defaults.lr_model);
    let lr_mask = arg(5).unwrap_or(defaults.lr_mask);

    let cfg = ModelConfig::toy();
    let task = PatternTask::for_vocab(cfg.vocab_size);
    let first: u64 = std::env::var("FIRST_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    for seed in first..first + seeds {
        let t0 = Instant::now();
        let (teacher, losses) = train_teacher_logged(&cfg, &task, teacher_steps, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let calib = task.sample(16, &mut rng);
        let train = task.sample(512, &mut rng);
        let held_out = task.sample(64, &mut rng);
        let cache = collect_kv(&teacher, &cfg, &calib).unwrap();
        println!(
            "seed {seed}: teacher loss {:.3} -> {:.3} ({:.1}s)",
            losses[0],
            losses.last().unwrap(),
            t0.elapsed().as_secs_f64()
        );
        if std::env::var("TEACHER_ONLY").is_ok() {
            continue;
        }
        let gs: Vec<usize> = match std::env::var("KV_GROUPS") {
            Ok(v) => v.split(',').map(|x| x.parse().unwrap()).collect(),
            Err(_) => vec![cfg.n_heads / 2, cfg.n_heads / 4],
        };
        for g in gs {
            let plan = GroupingPlan::adjacent(cfg.n_layers, cfg.n_heads, g, Criterion::Cos).unwrap();
            let (aligned, _) =
                transform_model(&teacher, &cfg, &cache, &plan, Criterion::Cos, GpaOptions::default()).unwrap();
            let schedule = TrainSchedule {
                total_steps: steps,
                lr_model,
                lr_mask,
                seed,
                ..Default::default()
            };
            let t1 = Instant::now();
            let a = convert(&teacher, &cfg, &aligned, &plan, &schedule, &train, &held_out);
            let b = convert(&teacher, &cfg, &teacher, &plan, &schedule, &train, &held_out);
            println!(
                "  G={g}: aligned init {:.4} final {:.4} gate {:.4} spread {:.3} | baseline init {:.4} final {:.4} gate {:.4} spread {:.3} | {} ({:.1}s)",
                a.0, a.1, a.2, a.3, b.0, b.1, b.2, b.3,
                if a.1 <= b.1 { "WIN" } else { "loss" },
                t1.elapsed().as_secs_f64()
            );
        }
    }
}

fn train_teacher_logged(
    cfg: &ModelConfig,
    task: &PatternTask,
    steps: usize,
    seed: u64,
) -> (ModelWeights, Vec<f64>) {
    gqa_core::pruning::train_teacher(
        cfg,
        task,
        &TeacherTraining {
            steps,
            seed,
            lr: std::env::var("TEACHER_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(3e-3),
            ..Default::default()
        },
    )
    .unwrap()
}
