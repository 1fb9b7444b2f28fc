use std::path::{Path, PathBuf};

use gqa_core::grouping::{build_plan, GroupingMode, GroupingPlan};
use gqa_core::linalg::GpaOptions;
use gqa_core::model::{
    collect_kv, load_checkpoint, load_kv_cache, read_token_file, save_checkpoint, save_kv_cache,
    write_token_file, ModelConfig, ModelWeights,
};
use gqa_core::pruning::{
    finalize_gqa, mean_pool_init, prune_train, train_teacher, write_trajectory_csv, MaskState,
    PatternTask, TeacherTraining,
};
use gqa_core::similarity::{analyze_cache, export_similarity_report, read_similarity_report};
use gqa_core::transform::{
    regroup_heads, transform_model, verify_invariance, InvarianceReport, VerifyOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::CliError;

pub const CACHE: &str = "kv_cache.gqat";
pub const SIMILARITY: &str = "similarity.csv";
pub const PLAN: &str = "grouping.json";
pub const TRANSFORMED: &str = "transformed.gqat";
pub const TRANSFORMS: &str = "transforms.json";
pub const TRANSFORM_REPORT: &str = "transform_invariance.json";
pub const GQA: &str = "gqa.gqat";
pub const TRAJECTORY: &str = "mask_trajectory.csv";
pub const PRUNE_REPORT: &str = "prune_report.json";

/// Tolerances for the post-transform invariance check.
const ALIGN_TOL: f64 = 1e-8;
const PERMUTE_TOL: f64 = 1e-12;

fn require(path: &Path, stage: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!(
            "missing upstream artifact {}: run `gqa {stage}` first",
            path.display()
        )))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_model(cfg: &PipelineConfig) -> Result<(ModelWeights, ModelConfig), CliError> {
    let path = cfg.model_path()?;
    require(path, "toy` or supply `--model")?;
    Ok(load_checkpoint(path)?)
}

fn load_plan(cfg: &PipelineConfig, model: &ModelConfig) -> Result<GroupingPlan, CliError> {
    let path = cfg.artifact(PLAN);
    require(&path, "group")?;
    let plan = GroupingPlan::load(&path)?;
    if plan.n_groups != cfg.groups {
        return Err(CliError::Usage(format!(
            "{} has {} groups but {} were requested; rerun `gqa group`",
            path.display(),
            plan.n_groups,
            cfg.groups
        )));
    }
    if plan.n_heads != model.n_heads || plan.layers.len() != model.n_layers {
        return Err(CliError::Io(format!(
            "{} does not match the model's {} layers × {} heads",
            path.display(),
            model.n_layers,
            model.n_heads
        )));
    }
    Ok(plan)
}

pub fn calibrate(cfg: &PipelineConfig) -> Result<(), CliError> {
    let (w, mc) = load_model(cfg)?;
    let calib_path = cfg.calibration_path()?;
    require(calib_path, "toy` or supply `--calibration")?;
    let seqs = read_token_file(calib_path)?;
    let cache = collect_kv(&w, &mc, &seqs)?;
    let out = cfg.artifact(CACHE);
    save_kv_cache(&cache, &out)?;
    println!(
        "calibrate: {} layers × {} heads, {} tokens -> {}",
        cache.n_layers(),
        cache.n_heads(),
        cache.n_tokens,
        out.display()
    );
    Ok(())
}

pub fn analyze(cfg: &PipelineConfig) -> Result<(), CliError> {
    let (_, mc) = load_model(cfg)?;
    let cache_path = cfg.artifact(CACHE);
    require(&cache_path, "calibrate")?;
    let cache = load_kv_cache(&cache_path)?;
    let mats = analyze_cache(&cache, cfg.criterion, mc.rope_pairing)?;
    let out = cfg.artifact(SIMILARITY);
    export_similarity_report(&mats, &out)?;
    println!("analyze: {} similarity tables ({}) -> {}", mats.len(), cfg.criterion, out.display());
    Ok(())
}

pub fn group(cfg: &PipelineConfig) -> Result<(), CliError> {
    let (_, mc) = load_model(cfg)?;
    if mc.n_heads % cfg.groups != 0 {
        return Err(CliError::Usage(format!(
            "{} heads cannot be split into {} equal groups",
            mc.n_heads, cfg.groups
        )));
    }
    let sims = if cfg.grouping == GroupingMode::Default {
        Vec::new()
    } else {
        let path = cfg.artifact(SIMILARITY);
        require(&path, "analyze")?;
        read_similarity_report(&path)?
    };
    let plan = build_plan(
        cfg.grouping,
        cfg.criterion,
        mc.n_layers,
        mc.n_heads,
        cfg.groups,
        &sims,
        &cfg.search,
    )
    .map_err(|e| match e {
        gqa_core::Error::InvalidArgument(m) if m.starts_with("no aligned") => CliError::Io(format!(
            "{m} in {}; rerun `gqa analyze` with criterion {}",
            cfg.artifact(SIMILARITY).display(),
            cfg.criterion
        )),
        e => e.into(),
    })?;
    let out = cfg.artifact(PLAN);
    plan.save(&out)?;
    let scores: Vec<String> = plan.layers.iter().map(|l| format!("{:.4}", l.score)).collect();
    println!(
        "group: {} grouping, G = {}, layer scores [{}] -> {}",
        serde_json::to_string(&cfg.grouping).unwrap_or_default().trim_matches('"'),
        cfg.groups,
        scores.join(", "),
        out.display()
    );
    Ok(())
}

pub fn transform(cfg: &PipelineConfig) -> Result<(), CliError> {
    let (w, mc) = load_model(cfg)?;
    let plan = load_plan(cfg, &mc)?;
    let (out_w, tol) = if cfg.align {
        let cache_path = cfg.artifact(CACHE);
        require(&cache_path, "calibrate")?;
        let cache = load_kv_cache(&cache_path)?;
        let (t, set) = transform_model(&w, &mc, &cache, &plan, cfg.criterion, GpaOptions::default())?;
        set.save(&cfg.artifact(TRANSFORMS))?;
        (t, ALIGN_TOL)
    } else {
        (regroup_heads(&w, &mc, &plan)?, PERMUTE_TOL)
    };
    let out = cfg.artifact(TRANSFORMED);
    save_checkpoint(&out_w, &mc, &out)?;
    let report = verify_invariance(
        (&w, &mc),
        (&out_w, &mc),
        VerifyOptions {
            n_seq: cfg.verify_sequences,
            seq_len: cfg.verify_seq_len,
            tol,
            seed: cfg.seed,
        },
    )?;
    write_json(&cfg.artifact(TRANSFORM_REPORT), &report)?;
    println!(
        "transform: {} -> {} (max |Δlogit| {:.3e}, tol {:.0e})",
        if cfg.align { "regrouped + aligned" } else { "regrouped" },
        out.display(),
        report.max_abs,
        tol
    );
    check(&report)
}

fn check(report: &InvarianceReport) -> Result<(), CliError> {
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "max |Δlogit| {:.3e} exceeds {:.0e}",
            report.max_abs, report.tol
        )))
    }
}

#[derive(Serialize)]
struct PruneReport {
    steps: usize,
    n_kv_heads: usize,
    mean_gate: f64,
    max_gate: f64,
    final_distill: Option<f64>,
    warnings: Vec<String>,
}

pub fn prune(cfg: &PipelineConfig) -> Result<(), CliError> {
    let (teacher, mc) = load_model(cfg)?;
    let plan = load_plan(cfg, &mc)?;
    let student_path = cfg.artifact(TRANSFORMED);
    require(&student_path, "transform")?;
    let (student, sc) = load_checkpoint(&student_path)?;
    if sc != mc {
        return Err(CliError::Io(format!(
            "{} was not produced from {}",
            student_path.display(),
            cfg.model_path()?.display()
        )));
    }
    let data_path = cfg.train_path()?;
    require(data_path, "toy` or supply `--train-data")?;
    let data = read_token_file(data_path)?;

    let heads = mean_pool_init(&student, &mc, &plan)?;
    let masks = MaskState::new(mc.n_layers, mc.n_heads);
    let outcome = prune_train(&student, &mc, &heads, &masks, &cfg.schedule, &teacher, &data)?;
    let (gqa, gcfg, fin) = finalize_gqa(&outcome.weights, &mc, &outcome.heads, &outcome.masks)?;
    for w in &fin.warnings {
        eprintln!("warning: {w}");
    }
    let out = cfg.artifact(GQA);
    save_checkpoint(&gqa, &gcfg, &out)?;
    write_trajectory_csv(&outcome.trajectory, &cfg.artifact(TRAJECTORY))?;
    write_json(
        &cfg.artifact(PRUNE_REPORT),
        &PruneReport {
            steps: cfg.schedule.total_steps,
            n_kv_heads: gcfg.n_kv_heads,
            mean_gate: fin.mean_gate,
            max_gate: fin.max_gate,
            final_distill: outcome.log.last().map(|l| l.distill),
            warnings: fin.warnings.clone(),
        },
    )?;
    println!(
        "prune: {} steps, mean gate {:.4}, {} KV heads -> {}",
        cfg.schedule.total_steps,
        fin.mean_gate,
        gcfg.n_kv_heads,
        out.display()
    );
    Ok(())
}

pub fn verify(
    reference: &Path,
    candidate: &Path,
    tol: f64,
    sequences: usize,
    seq_len: usize,
    seed: u64,
) -> Result<(), CliError> {
    let (a, ac) = load_checkpoint(reference)?;
    let (b, bc) = load_checkpoint(candidate)?;
    let report = verify_invariance(
        (&a, &ac),
        (&b, &bc),
        VerifyOptions {
            n_seq: sequences,
            seq_len,
            tol,
            seed,
        },
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?
    );
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    check(&report)
}

pub fn run_all(cfg: &PipelineConfig) -> Result<(), CliError> {
    calibrate(cfg)?;
    analyze(cfg)?;
    group(cfg)?;
    transform(cfg)?;
    prune(cfg)?;
    verify(
        cfg.model_path()?,
        &cfg.artifact(TRANSFORMED),
        if cfg.align { ALIGN_TOL } else { PERMUTE_TOL },
        cfg.verify_sequences,
        cfg.verify_seq_len,
        cfg.seed,
    )
}

pub struct ToyOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub sequences: usize,
    pub seq_len: usize,
    pub train_steps: usize,
    pub layers: usize,
}

pub fn toy(opts: &ToyOptions) -> Result<(), CliError> {
    std::fs::create_dir_all(&opts.out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", opts.out_dir.display())))?;
    let mc = ModelConfig {
        n_layers: opts.layers,
        ..ModelConfig::toy()
    };
    let task = PatternTask {
        seq_len: opts.seq_len,
        ..PatternTask::for_vocab(mc.vocab_size)
    };
    let w = if opts.train_steps > 0 {
        let train_task = PatternTask::for_vocab(mc.vocab_size);
        let teacher = TeacherTraining {
            steps: opts.train_steps,
            seed: opts.seed,
            ..Default::default()
        };
        train_teacher(&mc, &train_task, &teacher)?.0
    } else {
        ModelWeights::random(&mc, &mut ChaCha8Rng::seed_from_u64(opts.seed))?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let seqs = task.sample(opts.sequences, &mut rng);
    let model = opts.out_dir.join("model.gqat");
    let tokens = opts.out_dir.join("tokens.txt");
    save_checkpoint(&w, &mc, &model)?;
    write_token_file(&tokens, &seqs)?;
    println!(
        "toy: {} -> {}, {} × {} tokens -> {}",
        if opts.train_steps > 0 { "trained model" } else { "random model" },
        model.display(),
        opts.sequences,
        opts.seq_len,
        tokens.display()
    );
    Ok(())
}
