//! Command-line surface: bind configs to training runs, schedule/FLOPs
//! tables, per-layer analyses, lesioned evaluation and the
//! finite-difference verification suite.
//!
//! Exit codes are stable: 0 success, 1 numerical divergence (or runtime
//! failure), 2 usage/config errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use layerdrop::error::Error;
use layerdrop::flops;
use layerdrop::gradcheck;
use layerdrop::instrument;
use layerdrop::model::{
    load_checkpoint, load_checkpoint_config, ModelConfig, ModelWeights, Variant,
};
use layerdrop::schedule::DropSchedule;
use layerdrop::train::{self, Corpus, Split, TrainConfig};

const DEFAULT_CORPUS: &str = "crates/layerdrop/data/tiny_corpus.txt";

#[derive(Parser)]
#[command(
    name = "layerdrop",
    version,
    about = "Toy-scale transformer training engine with a progressive layer-drop schedule"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Training config (JSON). Defaults to the built-in desk-scale config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the block variant: postln, preln or st.
    #[arg(long)]
    variant: Option<String>,
    /// Override the schedule's keep-ratio limit.
    #[arg(long = "theta-bar")]
    theta_bar: Option<f64>,
    /// Override the total training steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config; writes metrics.csv, timing.csv and checkpoints.
    Train(CommonArgs),
    /// Emit the keep-ratio schedule table (schedule.csv) plus polynomial
    /// reference curves (reference_curves.csv).
    Schedule(CommonArgs),
    /// Expected-FLOPs accounting per step (flops.csv).
    Flops(CommonArgs),
    /// Per-layer diagnostics as CSVs, from a checkpoint or a fresh init.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint stem (path without .manifest/.bin); fresh init when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Lesioned validation loss of a checkpoint (lesion.csv).
    Lesion {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint stem to lesion.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Uniform keep ratio.
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        /// Number of gate seeds averaged.
        #[arg(long, default_value_t = 5)]
        gate_seeds: usize,
    },
    /// Run the finite-difference verification suite; exit 0 iff all pass.
    GradCheck(CommonArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Schedule(c) => cmd_schedule(c),
        Command::Flops(c) => cmd_flops(c),
        Command::Analyze { common, checkpoint } => cmd_analyze(common, checkpoint.as_deref()),
        Command::Lesion {
            common,
            checkpoint,
            theta,
            gate_seeds,
        } => cmd_lesion(common, checkpoint, *theta, *gate_seeds),
        Command::GradCheck(c) => cmd_grad_check(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence(_)) => 1,
        Some(
            Error::Config(_)
            | Error::Contract(_)
            | Error::Checkpoint(_)
            | Error::ShapeMismatch { .. }
            | Error::OutOfBounds { .. }
            | Error::NoMaskedTokens,
        ) => 2,
        _ => 1,
    }
}

/// Load the config file (or the built-in default) and apply CLI overrides.
fn effective_config(common: &CommonArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {path:?} does not parse: {e}")))?
        }
        None => TrainConfig::desk_default(PathBuf::from(DEFAULT_CORPUS)),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &common.variant {
        cfg.model.variant = Variant::parse(v)?;
    }
    if let Some(theta) = common.theta_bar {
        match &mut cfg.schedule {
            Some(s) => s.theta_limit = theta,
            None => {
                cfg.schedule = Some(train::ScheduleConfig {
                    theta_limit: theta,
                    gamma: None,
                })
            }
        }
    }
    if let Some(steps) = common.steps {
        cfg.total_steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Echo the post-override config so any artifact directory is
/// self-describing.
fn write_effective_config(out: &Path, command: &str, cfg: &TrainConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let blob = json!({ "command": command, "config": cfg });
    fs::write(
        out.join("effective_config.json"),
        serde_json::to_string_pretty(&blob)?,
    )?;
    Ok(())
}

fn schedule_of(cfg: &TrainConfig) -> anyhow::Result<DropSchedule> {
    match cfg.drop_schedule()? {
        Some(s) => Ok(s),
        // No-drop baseline: constant full depth.
        None => Ok(DropSchedule::new(
            1.0,
            100.0 / cfg.total_steps as f64,
            cfg.total_steps,
            cfg.model.layers,
        )?),
    }
}

fn resolved_model(cfg: &TrainConfig, corpus: &Corpus) -> anyhow::Result<ModelConfig> {
    Ok(cfg.resolve(corpus)?.model)
}

fn cmd_train(common: &CommonArgs) -> anyhow::Result<ExitCode> {
    let cfg = effective_config(common)?;
    write_effective_config(&common.out, "train", &cfg)?;
    let out = train::train(&cfg, &common.out)?;
    log::info!(
        "finished {} steps: final val loss {:.4}, cumulative block FLOPs {:.4}, {:.1} ms/step (last tenth)",
        cfg.total_steps,
        out.final_val_loss,
        out.cum_block_flops_fraction,
        out.mean_step_ms_last_tenth
    );
    println!(
        "final_val_loss={} cum_block_flops_fraction={} metrics={}",
        out.final_val_loss,
        out.cum_block_flops_fraction,
        out.metrics_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_schedule(common: &CommonArgs) -> anyhow::Result<ExitCode> {
    let cfg = effective_config(common)?;
    write_effective_config(&common.out, "schedule", &cfg)?;
    let corpus = Corpus::load(&cfg.corpus_path)?;
    let model = resolved_model(&cfg, &corpus)?;
    let sched = schedule_of(&cfg)?;
    let layers = sched.layers;

    let mut csv = String::from("step,theta");
    for l in 1..=layers {
        csv.push_str(&format!(",p_{l}"));
    }
    csv.push_str(",expected_depth,flops_fraction\n");
    for t in 0..=sched.total_steps {
        let theta = sched.theta(t);
        let probs = sched.keep_probs(t);
        csv.push_str(&format!("{t},{theta}"));
        for p in &probs {
            csv.push_str(&format!(",{p}"));
        }
        csv.push_str(&format!(
            ",{},{}\n",
            sched.expected_depth(t),
            flops::flops_per_step(&model, &sched, t)
        ));
    }
    fs::write(common.out.join("schedule.csv"), csv)?;

    // Polynomial reference curves: same endpoints, no exponential form.
    // theta_d(t) = max(theta_limit, 1 - (1 - theta_limit) (t/T)^d).
    let mut refs = String::from("step,theta");
    for d in 1..=8 {
        refs.push_str(&format!(",poly_{d}"));
    }
    refs.push('\n');
    for t in 0..=sched.total_steps {
        refs.push_str(&format!("{t},{}", sched.theta(t)));
        for d in 1..=8i32 {
            let frac = t as f64 / sched.total_steps as f64;
            let poly = (1.0 - (1.0 - sched.theta_limit) * frac.powi(d)).max(sched.theta_limit);
            refs.push_str(&format!(",{poly}"));
        }
        refs.push('\n');
    }
    fs::write(common.out.join("reference_curves.csv"), refs)?;
    println!("wrote {}", common.out.join("schedule.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_flops(common: &CommonArgs) -> anyhow::Result<ExitCode> {
    let cfg = effective_config(common)?;
    write_effective_config(&common.out, "flops", &cfg)?;
    let corpus = Corpus::load(&cfg.corpus_path)?;
    let model = resolved_model(&cfg, &corpus)?;
    let sched = schedule_of(&cfg)?;

    let mut csv =
        String::from("step,theta,expected_depth,block_flops_fraction,total_flops_fraction\n");
    for t in 0..=sched.total_steps {
        csv.push_str(&format!(
            "{t},{},{},{},{}\n",
            sched.theta(t),
            sched.expected_depth(t),
            flops::block_flops_fraction(&sched, t),
            flops::flops_per_step(&model, &sched, t)
        ));
    }
    let steady_depth = sched.steady_expected_depth();
    let fb = flops::block_flops(&model);
    let ff = flops::fixed_flops(&model);
    let steady_total = (steady_depth * fb + ff) / (sched.layers as f64 * fb + ff);
    csv.push_str(&format!(
        "steady,{},{},{},{}\n",
        sched.theta_limit,
        steady_depth,
        flops::steady_block_flops_fraction(&sched),
        steady_total
    ));
    fs::write(common.out.join("flops.csv"), csv)?;
    println!("wrote {}", common.out.join("flops.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn analysis_batch(
    cfg: &TrainConfig,
    corpus: &Corpus,
    model: &ModelConfig,
) -> anyhow::Result<layerdrop::train::MlmBatch> {
    Ok(train::mlm_batch(
        corpus,
        cfg.batch_size,
        model.max_seq,
        cfg.mask_prob,
        cfg.seed,
        Split::Validation,
        0,
    )?)
}

fn cmd_analyze(common: &CommonArgs, checkpoint: Option<&Path>) -> anyhow::Result<ExitCode> {
    let cfg = effective_config(common)?;
    write_effective_config(&common.out, "analyze", &cfg)?;
    let corpus = Corpus::load(&cfg.corpus_path)?;
    let (weights, model) = match checkpoint {
        Some(stem) => {
            let (ckpt_cfg, _) = load_checkpoint_config(stem)?;
            (load_checkpoint::<f32>(stem)?, ckpt_cfg)
        }
        None => {
            let model = resolved_model(&cfg, &corpus)?;
            (ModelWeights::<f32>::init(&model, cfg.seed), model)
        }
    };
    let batch = analysis_batch(&cfg, &corpus, &model)?;
    let profiles = instrument::layer_profiles(&weights, &batch)?;

    let seed = cfg.seed;
    let mut files: Vec<(&str, String)> = vec![
        ("grad_norms.csv", String::new()),
        ("norm_preserving.csv", String::new()),
        ("io_similarity.csv", String::new()),
        ("residual_mean.csv", String::new()),
    ];
    for (_, content) in files.iter_mut() {
        content.push_str("layer,metric,value,step,seed\n");
    }
    for p in &profiles {
        let l = p.layer;
        files[0].1.push_str(&format!(
            "{l},weight_grad_norm,{},0,{seed}\n",
            p.weight_grad_norm
        ));
        files[1].1.push_str(&format!(
            "{l},input_grad_norm,{},0,{seed}\n",
            p.input_grad_norm
        ));
        files[1].1.push_str(&format!(
            "{l},output_grad_norm,{},0,{seed}\n",
            p.output_grad_norm
        ));
        if let Some(r) = p.norm_preserving_ratio {
            files[1].1.push_str(&format!("{l},norm_preserving_ratio,{r},0,{seed}\n"));
        }
        files[2].1.push_str(&format!("{l},l2_distance,{},0,{seed}\n", p.l2_distance));
        if let Some(a) = p.arccos_deg {
            files[2].1.push_str(&format!("{l},arccos_deg,{a},0,{seed}\n"));
        }
        if p.residual_mean_norm.is_finite() {
            files[3].1.push_str(&format!(
                "{l},residual_mean_norm,{},0,{seed}\n",
                p.residual_mean_norm
            ));
            files[3].1.push_str(&format!(
                "{l},residual_mean_relative,{},0,{seed}\n",
                p.residual_mean_relative
            ));
        }
    }
    for (name, content) in files {
        fs::write(common.out.join(name), content)?;
    }
    println!("wrote analysis CSVs to {}", common.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_lesion(
    common: &CommonArgs,
    checkpoint: &Path,
    theta: f64,
    gate_seeds: usize,
) -> anyhow::Result<ExitCode> {
    let cfg = effective_config(common)?;
    write_effective_config(&common.out, "lesion", &cfg)?;
    let corpus = Corpus::load(&cfg.corpus_path)?;
    let weights = load_checkpoint::<f32>(checkpoint)?;
    let seeds: Vec<u64> = (0..gate_seeds as u64).collect();

    let full = instrument::standard_eval(
        &weights,
        &corpus,
        cfg.batch_size,
        cfg.mask_prob,
        cfg.seed,
        cfg.eval_batches,
    )?;
    let mut csv = String::from("theta,calibration,gate_seeds,mean_loss,full_depth_loss\n");
    for rescaled in [false, true] {
        let loss = instrument::lesion_eval(
            &weights,
            &corpus,
            theta,
            cfg.batch_size,
            cfg.mask_prob,
            cfg.seed,
            cfg.eval_batches,
            &seeds,
            rescaled,
        )?;
        csv.push_str(&format!(
            "{theta},{},{gate_seeds},{loss},{full}\n",
            if rescaled { "scaled" } else { "unscaled" }
        ));
    }
    fs::write(common.out.join("lesion.csv"), csv)?;
    println!("wrote {}", common.out.join("lesion.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(common: &CommonArgs) -> anyhow::Result<ExitCode> {
    let cfg = effective_config(common)?;
    write_effective_config(&common.out, "grad-check", &cfg)?;
    let seed = cfg.seed;
    let mut all = gradcheck::check_all_ops(seed)?;
    all.extend(gradcheck::check_blocks(seed)?);
    let small = ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        vocab: 11,
        max_seq: 4,
        variant: Variant::PreLn,
        dropout: 0.0,
        ln_eps: 1e-12,
        init_std: 0.02,
    };
    for variant in [Variant::PostLn, Variant::PreLn, Variant::St] {
        all.push(gradcheck::check_full_model(variant, &small, seed, 1e-4)?);
    }

    let mut ok = true;
    for check in &all {
        let status = if check.passed() { "pass" } else { "FAIL" };
        println!(
            "{status} {:<28} max rel err {:.3e} (tol {:.0e})",
            check.name, check.max_rel_err, check.tolerance
        );
        ok &= check.passed();
    }
    if ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Divergence("gradient checks failed".into()).into())
    }
}
