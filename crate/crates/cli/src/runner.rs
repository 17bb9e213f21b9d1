//! Subcommand implementations.
//!
//! Every run derives its randomness from one master seed through named
//! streams, writes its artifacts into the output directory, and finishes
//! with a manifest recording the config hash and per-artifact content
//! hashes for the reproducible files.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use holopos_core::beamforming::{random_config, sample_positions};
use holopos_core::channel::ChannelModel;
use holopos_core::crlb::{
    crlb_gradients, finite_difference_gradient, max_relative_difference,
};
use holopos_core::estimator::{
    self, generate_dataset_with_featurizer, generate_source_dataset, load_estimator,
    save_estimator, MlpParams,
};
use holopos_core::federated::{
    generate_anchored_dataset, run_federated_adaptation, sample_anchors, UserState,
};
use holopos_core::rng::named_stream;
use holopos_core::{BeamformingConfig64, ChannelModel64};

use crate::artifacts::{
    fmt_f64, load_beamforming, save_beamforming, write_csv, ArtifactSet,
};
use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    ValidateGradients,
    OptimizeBeamforming,
    TrainSource,
    RunFl,
    Evaluate,
    All,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::ValidateGradients => "validate-gradients",
            Subcommand::OptimizeBeamforming => "optimize-beamforming",
            Subcommand::TrainSource => "train-source",
            Subcommand::RunFl => "run-fl",
            Subcommand::Evaluate => "evaluate",
            Subcommand::All => "all",
        }
    }
}

pub struct RunContext {
    pub config: ExperimentConfig,
    pub seed: u64,
}

/// Execute a subcommand, writing artifacts and the manifest under `out`.
pub fn run(cmd: Subcommand, ctx: &RunContext, out: &Path) -> Result<(), CliError> {
    let mut set = ArtifactSet::new(out)?;
    let mut extras = BTreeMap::new();
    match cmd {
        Subcommand::ValidateGradients => validate_gradients(ctx, &mut set, &mut extras)?,
        Subcommand::OptimizeBeamforming => optimize_beamforming(ctx, &mut set, &mut extras)?,
        Subcommand::TrainSource => train_source(ctx, &mut set, &mut extras)?,
        Subcommand::RunFl => run_fl(ctx, &mut set, &mut extras)?,
        Subcommand::Evaluate => evaluate(ctx, &mut set, &mut extras)?,
        Subcommand::All => {
            optimize_beamforming(ctx, &mut set, &mut extras)?;
            train_source(ctx, &mut set, &mut extras)?;
            run_fl(ctx, &mut set, &mut extras)?;
            evaluate(ctx, &mut set, &mut extras)?;
        }
    }
    set.write_manifest(cmd.name(), ctx.seed, &ctx.config.to_toml(), extras)
}

/// The optimized configuration if this output directory has one, otherwise
/// the seeded random fallback.
fn beamforming_for(
    ctx: &RunContext,
    set: &ArtifactSet,
    extras: &mut BTreeMap<String, serde_json::Value>,
) -> Result<BeamformingConfig64, CliError> {
    let path = set.path("beamforming.json");
    if path.exists() {
        extras.insert("beamforming_source".into(), json!("beamforming.json"));
        load_beamforming(&path)
    } else {
        extras.insert("beamforming_source".into(), json!("seeded-random"));
        ctx.config.fallback_beamforming(ctx.seed)
    }
}

// ---------------------------------------------------------------------------
// validate-gradients
// ---------------------------------------------------------------------------

/// A scaled-down copy of the config for one sweep point of the gradient
/// validation experiment.
fn sweep_config(base: &ExperimentConfig, num_frames: usize, grid: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.bands.num_frames = num_frames;
    cfg.geometry.element_grid = [grid, grid];
    // The sweep instances are small; a coarser multipath quadrature keeps
    // the model build fast without moving the gradients.
    cfg.environment.source.quadrature = [32, 16];
    cfg
}

fn validate_gradients(
    ctx: &RunContext,
    set: &mut ArtifactSet,
    extras: &mut BTreeMap<String, serde_json::Value>,
) -> Result<(), CliError> {
    let trials = 30usize;
    let fd_step = 1e-4;
    let mut rows = Vec::new();
    // Frame sweep at a 4x4 array, then element sweep at 4 frames.
    let sweeps: Vec<(&str, Vec<(usize, usize)>)> = vec![
        ("num_frames", vec![(2, 4), (4, 4), (8, 4)]),
        ("num_elements", vec![(4, 4), (4, 6), (4, 8)]),
    ];
    for (label, points) in sweeps {
        for (num_frames, grid) in points {
            let cfg = sweep_config(&ctx.config, num_frames, grid);
            let model = cfg.source_model()?;
            let plan = model.plan().clone();
            let (num_feeds, num_elements) = (
                model.geometry().num_feeds(),
                model.geometry().num_elements(),
            );
            let mut worst = 0.0f64;
            let mut analytic_ms = 0.0f64;
            let mut fd_ms = 0.0f64;
            for trial in 0..trials {
                let mut rng = named_stream(
                    ctx.seed,
                    &format!("validate/{label}/{num_frames}/{grid}/{trial}"),
                );
                let bf = random_config(&plan, num_feeds, num_elements, &mut rng);
                let p = model.roi().sample(&mut rng);

                let t0 = Instant::now();
                let report = crlb_gradients(&model, &bf, p)?;
                analytic_ms += t0.elapsed().as_secs_f64() * 1e3;

                let t1 = Instant::now();
                let fd = finite_difference_gradient(&model, &bf, p, fd_step)?;
                fd_ms += t1.elapsed().as_secs_f64() * 1e3;

                let rel = max_relative_difference(&report.into_gradient_pair(), &fd);
                worst = worst.max(rel);
            }
            let param_value = match label {
                "num_frames" => num_frames,
                _ => grid * grid,
            };
            rows.push(vec![
                label.to_owned(),
                param_value.to_string(),
                fmt_f64(analytic_ms / trials as f64),
                fmt_f64(fd_ms / trials as f64),
                fmt_f64(worst),
            ]);
        }
    }
    write_csv(
        &set.path("gradient_validation.csv"),
        &["sweep", "param_value", "analytic_ms", "fd_ms", "max_rel_diff"],
        &rows,
    )?;
    set.register("gradient_validation.csv", false)?;
    extras.insert("gradient_trials".into(), json!(trials));
    extras.insert("fd_step".into(), json!(fd_step));
    Ok(())
}

// ---------------------------------------------------------------------------
// optimize-beamforming
// ---------------------------------------------------------------------------

fn optimize_beamforming(
    ctx: &RunContext,
    set: &mut ArtifactSet,
    extras: &mut BTreeMap<String, serde_json::Value>,
) -> Result<(), CliError> {
    let model = ctx.config.source_model()?;
    let cfg = ctx.config.optimizer_config(ctx.seed)?;
    let init = ctx.config.fallback_beamforming(ctx.seed)?;
    let outcome = holopos_core::beamforming::optimize_da_beamforming(&model, &cfg, &init)?;

    let rows: Vec<Vec<String>> = outcome
        .trace
        .iter()
        .map(|t| {
            vec![
                t.outer_iter.to_string(),
                fmt_f64(t.mean_crlb),
                fmt_f64(t.wall_ms),
            ]
        })
        .collect();
    write_csv(
        &set.path("crlb_trace.csv"),
        &["outer_iter", "mean_crlb", "wall_ms"],
        &rows,
    )?;
    set.register("crlb_trace.csv", false)?;

    save_beamforming(&set.path("beamforming.json"), &outcome.config)?;
    set.register("beamforming.json", true)?;

    extras.insert("optimizer_beta".into(), json!(outcome.beta));
    extras.insert(
        "optimizer_skipped_singular".into(),
        json!(outcome.skipped_singular),
    );
    extras.insert(
        "initial_mean_crlb".into(),
        json!(outcome.trace.first().map(|t| t.mean_crlb)),
    );
    extras.insert(
        "final_mean_crlb".into(),
        json!(outcome.trace.last().map(|t| t.mean_crlb)),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-source
// ---------------------------------------------------------------------------

fn train_source(
    ctx: &RunContext,
    set: &mut ArtifactSet,
    extras: &mut BTreeMap<String, serde_json::Value>,
) -> Result<(), CliError> {
    let model = ctx.config.source_model()?;
    let bf = beamforming_for(ctx, set, extras)?;
    let mut data_rng = named_stream(ctx.seed, "estimator/source-data");
    let (dataset, featurizer) = generate_source_dataset(
        &model,
        &bf,
        ctx.config.estimator.source_samples,
        &mut data_rng,
    )?;
    let arch = ctx.config.mlp_architecture(&model)?;
    let mut init_rng = named_stream(ctx.seed, "estimator/init");
    let initial = MlpParams::<f64>::init(arch, &mut init_rng);
    let mut train_rng = named_stream(ctx.seed, "estimator/train");
    let report = estimator::train_source(
        &dataset,
        &initial,
        &ctx.config.train_config(),
        &mut train_rng,
    )?;

    let rows: Vec<Vec<String>> = report
        .curve
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                fmt_f64(e.train_loss),
                e.val_loss.map(fmt_f64).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        &set.path("training_curve.csv"),
        &["epoch", "train_loss", "val_loss"],
        &rows,
    )?;
    set.register("training_curve.csv", true)?;

    save_estimator(&set.path("estimator.bin"), &report.params, &featurizer)?;
    set.register("estimator.bin", true)?;

    extras.insert(
        "train_initial_loss".into(),
        json!(report.curve.first().map(|e| e.train_loss)),
    );
    extras.insert(
        "train_final_loss".into(),
        json!(report.curve.last().map(|e| e.train_loss)),
    );
    extras.insert("best_val_loss".into(), json!(report.best_val_loss));
    Ok(())
}

// ---------------------------------------------------------------------------
// run-fl
// ---------------------------------------------------------------------------

fn load_estimator_artifact(
    set: &ArtifactSet,
    prefer_adapted: bool,
) -> Result<(MlpParams<f64>, holopos_core::Featurizer64, String), CliError> {
    let candidates: &[&str] = if prefer_adapted {
        &["estimator_adapted.bin", "estimator.bin"]
    } else {
        &["estimator.bin"]
    };
    for name in candidates {
        let path = set.path(name);
        if path.exists() {
            let (params, featurizer) =
                load_estimator::<f64>(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
            return Ok((params, featurizer, (*name).to_owned()));
        }
    }
    Err(CliError::Validation(format!(
        "missing {} in the output directory; run train-source first",
        candidates.last().unwrap()
    )))
}

fn run_fl(
    ctx: &RunContext,
    set: &mut ArtifactSet,
    extras: &mut BTreeMap<String, serde_json::Value>,
) -> Result<(), CliError> {
    let target = ctx.config.target_model()?;
    let bf = beamforming_for(ctx, set, extras)?;
    let (initial, featurizer, _) = load_estimator_artifact(set, false)?;

    let fed = &ctx.config.federated;
    let mut anchor_rng = named_stream(ctx.seed, "fl/anchors");
    let anchors = sample_anchors(&target, fed.anchors, &mut anchor_rng);
    let mut users = Vec::with_capacity(fed.users);
    for n in 0..fed.users {
        let mut user_rng = named_stream(ctx.seed, &format!("fl/user{n}/dataset"));
        let dataset = generate_anchored_dataset(
            &target,
            &bf,
            &featurizer,
            &anchors,
            fed.anchor_radius_m,
            fed.samples_per_user,
            &mut user_rng,
        )?;
        users.push(UserState {
            id: n,
            dataset,
            epsilon: ctx.config.user_epsilon(n),
        });
    }
    let mut eval_rng = named_stream(ctx.seed, "fl/evalset");
    let eval_set = generate_dataset_with_featurizer(
        &target,
        &bf,
        &featurizer,
        fed.eval_samples,
        &mut eval_rng,
    )?;
    let initial_mse = estimator::mse(&eval_set, &initial)?;

    let fl_cfg = ctx.config.fl_run_config(ctx.seed, initial.len());
    let dp = ctx.config.dp_config();
    let (adapted, log) = run_federated_adaptation(&initial, &users, &fl_cfg, &dp, &eval_set)?;

    let mut header: Vec<String> = vec!["t".into(), "chosen_user".into()];
    for n in 0..fed.users {
        header.push(format!("xi_{n}"));
    }
    header.extend(
        ["target_mse", "descent_term", "sched_variance_term", "vhat_trace"]
            .iter()
            .map(|s| s.to_string()),
    );
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = log
        .rounds
        .iter()
        .map(|r| {
            let mut row = vec![r.round.to_string(), r.chosen_user.to_string()];
            row.extend(r.schedule.iter().map(|&x| fmt_f64(x)));
            row.push(fmt_f64(r.eval_mse));
            row.push(fmt_f64(r.descent_term));
            row.push(fmt_f64(r.variance_term));
            row.push(fmt_f64(r.vhat_trace));
            row
        })
        .collect();
    write_csv(&set.path("fl_rounds.csv"), &header_refs, &rows)?;
    set.register("fl_rounds.csv", true)?;

    save_estimator(&set.path("estimator_adapted.bin"), &adapted, &featurizer)?;
    set.register("estimator_adapted.bin", true)?;

    let final_mse = log.rounds.last().map(|r| r.eval_mse).unwrap_or(initial_mse);
    let summary = json!({
        "rounds": fed.rounds,
        "users": fed.users,
        "l_smooth": log.l_smooth,
        "initial_target_mse": initial_mse,
        "final_target_mse": final_mse,
        "mse_reduction": 1.0 - final_mse / initial_mse,
    });
    std::fs::write(
        set.path("fl_summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    set.register("fl_summary.json", true)?;
    extras.insert("fl_initial_target_mse".into(), json!(initial_mse));
    extras.insert("fl_final_target_mse".into(), json!(final_mse));
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn evaluate(
    ctx: &RunContext,
    set: &mut ArtifactSet,
    extras: &mut BTreeMap<String, serde_json::Value>,
) -> Result<(), CliError> {
    let target = ctx.config.target_model()?;
    let bf = beamforming_for(ctx, set, extras)?;
    let (params, featurizer, which) = load_estimator_artifact(set, true)?;
    let mut test_rng = named_stream(ctx.seed, "evaluate/testset");
    let test_set = generate_dataset_with_featurizer(
        &target,
        &bf,
        &featurizer,
        ctx.config.federated.eval_samples,
        &mut test_rng,
    )?;
    let mse = estimator::mse(&test_set, &params)?;
    let rmse = mse.sqrt();
    write_csv(
        &set.path("evaluation.csv"),
        &["metric", "value"],
        &[
            vec!["target_mse_m2".into(), fmt_f64(mse)],
            vec!["target_rmse_m".into(), fmt_f64(rmse)],
            vec!["samples".into(), ctx.config.federated.eval_samples.to_string()],
        ],
    )?;
    set.register("evaluation.csv", true)?;
    extras.insert("evaluated_estimator".into(), json!(which));
    extras.insert("target_rmse_m".into(), json!(rmse));
    Ok(())
}

// ---------------------------------------------------------------------------
// shared helpers for tests
// ---------------------------------------------------------------------------

/// Positions of the optimizer's sample set, exposed so tests can reproduce
/// the mean bound the trace reports.
pub fn optimizer_sample_positions(
    config: &ExperimentConfig,
    model: &ChannelModel64,
    seed: u64,
) -> Vec<[f64; 3]> {
    let mut rng = named_stream(seed, "optimizer/samples");
    sample_positions(model.roi(), config.optimizer.num_samples, &mut rng).positions
}

/// Build both domain models plus the fallback beamforming in one call.
pub fn build_scenario(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(ChannelModel<f64>, ChannelModel<f64>, BeamformingConfig64), CliError> {
    Ok((
        config.source_model()?,
        config.target_model()?,
        config.fallback_beamforming(seed)?,
    ))
}
