//! Post-hoc inspection of a finished run from its checkpoint.

use std::fs;
use std::path::Path;

use samora_core::analysis::{
    clusters_csv, complexity_csv, complexity_report, expert_clusters, max_pairwise_tv, routing_csv,
    routing_profile, scaling_csv, scaling_report, AnalysisBundle,
};
use samora_core::checkpoint::Checkpoint;

use crate::config::RunConfig;
use crate::runner::{generate_data, restore_run};
use crate::CliError;

/// Rebuild the run recorded in `ckpt` and write every report to `out`.
///
/// The checkpoint embeds the full run config, so the data and model are
/// reconstructed from it rather than from any config file on disk. Routing,
/// scaling, and cluster reports are skipped for variants with no routed
/// layers; the complexity report is always produced.
pub fn cmd_analyze(ckpt_path: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::read(ckpt_path).map_err(CliError::Core)?;
    let cfg: RunConfig = serde_json::from_value(ckpt.manifest.config.clone()).map_err(|e| {
        CliError::Core(samora_core::Error::Checkpoint(format!(
            "checkpoint config does not describe a run: {e}"
        )))
    })?;
    cfg.validate()?;

    let tasks = generate_data(&cfg)?;
    let (store, model) = restore_run(&cfg, &ckpt)?;

    let complexity = complexity_report(&store, &model);
    let routed = !model.routed_layers().is_empty();
    let routing = if routed {
        Some(routing_profile(&store, &model, &tasks).map_err(CliError::Core)?)
    } else {
        None
    };
    let scaling = if routed {
        Some(scaling_report(&store, &model).map_err(CliError::Core)?)
    } else {
        None
    };
    let clusters = if routed {
        Some(expert_clusters(&store, &model, &tasks).map_err(CliError::Core)?)
    } else {
        None
    };

    fs::create_dir_all(out).map_err(samora_core::Error::from).map_err(CliError::Core)?;
    let write = |name: &str, body: String| -> Result<(), CliError> {
        fs::write(out.join(name), body)
            .map_err(samora_core::Error::from)
            .map_err(CliError::Core)
    };
    write("complexity.csv", complexity_csv(&complexity))?;
    if let Some(r) = &routing {
        write("routing.csv", routing_csv(r))?;
    }
    if let Some(s) = &scaling {
        write("scaling.csv", scaling_csv(s))?;
    }
    if let Some(c) = &clusters {
        write("clusters.csv", clusters_csv(c))?;
    }

    let bundle = AnalysisBundle { complexity, routing, scaling, clusters };
    write("analysis.json", bundle.to_json())?;

    println!(
        "analyzed {} ({} trainable params, formula {})",
        cfg.variant, bundle.complexity.actual_total, bundle.complexity.formula_total
    );
    if let Some(r) = &bundle.routing {
        println!("max pairwise routing TV distance: {:.4}", max_pairwise_tv(r));
    }
    if let Some(s) = &bundle.scaling {
        println!("task gating inert: {}", s.inert);
    }
    println!("reports written to {}", out.display());
    Ok(())
}
