//! `samora train`: one variant, one seed, one run directory.

use crate::config::RunConfig;
use crate::runner::{generate_data, pretrain_base, train_variant_run, VariantRun};
use crate::CliError;

pub fn cmd_train(cfg: &RunConfig) -> Result<VariantRun, CliError> {
    let tasks = generate_data(cfg)?;
    let base = pretrain_base(cfg, &tasks)?;
    let run = train_variant_run(cfg, &base, &tasks, &cfg.out)?;

    println!(
        "trained {} (seed {}) in {} steps",
        run.variant, run.seed, run.outcome.steps
    );
    for e in &run.eval {
        println!(
            "  {:<10} token_acc {:.4}  seq_acc {:.4}",
            e.task, e.token_acc, e.seq_acc
        );
    }
    println!("  mean token_acc {:.4}", run.mean_acc);
    println!("artifacts in {}", run.run_dir.display());
    Ok(run)
}
