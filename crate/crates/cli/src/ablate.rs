//! `samora ablate`: every variant on every seed, pretraining the backbone
//! once per seed and reusing it, with a deterministic merged CSV and a
//! comparison summary.

use std::collections::BTreeMap;
use std::path::Path;

use samora_core::baselines::VARIANT_IDS;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::runner::{generate_data, pretrain_base, train_variant_run, VariantRun};
use crate::{run_jobs, worker_count, CliError};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    /// Mean token accuracy per seed, seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    /// Seeds where samora's mean token accuracy is >= the baseline's.
    pub wins: usize,
    pub seeds: usize,
    /// samora mean minus baseline mean over all seeds.
    pub effect: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
    pub comparisons: Vec<Comparison>,
}

pub struct AblationOutcome {
    pub runs: Vec<VariantRun>,
    pub summary: AblationSummary,
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationOutcome, CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(samora_core::Error::from)?;

    let mut runs: Vec<VariantRun> = Vec::new();
    for &seed in &cfg.seeds {
        let mut seed_cfg = cfg.clone();
        seed_cfg.train.seed = seed;
        let tasks = generate_data(&seed_cfg)?;
        let base = pretrain_base(&seed_cfg, &tasks)?;

        let jobs: Vec<_> = VARIANT_IDS
            .iter()
            .map(|&variant| {
                let mut vcfg = seed_cfg.clone();
                vcfg.variant = variant.to_string();
                let dir = cfg.out.join(format!("{variant}_s{seed}"));
                let base = &base;
                let tasks = &tasks;
                move || train_variant_run(&vcfg, base, tasks, &dir)
            })
            .collect();
        let workers = worker_count(jobs.len());
        for run in run_jobs(jobs, workers) {
            runs.push(run?);
        }
    }

    let summary = summarize(cfg, &runs);
    std::fs::write(cfg.out.join("results.csv"), results_csv(&runs))
        .map_err(samora_core::Error::from)?;
    std::fs::write(
        cfg.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(samora_core::Error::from)?;

    print_summary(&summary);
    println!("artifacts in {}", cfg.out.display());
    Ok(AblationOutcome { runs, summary })
}

/// One row per (variant, seed, task) plus a mean row per (variant, seed),
/// ordered by variant id then seed.
pub fn results_csv(runs: &[VariantRun]) -> String {
    let mut sorted: Vec<&VariantRun> = runs.iter().collect();
    sorted.sort_by(|a, b| (&a.variant, a.seed).cmp(&(&b.variant, b.seed)));
    let mut out = String::from("variant,seed,task,token_acc,seq_acc\n");
    for run in sorted {
        for e in &run.eval {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                run.variant, run.seed, e.task, e.token_acc, e.seq_acc
            ));
        }
        let seq_mean =
            run.eval.iter().map(|e| e.seq_acc).sum::<f64>() / run.eval.len().max(1) as f64;
        out.push_str(&format!(
            "{},{},mean,{},{}\n",
            run.variant, run.seed, run.mean_acc, seq_mean
        ));
    }
    out
}

fn summarize(cfg: &RunConfig, runs: &[VariantRun]) -> AblationSummary {
    let mut by_variant: BTreeMap<&str, BTreeMap<u64, f64>> = BTreeMap::new();
    for run in runs {
        by_variant
            .entry(run.variant.as_str())
            .or_default()
            .insert(run.seed, run.mean_acc);
    }
    let per_seed = |variant: &str| -> Vec<f64> {
        cfg.seeds
            .iter()
            .map(|s| by_variant[variant][s])
            .collect()
    };

    let variants: Vec<VariantSummary> = VARIANT_IDS
        .iter()
        .filter(|v| by_variant.contains_key(**v))
        .map(|&v| {
            let accs = per_seed(v);
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            VariantSummary {
                variant: v.to_string(),
                per_seed: accs,
                mean,
            }
        })
        .collect();

    let samora = per_seed("samora");
    let comparisons = ["wo_router", "wo_scaling", "wo_orth", "wo_match", "lora"]
        .iter()
        .filter(|v| by_variant.contains_key(**v))
        .map(|&v| {
            let other = per_seed(v);
            let wins = samora
                .iter()
                .zip(&other)
                .filter(|(s, o)| s >= o)
                .count();
            let effect = (samora.iter().sum::<f64>() - other.iter().sum::<f64>())
                / samora.len() as f64;
            Comparison {
                baseline: v.to_string(),
                wins,
                seeds: samora.len(),
                effect,
            }
        })
        .collect();

    AblationSummary {
        seeds: cfg.seeds.clone(),
        variants,
        comparisons,
    }
}

fn print_summary(summary: &AblationSummary) {
    println!("mean token accuracy over seeds {:?}:", summary.seeds);
    for v in &summary.variants {
        let per_seed: Vec<String> = v.per_seed.iter().map(|a| format!("{a:.4}")).collect();
        println!("  {:<11} {:.4}  [{}]", v.variant, v.mean, per_seed.join(", "));
    }
    for c in &summary.comparisons {
        println!(
            "  samora vs {:<11} wins {}/{}  effect {:+.4}",
            c.baseline, c.wins, c.seeds, c.effect
        );
    }
}

/// Loads a summary back from an ablation output directory.
pub fn read_summary(out: &Path) -> Result<AblationSummary, CliError> {
    let text = std::fs::read_to_string(out.join("summary.json"))
        .map_err(samora_core::Error::from)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("summary.json: {e}")))
}
