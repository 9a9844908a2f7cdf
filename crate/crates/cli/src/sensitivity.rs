//! Grid sweeps over the hyperparameters that shape routing and scaling.

use std::fs;

use samora_core::train::mean_token_acc;

use crate::config::RunConfig;
use crate::runner::{generate_data, pretrain_base, train_variant_run};
use crate::{run_jobs, worker_count, CliError};

/// Axes the sweep understands, in the order columns appear in the report.
const AXES: &[&str] = &["tau", "lambda_orth", "lambda_match", "n_experts", "rank", "d_g"];

#[derive(Clone, Debug)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parse one `--grid key=v1,v2,...` occurrence.
pub fn parse_grid(spec: &str) -> Result<GridAxis, CliError> {
    let (key, vals) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("grid spec '{spec}' is not key=v1,v2,...")))?;
    if !AXES.contains(&key) {
        return Err(CliError::Config(format!(
            "unknown grid axis '{key}', expected one of {}",
            AXES.join(", ")
        )));
    }
    let values: Vec<String> = vals
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .collect();
    if values.is_empty() {
        return Err(CliError::Config(format!("grid axis '{key}' has no values")));
    }
    Ok(GridAxis { key: key.to_string(), values })
}

fn apply_axis(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), CliError> {
    let fnum = || {
        value
            .parse::<f64>()
            .map_err(|_| CliError::Config(format!("grid value '{value}' for {key} is not a number")))
    };
    let unum = || {
        value
            .parse::<usize>()
            .map_err(|_| CliError::Config(format!("grid value '{value}' for {key} is not an integer")))
    };
    match key {
        "tau" => cfg.adapter.tau = fnum()?,
        "lambda_orth" => cfg.train.weights.lambda_orth = fnum()?,
        "lambda_match" => cfg.train.weights.lambda_match = fnum()?,
        "n_experts" => cfg.adapter.n_experts = unum()?,
        "rank" => cfg.adapter.rank = unum()?,
        "d_g" => cfg.adapter.d_g = unum()?,
        other => return Err(CliError::Config(format!("unknown grid axis '{other}'"))),
    }
    Ok(())
}

/// Every combination of axis values, axes in `AXES` order, later axes
/// varying fastest.
fn cartesian(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for point in &points {
            for v in &axis.values {
                let mut p = point.clone();
                p.push((axis.key.clone(), v.clone()));
                next.push(p);
            }
        }
        points = next;
    }
    points
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub settings: Vec<(String, String)>,
    pub mean_acc: f64,
}

/// Train the configured variant at every grid point and report accuracy.
///
/// None of the axes touch the data pipeline or the backbone, so both are
/// built once per sweep and shared across points.
pub fn cmd_sensitivity(cfg: &RunConfig, grid: &[String]) -> Result<Vec<SweepPoint>, CliError> {
    if grid.is_empty() {
        return Err(CliError::Config(
            "sensitivity needs at least one --grid key=v1,v2,... axis".into(),
        ));
    }
    let mut axes = Vec::new();
    for spec in grid {
        let axis = parse_grid(spec)?;
        if axes.iter().any(|a: &GridAxis| a.key == axis.key) {
            return Err(CliError::Config(format!("grid axis '{}' given twice", axis.key)));
        }
        axes.push(axis);
    }
    axes.sort_by_key(|a| AXES.iter().position(|k| *k == a.key).unwrap());

    let points = cartesian(&axes);
    let mut configs = Vec::with_capacity(points.len());
    for (i, point) in points.iter().enumerate() {
        let mut pcfg = cfg.clone();
        for (key, value) in point {
            apply_axis(&mut pcfg, key, value)?;
        }
        pcfg.out = cfg.out.join(format!("point_{i:03}"));
        pcfg.validate()?;
        configs.push(pcfg);
    }

    let tasks = generate_data(cfg)?;
    let base = pretrain_base(cfg, &tasks)?;

    let jobs: Vec<_> = configs
        .iter()
        .map(|pcfg| {
            let base = &base;
            let tasks = &tasks;
            move || {
                let run = train_variant_run(pcfg, base, tasks, &pcfg.out)?;
                Ok::<f64, CliError>(mean_token_acc(&run.eval))
            }
        })
        .collect();
    let accs: Vec<f64> = run_jobs(jobs, worker_count(configs.len()))
        .into_iter()
        .collect::<Result<_, CliError>>()?;

    let results: Vec<SweepPoint> = points
        .into_iter()
        .zip(accs)
        .map(|(settings, mean_acc)| SweepPoint { settings, mean_acc })
        .collect();

    let keys: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    fs::create_dir_all(&cfg.out).map_err(samora_core::Error::from).map_err(CliError::Core)?;
    fs::write(cfg.out.join("sensitivity.csv"), sweep_csv(&keys, &results))
        .map_err(samora_core::Error::from)
        .map_err(CliError::Core)?;

    let header: Vec<String> = keys.iter().map(|k| format!("{k:>12}")).collect();
    println!("{}  mean_token_acc", header.join("  "));
    for point in &results {
        let row: Vec<String> = point.settings.iter().map(|(_, v)| format!("{v:>12}")).collect();
        println!("{}  {:.4}", row.join("  "), point.mean_acc);
    }
    println!("wrote {}", cfg.out.join("sensitivity.csv").display());
    Ok(results)
}

pub fn sweep_csv(keys: &[&str], results: &[SweepPoint]) -> String {
    let mut out = String::new();
    out.push_str(&keys.join(","));
    out.push_str(",mean_token_acc\n");
    for point in results {
        let vals: Vec<&str> = point.settings.iter().map(|(_, v)| v.as_str()).collect();
        out.push_str(&vals.join(","));
        out.push_str(&format!(",{}\n", point.mean_acc));
    }
    out
}
