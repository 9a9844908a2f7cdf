//! Shared pipeline plumbing: data generation, one-time backbone
//! pretraining per seed, and training a single variant into its run
//! directory with the full artifact set.

use std::path::{Path, PathBuf};

use samora_core::baselines::variant_from_id;
use samora_core::checkpoint::Checkpoint;
use samora_core::data::{gen_dataset, TaskData};
use samora_core::model::Model;
use samora_core::rng::{streams, RngState};
use samora_core::train::{
    mean_token_acc, pretrain_backbone, train_adapters, write_metrics, EvalResult, TrainOutcome,
};
use samora_core::{analysis, ParamStore};

use crate::config::RunConfig;
use crate::CliError;

pub fn generate_data(cfg: &RunConfig) -> Result<Vec<TaskData>, CliError> {
    let rng = RngState::with_stream(cfg.train.seed, streams::DATA);
    Ok(gen_dataset(&cfg.tasks, &rng)?)
}

/// Frozen backbone plus its store, reusable across every variant trained
/// on the same seed.
pub struct PretrainedBase {
    pub store: ParamStore,
    pub model: Model,
}

pub fn pretrain_base(cfg: &RunConfig, tasks: &[TaskData]) -> Result<PretrainedBase, CliError> {
    let mut store = ParamStore::new();
    let model = pretrain_backbone(
        &mut store,
        &cfg.model,
        tasks,
        &cfg.pretrain,
        cfg.train.seed,
    )?;
    Ok(PretrainedBase { store, model })
}

pub struct VariantRun {
    pub variant: String,
    pub seed: u64,
    pub eval: Vec<EvalResult>,
    pub mean_acc: f64,
    pub run_dir: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains `cfg.variant` from the shared base and writes config.toml,
/// metrics.jsonl, checkpoint.ckpt, last_good.ckpt, and (for routed
/// variants) scaling.csv under `run_dir`. Reruns overwrite deterministically.
pub fn train_variant_run(
    cfg: &RunConfig,
    base: &PretrainedBase,
    tasks: &[TaskData],
    run_dir: &Path,
) -> Result<VariantRun, CliError> {
    std::fs::create_dir_all(run_dir).map_err(samora_core::Error::from)?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml())
        .map_err(samora_core::Error::from)?;

    let mut store = base.store.clone();
    let mut model = base.model.clone();
    let variant = variant_from_id(&cfg.variant)?;
    let mut rng = RngState::with_stream(cfg.train.seed, streams::ADAPTER);
    let toggles = samora_core::baselines::build_variant(
        &mut store,
        &mut model,
        &cfg.adapter,
        &cfg.task_names(),
        variant,
        &mut rng,
    )?;

    let outcome = train_adapters(&mut store, &model, tasks, &cfg.train, &toggles, Some(run_dir))?;
    write_metrics(&run_dir.join("metrics.jsonl"), &outcome.metrics)?;

    let ckpt = Checkpoint::from_store(&store, cfg.to_json(), vec![], cfg.train.precision);
    ckpt.write(&run_dir.join("checkpoint.ckpt"))?;

    if !model.routed_layers().is_empty() {
        let scaling = analysis::scaling_report(&store, &model)?;
        std::fs::write(run_dir.join("scaling.csv"), analysis::scaling_csv(&scaling))
            .map_err(samora_core::Error::from)?;
    }

    let mean_acc = mean_token_acc(&outcome.final_eval);
    Ok(VariantRun {
        variant: cfg.variant.clone(),
        seed: cfg.train.seed,
        eval: outcome.final_eval.clone(),
        mean_acc,
        run_dir: run_dir.to_path_buf(),
        outcome,
    })
}

/// Rebuilds the model skeleton a checkpoint describes and loads its
/// parameters: same structural rng streams, then values overwritten.
pub fn restore_run(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<(ParamStore, Model), CliError> {
    let mut store = ParamStore::new();
    let mut init_rng = RngState::with_stream(cfg.train.seed, streams::BACKBONE);
    let backbone = samora_core::model::init_backbone(&mut store, &cfg.model, &mut init_rng)?;
    let mut model = Model::frozen(cfg.model.clone(), backbone);
    model.freeze_backbone(&mut store);

    let variant = variant_from_id(&cfg.variant)?;
    let mut rng = RngState::with_stream(cfg.train.seed, streams::ADAPTER);
    samora_core::baselines::build_variant(
        &mut store,
        &mut model,
        &cfg.adapter,
        &cfg.task_names(),
        variant,
        &mut rng,
    )?;
    ckpt.apply(&mut store)?;
    Ok((store, model))
}
