//! Training loop: backbone pretraining on the pooled task mixture, adapter
//! training against the combined objective, teacher-forced evaluation, and
//! the flat metrics stream both emit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore};
use crate::checkpoint::{Checkpoint, Dtype};
use crate::data::{pooled_train, Sample, TaskData};
use crate::linalg::singular_values;
use crate::model::{Model, ModelConfig};
use crate::objectives::{
    match_loss, orth_loss, task_loss, LossBreakdown, LossWeights, RegularizerToggles,
};
use crate::rng::{streams, RngState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub optimizer: OptimizerKind,
    /// Checkpoint payload dtype; compute is always f64.
    pub precision: Dtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            epochs: 3,
            batch_size: 16,
            seed: 0,
            weights: LossWeights::default(),
            optimizer: OptimizerKind::AdamW,
            precision: Dtype::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.weights.validate()
    }
}

/// Adaptive-moment optimizer with decoupled weight decay; β₁=0.9, β₂=0.95,
/// eps 1e-8, decay 0 by default. `Sgd` is the same struct with moments off.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn slot(&mut self, id: ParamId, len: usize) {
        let idx = id.0;
        while self.m.len() <= idx {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[idx].len() != len {
            self.m[idx] = vec![0.0; len];
            self.v[idx] = vec![0.0; len];
        }
    }

    /// One update over every trainable parameter from its accumulated
    /// gradient. Gradients are left in place; callers zero them.
    pub fn apply(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let len = store.get(id).value.len();
            self.slot(id, len);
            let p = store.get_mut(id);
            let grad = p.grad.as_slice().to_vec();
            let value = p.value.as_mut_slice();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in value.iter_mut().zip(&grad) {
                        *x -= self.lr * (g + self.weight_decay * *x);
                    }
                }
                OptimizerKind::AdamW => {
                    let m = &mut self.m[id.0];
                    let v = &mut self.v[id.0];
                    let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                    for i in 0..len {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        value[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * value[i]);
                    }
                }
            }
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn line(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Teacher-forced token layout: the model sees the input followed by all
/// target tokens but the last, and the loss reads each target at the column
/// that precedes it.
pub fn sample_sequence(sample: &Sample) -> (Vec<usize>, Vec<(usize, usize)>) {
    let l = sample.input.len();
    let m = sample.target.len();
    let mut tokens = sample.input.clone();
    tokens.extend_from_slice(&sample.target[..m - 1]);
    let pairs = (0..m).map(|j| (l - 1 + j, sample.target[j])).collect();
    (tokens, pairs)
}

fn task_arg(model: &Model, task_id: usize) -> Option<usize> {
    match &model.tasks {
        Some(table) if task_id < table.task_count() => Some(task_id),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub task: String,
    pub token_acc: f64,
    pub seq_acc: f64,
}

/// Teacher-forced greedy accuracy on each task's val split, token level and
/// whole-sequence level.
pub fn evaluate(store: &ParamStore, model: &Model, tasks: &[TaskData]) -> Result<Vec<EvalResult>> {
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut token_hits = 0usize;
        let mut token_total = 0usize;
        let mut seq_hits = 0usize;
        for sample in &task.val {
            let (tokens, pairs) = sample_sequence(sample);
            let mut g = Graph::eval();
            let fwd = model.forward(&mut g, store, &tokens, task_arg(model, sample.task_id))?;
            let logits = g.value(fwd.logits);
            let mut all = true;
            for &(col, want) in &pairs {
                let mut best = 0usize;
                for row in 1..model.cfg.vocab {
                    if logits.at2(row, col) > logits.at2(best, col) {
                        best = row;
                    }
                }
                token_total += 1;
                if best == want {
                    token_hits += 1;
                } else {
                    all = false;
                }
            }
            if all {
                seq_hits += 1;
            }
        }
        out.push(EvalResult {
            task: task.spec.name.clone(),
            token_acc: token_hits as f64 / token_total.max(1) as f64,
            seq_acc: seq_hits as f64 / task.val.len().max(1) as f64,
        });
    }
    Ok(out)
}

pub fn mean_token_acc(results: &[EvalResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| r.token_acc).sum::<f64>() / results.len() as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 3e-3,
            epochs: 2,
            batch_size: 32,
        }
    }
}

/// Trains a fresh backbone on the pooled task mixture, then freezes it and
/// verifies every attachable projection has a live spectrum.
pub fn pretrain_backbone(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    tasks: &[TaskData],
    pcfg: &PretrainConfig,
    seed: u64,
) -> Result<Model> {
    let mut init_rng = RngState::with_stream(seed, streams::BACKBONE);
    let backbone = crate::model::init_backbone(store, cfg, &mut init_rng)?;
    let model = Model::frozen(cfg.clone(), backbone);

    let pooled = pooled_train(tasks);
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let mut opt = Optimizer::new(OptimizerKind::AdamW, pcfg.lr);
    for _ in 0..pcfg.epochs {
        init_rng.shuffle(&mut order);
        for batch in order.chunks(pcfg.batch_size) {
            store.zero_grads();
            for &idx in batch {
                let (tokens, pairs) = sample_sequence(&pooled[idx]);
                let mut g = Graph::new();
                let fwd = model.forward(&mut g, store, &tokens, None)?;
                let loss = task_loss(&mut g, fwd.logits, &pairs)?;
                let scaled = g.scale_const(loss, 1.0 / batch.len() as f64)?;
                g.backward(scaled, store)?;
            }
            opt.apply(store);
        }
    }

    model.freeze_backbone(store);
    for (sigma1, name) in adapted_spectra(store, &model) {
        if !(sigma1 > 0.0) {
            return Err(Error::Degenerate {
                context: "pretrained projection spectrum",
                norm: sigma1,
            });
        }
        let _ = name;
    }
    Ok(model)
}

fn adapted_spectra(store: &ParamStore, model: &Model) -> Vec<(f64, String)> {
    let mut out = Vec::new();
    for (b, block) in model.backbone.blocks.iter().enumerate() {
        for (w, t) in [(block.wq, "q"), (block.wk, "k"), (block.wv, "v"), (block.wo, "o")] {
            let s = singular_values(store.value(w)).unwrap_or_default();
            out.push((s.first().copied().unwrap_or(0.0), format!("block{b}.{t}")));
        }
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricRecord>,
    pub steps: u64,
    pub final_eval: Vec<EvalResult>,
    pub last_breakdown: Option<LossBreakdown>,
}

/// Minimizes task loss plus the toggled regularizers over every trainable
/// parameter, logging a LossBreakdown per step and per-task accuracy per
/// epoch. A non-finite loss aborts with a pointer at the last epoch
/// checkpoint; checkpoints land in `ckpt_dir` when given.
pub fn train_adapters(
    store: &mut ParamStore,
    model: &Model,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    toggles: &RegularizerToggles,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = pooled_train(tasks);
    if train_set.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let layers = model.routed_layers();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = RngState::with_stream(cfg.seed, streams::TRAIN);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut metrics = Vec::new();
    let mut last_good: Option<PathBuf> = ckpt_dir
        .map(|d| d.join("last_good.ckpt"))
        .filter(|p| p.exists());
    let mut last_breakdown = None;

    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grads();
            let mut task_sum = 0.0;
            for &idx in batch {
                let sample = &train_set[idx];
                let (tokens, pairs) = sample_sequence(sample);
                let mut g = Graph::new();
                let fwd = model
                    .forward(&mut g, store, &tokens, task_arg(model, sample.task_id))
                    .map_err(|e| with_ckpt_ref(e, step, &last_good))?;
                let loss = task_loss(&mut g, fwd.logits, &pairs)?;
                let val = g.value(loss).item();
                if !val.is_finite() {
                    return Err(abort_nan(step, "task loss", &last_good));
                }
                task_sum += val;
                let scaled = g.scale_const(loss, 1.0 / batch.len() as f64)?;
                g.backward(scaled, store)
                    .map_err(|e| with_ckpt_ref(e, step, &last_good))?;
            }
            let task_val = task_sum / batch.len() as f64;

            let mut orth_val = 0.0;
            let mut match_val = 0.0;
            if !layers.is_empty() && (toggles.orth || toggles.matching) {
                let mut g = Graph::new();
                let mut reg: Option<crate::autodiff::NodeId> = None;
                if toggles.orth {
                    let o = orth_loss(&mut g, store, &layers)
                        .map_err(|e| with_ckpt_ref(e, step, &last_good))?;
                    orth_val = g.value(o).item();
                    let w = g.scale_const(o, cfg.weights.lambda_orth)?;
                    reg = Some(w);
                }
                if toggles.matching {
                    let m = match_loss(&mut g, store, &layers, toggles.detach_match)
                        .map_err(|e| with_ckpt_ref(e, step, &last_good))?;
                    match_val = g.value(m).item();
                    let w = g.scale_const(m, cfg.weights.lambda_match)?;
                    reg = Some(match reg {
                        Some(r) => g.add(r, w)?,
                        None => w,
                    });
                }
                if let Some(r) = reg {
                    if !g.value(r).item().is_finite() {
                        return Err(abort_nan(step, "regularizer", &last_good));
                    }
                    g.backward(r, store)
                        .map_err(|e| with_ckpt_ref(e, step, &last_good))?;
                }
            }

            let total = task_val
                + cfg.weights.lambda_orth * orth_val
                + cfg.weights.lambda_match * match_val;
            if !total.is_finite() {
                return Err(abort_nan(step, "total loss", &last_good));
            }
            opt.apply(store);

            let bd = LossBreakdown {
                task: task_val,
                orth: orth_val,
                matching: match_val,
                total,
            };
            push_breakdown(&mut metrics, step, &bd);
            last_breakdown = Some(bd);
            step += 1;
        }

        let eval = evaluate(store, model, tasks)?;
        for r in &eval {
            metrics.push(MetricRecord {
                step,
                split: "val".into(),
                task: r.task.clone(),
                metric: "token_acc".into(),
                value: r.token_acc,
            });
            metrics.push(MetricRecord {
                step,
                split: "val".into(),
                task: r.task.clone(),
                metric: "seq_acc".into(),
                value: r.seq_acc,
            });
        }
        metrics.push(MetricRecord {
            step,
            split: "val".into(),
            task: "all".into(),
            metric: "token_acc".into(),
            value: mean_token_acc(&eval),
        });

        if let Some(dir) = ckpt_dir {
            let path = dir.join("last_good.ckpt");
            let snap = shuffle_rng.snapshot();
            let cfg_json = serde_json::to_value(cfg)
                .map_err(|e| Error::Checkpoint(format!("config snapshot failed: {e}")))?;
            Checkpoint::from_store(store, cfg_json, vec![snap], cfg.precision).write(&path)?;
            last_good = Some(path);
        }
        let _ = epoch;
    }

    let final_eval = evaluate(store, model, tasks)?;
    Ok(TrainOutcome {
        metrics,
        steps: step,
        final_eval,
        last_breakdown,
    })
}

fn push_breakdown(metrics: &mut Vec<MetricRecord>, step: u64, bd: &LossBreakdown) {
    for (metric, value) in [
        ("loss_task", bd.task),
        ("loss_orth", bd.orth),
        ("loss_match", bd.matching),
        ("loss_total", bd.total),
    ] {
        metrics.push(MetricRecord {
            step,
            split: "train".into(),
            task: "all".into(),
            metric: metric.into(),
            value,
        });
    }
}

fn ckpt_ref(last_good: &Option<PathBuf>) -> String {
    match last_good {
        Some(p) => format!("last good checkpoint: {}", p.display()),
        None => "no checkpoint written yet".to_string(),
    }
}

fn abort_nan(step: u64, component: &str, last_good: &Option<PathBuf>) -> Error {
    Error::NonFinite {
        context: format!("{component} at step {step}; {}", ckpt_ref(last_good)),
    }
}

/// Numeric failures inside the step get the recovery pointer attached;
/// everything else passes through untouched.
fn with_ckpt_ref(err: Error, step: u64, last_good: &Option<PathBuf>) -> Error {
    match err {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{context} at step {step}; {}", ckpt_ref(last_good)),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::baselines::{build_variant, variant_from_id};
    use crate::data::{gen_dataset, TaskKind, TaskSpec};

    fn tiny_tasks(n_train: usize, n_val: usize) -> Vec<TaskData> {
        let specs = [
            TaskSpec {
                name: "copy".into(),
                kind: TaskKind::Copy,
                vocab: 8,
                seq_len: 4,
                n_train,
                n_val,
                task_id: 0,
            },
            TaskSpec {
                name: "reverse".into(),
                kind: TaskKind::Reverse,
                vocab: 8,
                seq_len: 4,
                n_train,
                n_val,
                task_id: 1,
            },
        ];
        gen_dataset(&specs, &RngState::with_stream(77, streams::DATA)).unwrap()
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 8,
            d_model: 8,
            n_blocks: 1,
            max_seq: 8,
            ff_mult: 2,
        }
    }

    fn small_acfg() -> AdapterConfig {
        AdapterConfig {
            n_experts: 2,
            rank: 2,
            d_g: 4,
            ..AdapterConfig::default()
        }
    }

    fn trained_setup(seed: u64) -> (ParamStore, Model, Vec<TaskData>) {
        let tasks = tiny_tasks(24, 8);
        let mut store = ParamStore::new();
        let mut model = pretrain_backbone(
            &mut store,
            &tiny_model_cfg(),
            &tasks,
            &PretrainConfig {
                epochs: 1,
                ..PretrainConfig::default()
            },
            seed,
        )
        .unwrap();
        let names: Vec<String> = tasks.iter().map(|t| t.spec.name.clone()).collect();
        let mut rng = RngState::with_stream(seed, streams::ADAPTER);
        build_variant(
            &mut store,
            &mut model,
            &small_acfg(),
            &names,
            variant_from_id("samora").unwrap(),
            &mut rng,
        )
        .unwrap();
        (store, model, tasks)
    }

    #[test]
    fn test_sample_sequence_layout() {
        let s = Sample {
            input: vec![5, 1, 2],
            target: vec![2, 1, 5],
            task_id: 0,
        };
        let (tokens, pairs) = sample_sequence(&s);
        assert_eq!(tokens, vec![5, 1, 2, 2, 1]);
        assert_eq!(pairs, vec![(2, 2), (3, 1), (4, 5)]);
    }

    #[test]
    fn test_pretrain_freezes_and_leaves_spectrum() {
        let tasks = tiny_tasks(16, 4);
        let mut store = ParamStore::new();
        let model = pretrain_backbone(
            &mut store,
            &tiny_model_cfg(),
            &tasks,
            &PretrainConfig {
                epochs: 1,
                ..PretrainConfig::default()
            },
            3,
        )
        .unwrap();
        for id in model.backbone.param_ids() {
            assert!(!store.get(id).trainable);
        }
        for (s1, name) in adapted_spectra(&store, &model) {
            assert!(s1 > 0.0, "{name} spectrum died");
        }
    }

    #[test]
    fn test_pretrain_is_deterministic() {
        let tasks = tiny_tasks(16, 4);
        let mut s1 = ParamStore::new();
        let m1 = pretrain_backbone(&mut s1, &tiny_model_cfg(), &tasks, &PretrainConfig::default(), 5).unwrap();
        let mut s2 = ParamStore::new();
        let m2 = pretrain_backbone(&mut s2, &tiny_model_cfg(), &tasks, &PretrainConfig::default(), 5).unwrap();
        assert_eq!(m1.backbone_checksum(&s1), m2.backbone_checksum(&s2));
        let mut s3 = ParamStore::new();
        let m3 = pretrain_backbone(&mut s3, &tiny_model_cfg(), &tasks, &PretrainConfig::default(), 6).unwrap();
        assert_ne!(m1.backbone_checksum(&s1), m3.backbone_checksum(&s3));
    }

    #[test]
    fn test_zero_lr_leaves_parameters_bit_identical() {
        let (mut store, model, tasks) = trained_setup(7);
        let before: Vec<(String, Vec<f64>)> = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).value.as_slice().to_vec()))
            .collect();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 8,
            seed: 7,
            ..TrainConfig::default()
        };
        train_adapters(&mut store, &model, &tasks, &cfg, &RegularizerToggles::default(), None).unwrap();
        for (name, old) in before {
            let id = store.lookup(&name).unwrap();
            assert_eq!(store.get(id).value.as_slice(), old.as_slice(), "{name} moved");
        }
    }

    #[test]
    fn test_training_is_deterministic_and_logs_breakdowns() {
        let run = || {
            let (mut store, model, tasks) = trained_setup(11);
            let cfg = TrainConfig {
                epochs: 1,
                batch_size: 8,
                seed: 11,
                ..TrainConfig::default()
            };
            let out = train_adapters(
                &mut store,
                &model,
                &tasks,
                &cfg,
                &RegularizerToggles::default(),
                None,
            )
            .unwrap();
            (out.metrics, model.backbone_checksum(&store))
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(m1, m2);
        assert_eq!(c1, c2);
        assert!(m1.iter().any(|r| r.metric == "loss_total"));
        assert!(m1.iter().any(|r| r.metric == "token_acc" && r.task == "copy"));
    }

    #[test]
    fn test_backbone_checksum_stable_through_adapter_training() {
        let (mut store, model, tasks) = trained_setup(13);
        let before = model.backbone_checksum(&store);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            seed: 13,
            lr: 0.05,
            ..TrainConfig::default()
        };
        train_adapters(&mut store, &model, &tasks, &cfg, &RegularizerToggles::default(), None).unwrap();
        assert_eq!(model.backbone_checksum(&store), before);
        let moved = model
            .routed_layers()
            .iter()
            .any(|l| store.get(l.a).grad.as_slice().iter().any(|&x| x != 0.0));
        assert!(moved);
    }

    #[test]
    fn test_single_step_descends_total_loss() {
        // Descent-direction check: for a small enough lr, one SGD step on
        // one sample lowers that sample's total loss.
        let (mut store, model, tasks) = trained_setup(17);
        let sample = tasks[0].train[0].clone();
        let toggles = RegularizerToggles::default();
        let weights = LossWeights::default();

        let loss_now = |store: &mut ParamStore| -> f64 {
            let (tokens, pairs) = sample_sequence(&sample);
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, store, &tokens, Some(0)).unwrap();
            let task = task_loss(&mut g, fwd.logits, &pairs).unwrap();
            let layers = model.routed_layers();
            let (_, bd) = crate::objectives::total_loss(&mut g, store, task, &layers, &weights, &toggles).unwrap();
            bd.total
        };

        let before = loss_now(&mut store);
        store.zero_grads();
        {
            let (tokens, pairs) = sample_sequence(&sample);
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &store, &tokens, Some(0)).unwrap();
            let task = task_loss(&mut g, fwd.logits, &pairs).unwrap();
            let layers = model.routed_layers();
            let (total, _) =
                crate::objectives::total_loss(&mut g, &store, task, &layers, &weights, &toggles).unwrap();
            g.backward(total, &mut store).unwrap();
        }
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-4);
        opt.apply(&mut store);
        let after = loss_now(&mut store);
        assert!(after < before, "no descent: {before} -> {after}");
    }

    #[test]
    fn test_nan_abort_names_component_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, model, tasks) = trained_setup(19);
        // First pass writes an epoch checkpoint.
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            seed: 19,
            ..TrainConfig::default()
        };
        train_adapters(
            &mut store,
            &model,
            &tasks,
            &cfg,
            &RegularizerToggles::default(),
            Some(dir.path()),
        )
        .unwrap();

        // A NaN parameter is the way a blown-up run actually presents.
        let layer = model.routed_layers()[0];
        if let crate::adapter::Router::Semantic { keys } = &layer.router {
            let p = store.get_mut(keys[0]);
            let mut data = p.value.as_slice().to_vec();
            data[0] = f64::NAN;
            p.value = crate::autodiff::Tensor::vector(data);
        }
        let err = train_adapters(
            &mut store,
            &model,
            &tasks,
            &cfg,
            &RegularizerToggles::default(),
            Some(dir.path()),
        )
        .unwrap_err();
        assert_eq!(err.class(), crate::ErrorClass::Numeric);
        let msg = err.to_string();
        assert!(msg.contains("last_good.ckpt"), "{msg}");
    }

    #[test]
    fn test_evaluate_is_order_invariant_and_forced_off_matches_frozen() {
        let (store, mut model, mut tasks) = trained_setup(23);
        model.gate_mode = crate::adapter::GateMode::ForcedOff;
        let gated = evaluate(&store, &model, &tasks).unwrap();

        // Same backbone with adapters never attached.
        let mut fstore = ParamStore::new();
        let fmodel = pretrain_backbone(
            &mut fstore,
            &tiny_model_cfg(),
            &tasks,
            &PretrainConfig {
                epochs: 1,
                ..PretrainConfig::default()
            },
            23,
        )
        .unwrap();
        let frozen = evaluate(&fstore, &fmodel, &tasks).unwrap();
        assert_eq!(gated, frozen);

        let mut rng = RngState::with_stream(99, streams::DATA);
        for t in &mut tasks {
            rng.shuffle(&mut t.val);
        }
        let shuffled = evaluate(&store, &model, &tasks).unwrap();
        for (a, b) in gated.iter().zip(&shuffled) {
            assert_eq!(a.token_acc, b.token_acc);
            assert_eq!(a.seq_acc, b.seq_acc);
        }
    }

    #[test]
    fn test_overfit_small_set_reaches_full_accuracy() {
        let specs = [TaskSpec {
            name: "copy".into(),
            kind: TaskKind::Copy,
            vocab: 8,
            seq_len: 4,
            n_train: 8,
            n_val: 8,
            task_id: 0,
        }];
        let mut tasks = gen_dataset(&specs, &RngState::with_stream(31, streams::DATA)).unwrap();
        // Memorization check: evaluate on the training samples themselves.
        tasks[0].val = tasks[0].train.clone();

        let mut store = ParamStore::new();
        let mut model = pretrain_backbone(
            &mut store,
            &tiny_model_cfg(),
            &tasks,
            &PretrainConfig {
                epochs: 150,
                batch_size: 8,
                lr: 0.01,
            },
            31,
        )
        .unwrap();
        let acfg = AdapterConfig {
            b_gate_init: 0.0,
            ..small_acfg()
        };
        let mut rng = RngState::with_stream(31, streams::ADAPTER);
        build_variant(
            &mut store,
            &mut model,
            &acfg,
            &["copy".to_string()],
            variant_from_id("samora").unwrap(),
            &mut rng,
        )
        .unwrap();
        let cfg = TrainConfig {
            lr: 0.03,
            epochs: 400,
            batch_size: 8,
            seed: 31,
            ..TrainConfig::default()
        };
        let out = train_adapters(&mut store, &model, &tasks, &cfg, &RegularizerToggles::default(), None).unwrap();
        assert_eq!(out.final_eval[0].token_acc, 1.0, "memorization failed");
    }

    #[test]
    fn test_large_orth_weight_drives_orth_term_down() {
        let (mut store, model, tasks) = trained_setup(37);
        // Push A off the orthonormal manifold so the term starts visibly high.
        let layer = model.routed_layers()[0];
        let a = store.get(layer.a).value.clone();
        let bumped: Vec<f64> = a.as_slice().iter().map(|x| 1.4 * x + 0.05).collect();
        store.get_mut(layer.a).value = crate::autodiff::Tensor::from_vec(a.shape(), bumped).unwrap();

        let start = {
            let mut g = Graph::eval();
            let layers = model.routed_layers();
            let o = orth_loss(&mut g, &store, &layers).unwrap();
            g.value(o).item()
        };
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 2,
            batch_size: 8,
            seed: 37,
            weights: LossWeights {
                lambda_orth: 1.0,
                lambda_match: 1e-2,
            },
            ..TrainConfig::default()
        };
        train_adapters(&mut store, &model, &tasks, &cfg, &RegularizerToggles::default(), None).unwrap();
        let end = {
            let mut g = Graph::eval();
            let layers = model.routed_layers();
            let o = orth_loss(&mut g, &store, &layers).unwrap();
            g.value(o).item()
        };
        assert!(end < 0.5 * start, "orth {start} -> {end}");
    }

    #[test]
    fn test_metric_lines_are_flat_json() {
        let r = MetricRecord {
            step: 3,
            split: "train".into(),
            task: "all".into(),
            metric: "loss_total".into(),
            value: 1.5,
        };
        let line = r.line();
        let parsed: serde_json::Value = serde_json::from_str(&line).unwrap();
        let obj = parsed.as_object().unwrap();
        assert_eq!(obj.len(), 5);
        assert_eq!(obj["step"], 3);
        assert_eq!(obj["metric"], "loss_total");
        assert!(obj.values().all(|v| !v.is_object() && !v.is_array()));
        let back: MetricRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }
}
