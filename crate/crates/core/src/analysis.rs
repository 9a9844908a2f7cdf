//! Reports about the mechanism itself: parameter accounting with every
//! known delta itemized, routing FLOP comparison, routing and scaling
//! statistics over a trained model, and 2-D projections of expert features.

use serde::Serialize;

use crate::adapter::{GateMode, Router, SamoraLayer};
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::data::TaskData;
use crate::linalg::sym_eig;
use crate::model::Model;
use crate::train::sample_sequence;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct DeltaItem {
    pub label: String,
    pub amount: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerParams {
    pub name: String,
    pub formula: usize,
    pub actual: usize,
    pub deltas: Vec<DeltaItem>,
}

/// Closed-form versus enumerated trainable-parameter counts. `actual_total`
/// is counted off the store; the formula follows the per-layer closed form
/// (d_in + N + N·d_out)·r + d_g with the task table K·d_g counted once, and
/// every discrepancy is listed in `deltas`, never folded in.
#[derive(Clone, Debug, Serialize)]
pub struct ComplexityReport {
    pub layers: Vec<LayerParams>,
    pub global_formula: usize,
    pub formula_total: usize,
    pub actual_total: usize,
    pub deltas_total: usize,
    pub routing: Option<RoutingFlops>,
}

fn trainable_len(store: &ParamStore, id: crate::autodiff::ParamId) -> usize {
    let p = store.get(id);
    if p.trainable {
        p.value.len()
    } else {
        0
    }
}

fn layer_params(store: &ParamStore, layer: &SamoraLayer) -> LayerParams {
    let n = layer.cfg.n_experts;
    let r = layer.cfg.rank;
    let (d_in, d_out) = (layer.d_in, layer.d_out);

    let mut formula = (d_in + n * d_out) * r;
    match &layer.router {
        Router::Semantic { .. } => formula += n * r,
        Router::Mlp { bias, .. } => {
            formula += n * d_in;
            if bias.is_some() {
                formula += n;
            }
        }
    }
    let gate_on = store.get(layer.w_gate).trainable;
    if gate_on {
        formula += layer.cfg.d_g;
    }

    let mut actual = trainable_len(store, layer.a) + trainable_len(store, layer.w_gate);
    for b in &layer.b {
        actual += trainable_len(store, *b);
    }
    match &layer.router {
        Router::Semantic { keys } => {
            for k in keys {
                actual += trainable_len(store, *k);
            }
        }
        Router::Mlp { w_r, bias } => {
            actual += trainable_len(store, *w_r);
            if let Some(b) = bias {
                actual += trainable_len(store, *b);
            }
        }
    }
    let mut deltas = Vec::new();
    let s_len = trainable_len(store, layer.s);
    if s_len > 0 {
        actual += s_len;
        deltas.push(DeltaItem {
            label: "S diagonal".into(),
            amount: s_len,
        });
    }
    let bg = trainable_len(store, layer.b_gate);
    if bg > 0 {
        actual += bg;
        deltas.push(DeltaItem {
            label: "b_gate".into(),
            amount: bg,
        });
    }
    LayerParams {
        name: layer.name.clone(),
        formula,
        actual,
        deltas,
    }
}

pub fn complexity_report(store: &ParamStore, model: &Model) -> ComplexityReport {
    let mut layers = Vec::new();
    for layer in model.routed_layers() {
        layers.push(layer_params(store, layer));
    }
    for lora in model.lora_layers() {
        let shape = store.value(lora.w).shape().to_vec();
        let formula = (shape[0] + shape[1]) * lora.rank;
        let actual = trainable_len(store, lora.a) + trainable_len(store, lora.b);
        layers.push(LayerParams {
            name: lora.name.clone(),
            formula,
            actual,
            deltas: Vec::new(),
        });
    }

    let global_formula = match &model.tasks {
        Some(t) => trainable_len(store, t.e),
        None => 0,
    };
    let formula_total = layers.iter().map(|l| l.formula).sum::<usize>() + global_formula;
    let actual_total = layers.iter().map(|l| l.actual).sum::<usize>() + global_formula;
    let deltas_total = layers
        .iter()
        .flat_map(|l| &l.deltas)
        .map(|d| d.amount)
        .sum();
    let routing = model.routed_layers().first().map(|l| {
        routing_flops(
            l.cfg.n_experts,
            l.cfg.rank,
            l.d_in,
            matches!(&l.router, Router::Mlp { bias: Some(_), .. }),
        )
    });
    ComplexityReport {
        layers,
        global_formula,
        formula_total,
        actual_total,
        deltas_total,
        routing,
    }
}

/// Per-token routing cost at 2 FLOPs per multiply-add. The cores are the N
/// dot products each router computes (length r versus length d_in); their
/// ratio is exactly r/d_in and is the documented comparison. Normalization
/// and softmax costs are constant overhead, reported separately and never
/// folded into the ratio.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RoutingFlops {
    pub n_experts: usize,
    pub rank: usize,
    pub d_in: usize,
    /// 2·N·r: the cosine numerators.
    pub semantic_core: usize,
    /// One h-norm (2r+1), per-key norm and combine (2r+3 each), softmax (4N-1).
    pub semantic_overhead: usize,
    /// 2·N·d_in: the gate matvec.
    pub mlp_core: usize,
    /// Optional bias adds plus softmax (4N-1).
    pub mlp_overhead: usize,
    /// semantic_core / mlp_core == r / d_in, exact.
    pub ratio: f64,
}

pub fn routing_flops(n_experts: usize, rank: usize, d_in: usize, mlp_bias: bool) -> RoutingFlops {
    let semantic_core = 2 * n_experts * rank;
    let mlp_core = 2 * n_experts * d_in;
    let softmax = 4 * n_experts - 1;
    let semantic_overhead = (2 * rank + 1) + n_experts * (2 * rank + 3) + softmax;
    let mlp_overhead = if mlp_bias { n_experts } else { 0 } + softmax;
    RoutingFlops {
        n_experts,
        rank,
        d_in,
        semantic_core,
        semantic_overhead,
        mlp_core,
        mlp_overhead,
        ratio: semantic_core as f64 / mlp_core as f64,
    }
}

fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskRouting {
    pub task: String,
    /// Mean routing vector over every val token at the profiled layer.
    pub mean: Vec<f64>,
    pub entropy: f64,
    pub tokens: usize,
}

/// Expert usage per task, measured at the final routed layer. Experts at
/// different layers are different parameter sets, so averaging weight i
/// across layers would mix unrelated experts; the last gate layer is also
/// where specialization is strongest, sitting downstream of every other
/// adapted projection.
#[derive(Clone, Debug, Serialize)]
pub struct RoutingProfile {
    /// Name of the layer the profile is taken at.
    pub layer: String,
    pub per_task: Vec<TaskRouting>,
    /// Share of tokens whose argmax routing weight lands on each expert,
    /// pooled over all tasks.
    pub activation_share: Vec<f64>,
    pub usage_entropy: f64,
    pub n_experts: usize,
}

pub fn routing_profile(store: &ParamStore, model: &Model, tasks: &[TaskData]) -> Result<RoutingProfile> {
    let layers = model.routed_layers();
    let n = layers
        .first()
        .map(|l| l.cfg.n_experts)
        .ok_or_else(|| Error::Usage("routing profile needs routed adapter layers".into()))?;
    let profiled = layers.len() - 1;

    let mut per_task = Vec::with_capacity(tasks.len());
    let mut argmax_counts = vec![0usize; n];
    let mut pooled_tokens = 0usize;
    for task in tasks {
        let mut sum = vec![0.0; n];
        let mut count = 0usize;
        for sample in &task.val {
            let (tokens, _) = sample_sequence(sample);
            let task_arg = match &model.tasks {
                Some(t) if sample.task_id < t.task_count() => Some(sample.task_id),
                _ => None,
            };
            let mut g = Graph::eval();
            let fwd = model.forward(&mut g, store, &tokens, task_arg)?;
            let gated: Vec<NodeId> = fwd.layers.iter().filter_map(|r| r.gates).collect();
            let Some(&gates) = gated.get(profiled) else { continue };
            let gv = g.value(gates);
            let t_len = gv.ncols();
            for t in 0..t_len {
                let mut best = 0usize;
                for i in 0..n {
                    let w = gv.at2(i, t);
                    sum[i] += w;
                    if w > gv.at2(best, t) {
                        best = i;
                    }
                }
                argmax_counts[best] += 1;
                count += 1;
            }
        }
        let mean: Vec<f64> = if count == 0 {
            vec![1.0 / n as f64; n]
        } else {
            sum.iter().map(|s| s / count as f64).collect()
        };
        per_task.push(TaskRouting {
            task: task.spec.name.clone(),
            entropy: entropy(&mean),
            mean,
            tokens: count,
        });
        pooled_tokens += count;
    }

    let activation_share: Vec<f64> = if pooled_tokens == 0 {
        vec![0.0; n]
    } else {
        argmax_counts
            .iter()
            .map(|&c| c as f64 / pooled_tokens as f64)
            .collect()
    };
    Ok(RoutingProfile {
        layer: layers[profiled].name.clone(),
        usage_entropy: entropy(&activation_share),
        per_task,
        activation_share,
        n_experts: n,
    })
}

/// Largest distance between two tasks' mean routing vectors, as total
/// variation (half the L1 difference).
pub fn max_pairwise_tv(profile: &RoutingProfile) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in profile.per_task.iter().enumerate() {
        for b in &profile.per_task[i + 1..] {
            let tv = a
                .mean
                .iter()
                .zip(&b.mean)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / 2.0;
            best = best.max(tv);
        }
    }
    best
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub layer: String,
    pub task: String,
    pub g_task: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingProfile {
    pub rows: Vec<ScalingRow>,
    pub s_diags: Vec<(String, Vec<f64>)>,
    /// True when no layer separates any two tasks by more than 1e-3.
    pub inert: bool,
}

pub fn scaling_report(store: &ParamStore, model: &Model) -> Result<ScalingProfile> {
    let table = model
        .tasks
        .as_ref()
        .ok_or_else(|| Error::Usage("scaling report needs a task embedding table".into()))?;
    let mut rows = Vec::new();
    let mut s_diags = Vec::new();
    let mut inert = true;
    for layer in model.routed_layers() {
        let mut gates = Vec::with_capacity(table.task_count());
        for (id, name) in table.names().iter().enumerate() {
            let g_task = match model.gate_mode {
                GateMode::Learned => layer.task_gate_value(store, table, Some(id))?,
                GateMode::ForcedOne => 1.0,
                GateMode::ForcedOff => 0.0,
            };
            gates.push(g_task);
            rows.push(ScalingRow {
                layer: layer.name.clone(),
                task: name.clone(),
                g_task,
            });
        }
        let spread = gates.iter().cloned().fold(f64::MIN, f64::max)
            - gates.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-3 {
            inert = false;
        }
        s_diags.push((layer.name.clone(), store.value(layer.s).as_slice().to_vec()));
    }
    Ok(ScalingProfile {
        rows,
        s_diags,
        inert,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PcaProjection {
    pub points: Vec<[f64; 2]>,
    /// Fractions of total variance, descending; zeros when degenerate.
    pub explained: [f64; 2],
    pub degenerate: bool,
    /// Cloud mean and the two unit axes, so extra points can be mapped
    /// through the same projection.
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
}

impl PcaProjection {
    pub fn map(&self, p: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = p.iter().zip(&self.mean).map(|(x, mu)| x - mu).collect();
        [
            c.iter().zip(&self.axes[0]).map(|(x, a)| x * a).sum(),
            c.iter().zip(&self.axes[1]).map(|(x, a)| x * a).sum(),
        ]
    }
}

/// Centers the cloud and projects onto the top two eigenvectors of its
/// covariance. A zero-variance cloud maps to the origin with a flag instead
/// of an error.
pub fn pca_project(points: &[Vec<f64>]) -> Result<PcaProjection> {
    let m = points.len();
    if m < 2 {
        return Err(Error::Usage(format!("pca needs at least 2 points, got {m}")));
    }
    let dim = points[0].len();
    if dim < 2 {
        return Err(Error::Usage(format!("pca needs dimension >= 2, got {dim}")));
    }
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Usage("pca points must share one dimension".into()));
    }

    let mut mean = vec![0.0; dim];
    for p in points {
        for (m_i, x) in mean.iter_mut().zip(p) {
            *m_i += x;
        }
    }
    for m_i in &mut mean {
        *m_i /= m as f64;
    }

    let mut cov = vec![0.0; dim * dim];
    for p in points {
        let c: Vec<f64> = p.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += c[i] * c[j];
            }
        }
    }
    for v in &mut cov {
        *v /= m as f64;
    }

    let cov_t = crate::autodiff::Tensor::matrix(dim, dim, cov)?;
    let (eigvals, eigvecs) = sym_eig(&cov_t)?;
    let total: f64 = eigvals.iter().map(|&l| l.max(0.0)).sum();
    if total <= 1e-24 {
        return Ok(PcaProjection {
            points: vec![[0.0, 0.0]; m],
            explained: [0.0, 0.0],
            degenerate: true,
            mean,
            axes: [vec![0.0; dim], vec![0.0; dim]],
        });
    }

    let axis = |k: usize| -> Vec<f64> { (0..dim).map(|i| eigvecs.at2(i, k)).collect() };
    let out = PcaProjection {
        points: Vec::with_capacity(m),
        explained: [eigvals[0].max(0.0) / total, eigvals[1].max(0.0) / total],
        degenerate: false,
        mean,
        axes: [axis(0), axis(1)],
    };
    let points = points.iter().map(|p| out.map(p)).collect();
    Ok(PcaProjection { points, ..out })
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterPoint {
    pub expert: usize,
    pub x: f64,
    pub y: f64,
}

/// Per-expert clusters of routed token representations: each val token's h
/// vector is labeled by its argmax expert and the whole cloud is projected
/// jointly. The expert centroids (row means of each B_i, which live in the
/// same R^r) are mapped through the identical projection and overlaid, one
/// per (layer, expert).
#[derive(Clone, Debug, Serialize)]
pub struct ExpertClusters {
    pub points: Vec<ClusterPoint>,
    /// One per (layer, expert), layer-major.
    pub centroids: Vec<ClusterPoint>,
    pub explained: [f64; 2],
    pub degenerate: bool,
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
}

pub fn expert_clusters(store: &ParamStore, model: &Model, tasks: &[TaskData]) -> Result<ExpertClusters> {
    let layers = model.routed_layers();
    let first = layers
        .first()
        .ok_or_else(|| Error::Usage("expert clusters need routed adapter layers".into()))?;
    let n = first.cfg.n_experts;

    let mut hs: Vec<Vec<f64>> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    for task in tasks {
        for sample in &task.val {
            let (tokens, _) = sample_sequence(sample);
            let task_arg = match &model.tasks {
                Some(t) if sample.task_id < t.task_count() => Some(sample.task_id),
                _ => None,
            };
            let mut g = Graph::eval();
            let fwd = model.forward(&mut g, store, &tokens, task_arg)?;
            for rec in &fwd.layers {
                let Some(gates) = rec.gates else { continue };
                let Some(h) = rec.h else { continue };
                let gv = g.value(gates).clone();
                let hv = g.value(h);
                for t in 0..gv.ncols() {
                    let mut best = 0usize;
                    for i in 1..n {
                        if gv.at2(i, t) > gv.at2(best, t) {
                            best = i;
                        }
                    }
                    hs.push(hv.col(t));
                    owners.push(best);
                }
            }
        }
    }
    if hs.len() < 2 {
        return Err(Error::Data("not enough tokens for expert clusters".into()));
    }

    let proj = pca_project(&hs)?;
    let points = proj
        .points
        .iter()
        .zip(&owners)
        .map(|(p, &o)| ClusterPoint {
            expert: o,
            x: p[0],
            y: p[1],
        })
        .collect();
    let mut centroids = Vec::with_capacity(layers.len() * n);
    for layer in &layers {
        for i in 0..layer.n_experts() {
            let c = layer.expert_centroid(store, i)?;
            let xy = proj.map(&c);
            centroids.push(ClusterPoint {
                expert: i,
                x: xy[0],
                y: xy[1],
            });
        }
    }
    Ok(ExpertClusters {
        points,
        centroids,
        explained: proj.explained,
        degenerate: proj.degenerate,
        mean: proj.mean,
        axes: proj.axes,
    })
}

pub fn complexity_csv(report: &ComplexityReport) -> String {
    let mut out = String::from("layer,formula,actual,delta_s,delta_b_gate\n");
    for l in &report.layers {
        let find = |label: &str| {
            l.deltas
                .iter()
                .find(|d| d.label.starts_with(label))
                .map(|d| d.amount)
                .unwrap_or(0)
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            l.name,
            l.formula,
            l.actual,
            find("S"),
            find("b_gate")
        ));
    }
    out.push_str(&format!(
        "total,{},{},{},\n",
        report.formula_total, report.actual_total, report.deltas_total
    ));
    out
}

pub fn routing_csv(profile: &RoutingProfile) -> String {
    let mut out = String::from("task,expert,mean_weight,task_entropy,activation_share\n");
    for t in &profile.per_task {
        for (i, w) in t.mean.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t.task, i, w, t.entropy, profile.activation_share[i]
            ));
        }
    }
    out
}

pub fn scaling_csv(profile: &ScalingProfile) -> String {
    let mut out = String::from("layer,task,g_task\n");
    for r in &profile.rows {
        out.push_str(&format!("{},{},{}\n", r.layer, r.task, r.g_task));
    }
    out
}

pub fn clusters_csv(clusters: &ExpertClusters) -> String {
    let mut out = String::from("kind,expert,x,y\n");
    for p in &clusters.points {
        out.push_str(&format!("point,{},{},{}\n", p.expert, p.x, p.y));
    }
    for c in &clusters.centroids {
        out.push_str(&format!("centroid,{},{},{}\n", c.expert, c.x, c.y));
    }
    out
}

/// Everything the run's analysis produced, as one structured document.
#[derive(Clone, Debug, Serialize)]
pub struct AnalysisBundle {
    pub complexity: ComplexityReport,
    pub routing: Option<RoutingProfile>,
    pub scaling: Option<ScalingProfile>,
    pub clusters: Option<ExpertClusters>,
}

impl AnalysisBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("analysis bundle serializes")
    }
}
