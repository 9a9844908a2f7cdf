//! The adapted projection layer: a frozen weight plus N low-rank experts
//! sharing one down-projection, with key-based routing, a diagonal scaling
//! vector initialized from the frozen weight's spectrum, and a per-task
//! sigmoid gate over the whole update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::linalg;
use crate::rng::RngState;
use crate::{Error, Result};

pub const TARGET_NAMES: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub n_experts: usize,
    pub rank: usize,
    pub tau: f64,
    pub d_g: usize,
    pub b_gate_init: f64,
    /// Projections that get adapters, subset of q/k/v/o.
    pub target_layers: Vec<String>,
    /// Route on S·A·X instead of A·X.
    pub route_on_scaled: bool,
    /// One routing decision per sequence (mean-pooled h) instead of per token.
    pub sequence_routing: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            n_experts: 3,
            rank: 8,
            tau: 0.8,
            d_g: 8,
            b_gate_init: -6.0,
            target_layers: TARGET_NAMES.iter().map(|s| s.to_string()).collect(),
            route_on_scaled: false,
            sequence_routing: false,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts < 1 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        if self.rank < 1 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.d_g < 1 {
            return Err(Error::Config("d_g must be at least 1".into()));
        }
        if self.target_layers.is_empty() {
            return Err(Error::Config("target_layers must not be empty".into()));
        }
        for t in &self.target_layers {
            if !TARGET_NAMES.contains(&t.as_str()) {
                return Err(Error::Config(format!(
                    "unknown target layer {t:?}, expected one of {TARGET_NAMES:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Learnable per-task embeddings, one table shared by the whole model.
#[derive(Clone)]
pub struct TaskEmbeddingTable {
    pub e: ParamId,
    names: Vec<String>,
}

impl TaskEmbeddingTable {
    pub fn init(
        store: &mut ParamStore,
        names: &[String],
        d_g: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("task embedding table needs at least one task".into()));
        }
        let k = names.len();
        let data = rng.gaussian_vec(k * d_g);
        let e = store.add("task_emb.E", Tensor::matrix(k, d_g, data)?, true)?;
        Ok(TaskEmbeddingTable {
            e,
            names: names.to_vec(),
        })
    }

    pub fn task_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Embedding node for a task; None gives the mean of all learned rows
    /// (the fallback for inputs from unregistered tasks).
    pub fn embedding_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        task: Option<usize>,
    ) -> Result<NodeId> {
        let en = g.param(store, self.e)?;
        match task {
            Some(id) => {
                if id >= self.names.len() {
                    return Err(Error::Data(format!(
                        "task id {id} not registered ({} tasks)",
                        self.names.len()
                    )));
                }
                g.row_extract(en, id)
            }
            None => g.mean_rows(en),
        }
    }

    pub fn embedding_value(&self, store: &ParamStore, task: Option<usize>) -> Result<Vec<f64>> {
        let e = &store.get(self.e).value;
        match task {
            Some(id) => {
                if id >= self.names.len() {
                    return Err(Error::Data(format!(
                        "task id {id} not registered ({} tasks)",
                        self.names.len()
                    )));
                }
                Ok(e.row(id).to_vec())
            }
            None => {
                let (k, d) = (e.nrows(), e.ncols());
                let mut mean = vec![0.0; d];
                for i in 0..k {
                    for j in 0..d {
                        mean[j] += e.at2(i, j);
                    }
                }
                for m in &mut mean {
                    *m /= k as f64;
                }
                Ok(mean)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterInit {
    Semantic,
    Mlp { bias: bool },
}

#[derive(Clone, Debug)]
pub enum Router {
    /// Trainable anchor vectors in R^r, matched against h by cosine.
    Semantic { keys: Vec<ParamId> },
    /// Linear gate over the raw layer input.
    Mlp { w_r: ParamId, bias: Option<ParamId> },
}

/// How the task gate enters the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// σ(W_gate·e_task + b_gate) from the embedding table.
    Learned,
    /// Adapter branch off entirely; output is the frozen path.
    ForcedOff,
    /// Update added unscaled (fixed-scaling ablation).
    ForcedOne,
}

#[derive(Clone, Debug)]
pub struct SamoraLayer {
    pub name: String,
    pub w: ParamId,
    pub a: ParamId,
    pub s: ParamId,
    pub b: Vec<ParamId>,
    pub router: Router,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub cfg: AdapterConfig,
}

pub struct LayerForward {
    pub y: NodeId,
    /// Per-token routing weights [N×T]; None when the gate is forced off.
    pub gates: Option<NodeId>,
    pub g_task: Option<NodeId>,
    /// The low-rank token representation routing sees, [r×T].
    pub h: Option<NodeId>,
}

/// Routing weights for one token representation against the expert keys.
/// A zero-norm h falls back to the uniform distribution and bumps the
/// degeneracy counter; zero-norm keys contribute similarity 0.
pub fn route(h: &[f64], keys: &[Vec<f64>], tau: f64, degenerate: &mut u64) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::Config("routing needs at least one key".into()));
    }
    let n = keys.len();
    let hn = ops::norm(h);
    if hn < 1e-12 {
        *degenerate += 1;
        return Ok(vec![1.0 / n as f64; n]);
    }
    let mut sims = Vec::with_capacity(n);
    for k in keys {
        if k.len() != h.len() {
            return Err(Error::ShapeMismatch {
                op: "route",
                lhs: vec![h.len()],
                rhs: vec![k.len()],
            });
        }
        let kn = ops::norm(k);
        sims.push(if kn < 1e-12 { 0.0 } else { ops::dot(h, k) / (hn * kn) });
    }
    Ok(ops::softmax_temp_slice(&sims, tau))
}

pub fn init_layer(
    store: &mut ParamStore,
    prefix: &str,
    w: ParamId,
    cfg: &AdapterConfig,
    router: RouterInit,
    rng: &mut RngState,
) -> Result<SamoraLayer> {
    cfg.validate()?;
    let wt = store.get(w).value.clone();
    let (d_out, d_in) = (wt.nrows(), wt.ncols());
    let r = cfg.rank;
    if r > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "rank {r} exceeds min dimension of a {d_out}x{d_in} weight"
        )));
    }
    let n = cfg.n_experts;

    // S carries the top-r spectrum of the frozen weight.
    let s_vals = linalg::svd_topr(&wt, r)?.s;
    let s = store.add(&format!("{prefix}.S"), Tensor::vector(s_vals), true)?;

    // A with orthonormal rows: QR of a Gaussian draw, transposed.
    let qa = linalg::random_semi_orthogonal(d_in, r, rng)?;
    let mut a_data = vec![0.0; r * d_in];
    for i in 0..d_in {
        for j in 0..r {
            a_data[j * d_in + i] = qa.at2(i, j);
        }
    }
    let a = store.add(&format!("{prefix}.A"), Tensor::matrix(r, d_in, a_data)?, true)?;

    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let bi = linalg::random_semi_orthogonal(d_out, r, rng)?;
        b.push(store.add(&format!("{prefix}.B{i}"), bi, true)?);
    }

    let router = match router {
        RouterInit::Semantic => {
            let mut keys = Vec::with_capacity(n);
            for i in 0..n {
                let mut k = rng.gaussian_vec(r);
                let kn = ops::norm(&k);
                if kn < 1e-12 {
                    return Err(Error::Degenerate {
                        context: "key initialization",
                        norm: kn,
                    });
                }
                for x in &mut k {
                    *x /= kn;
                }
                keys.push(store.add(&format!("{prefix}.key{i}"), Tensor::vector(k), true)?);
            }
            Router::Semantic { keys }
        }
        RouterInit::Mlp { bias } => {
            let data: Vec<f64> = rng.gaussian_vec(n * d_in).iter().map(|x| 0.02 * x).collect();
            let w_r = store.add(&format!("{prefix}.router_w"), Tensor::matrix(n, d_in, data)?, true)?;
            let bias = if bias {
                Some(store.add(&format!("{prefix}.router_b"), Tensor::matrix(n, 1, vec![0.0; n])?, true)?)
            } else {
                None
            };
            Router::Mlp { w_r, bias }
        }
    };

    let wg: Vec<f64> = rng.gaussian_vec(cfg.d_g).iter().map(|x| 0.02 * x).collect();
    let w_gate = store.add(&format!("{prefix}.gate_w"), Tensor::vector(wg), true)?;
    let b_gate = store.add(&format!("{prefix}.gate_b"), Tensor::scalar(cfg.b_gate_init), true)?;

    Ok(SamoraLayer {
        name: prefix.to_string(),
        w,
        a,
        s,
        b,
        router,
        w_gate,
        b_gate,
        d_in,
        d_out,
        cfg: cfg.clone(),
    })
}

impl SamoraLayer {
    pub fn n_experts(&self) -> usize {
        self.b.len()
    }

    /// σ(W_gate·e_task + b_gate) as a graph node.
    pub fn task_gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        table: &TaskEmbeddingTable,
        task: Option<usize>,
    ) -> Result<NodeId> {
        let e = table.embedding_node(g, store, task)?;
        let wg = g.param(store, self.w_gate)?;
        let z = g.dot(wg, e)?;
        let bg = g.param(store, self.b_gate)?;
        let z = g.add(z, bg)?;
        g.sigmoid(z)
    }

    /// Eager gate evaluation for reports.
    pub fn task_gate_value(
        &self,
        store: &ParamStore,
        table: &TaskEmbeddingTable,
        task: Option<usize>,
    ) -> Result<f64> {
        let e = table.embedding_value(store, task)?;
        let wg = &store.get(self.w_gate).value;
        let z = ops::dot(wg.as_slice(), &e) + store.get(self.b_gate).value.item();
        Ok(ops::sigmoid(z))
    }

    /// Row mean of B_i, the expert's functional centroid in R^r.
    pub fn expert_centroid(&self, store: &ParamStore, i: usize) -> Result<Vec<f64>> {
        if i >= self.b.len() {
            return Err(Error::Usage(format!(
                "expert index {i} out of {} experts",
                self.b.len()
            )));
        }
        let bi = &store.get(self.b[i]).value;
        let (rows, r) = (bi.nrows(), bi.ncols());
        let mut c = vec![0.0; r];
        for row in 0..rows {
            for j in 0..r {
                c[j] += bi.at2(row, j);
            }
        }
        for x in &mut c {
            *x /= rows as f64;
        }
        Ok(c)
    }

    /// Differentiable centroid for the non-detached regularizer variant.
    pub fn expert_centroid_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
    ) -> Result<NodeId> {
        if i >= self.b.len() {
            return Err(Error::Usage(format!(
                "expert index {i} out of {} experts",
                self.b.len()
            )));
        }
        let bn = g.param(store, self.b[i])?;
        g.mean_rows(bn)
    }

    /// Routing weights [N×T] for the layer input `x`, on the graph.
    fn routing_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        route_src: NodeId,
    ) -> Result<NodeId> {
        let t_len = g.value(x).ncols();
        match &self.router {
            Router::Semantic { keys } => {
                let key_nodes: Vec<NodeId> = keys
                    .iter()
                    .map(|k| g.param(store, *k))
                    .collect::<Result<_>>()?;
                let keys_mat = g.stack_rows(&key_nodes)?;
                if self.cfg.sequence_routing {
                    let src_t = g.transpose(route_src)?;
                    let hbar = g.mean_rows(src_t)?;
                    let hrow = g.stack_rows(&[hbar])?;
                    let hcol = g.transpose(hrow)?;
                    let sims = g.cos_sim_cols(hcol, keys_mat)?;
                    let gates = g.softmax_cols(sims, self.cfg.tau)?;
                    let ones = g.constant(Tensor::matrix(1, t_len, vec![1.0; t_len])?)?;
                    g.matmul(gates, ones)
                } else {
                    let sims = g.cos_sim_cols(route_src, keys_mat)?;
                    g.softmax_cols(sims, self.cfg.tau)
                }
            }
            Router::Mlp { w_r, bias } => {
                let wr = g.param(store, *w_r)?;
                let mut logits = g.matmul(wr, x)?;
                if let Some(b) = bias {
                    let bn = g.param(store, *b)?;
                    let ones = g.constant(Tensor::matrix(1, t_len, vec![1.0; t_len])?)?;
                    let bb = g.matmul(bn, ones)?;
                    logits = g.add(logits, bb)?;
                }
                g.softmax_cols(logits, 1.0)
            }
        }
    }

    /// Y = W·X + g_task · Σ_i g_i ⊙ B_i·(S·A·X), with routing weights from
    /// A·X (or S·A·X behind the config switch). ForcedOff skips the adapter
    /// branch entirely, reproducing the frozen path bit for bit.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        table: &TaskEmbeddingTable,
        task: Option<usize>,
        mode: GateMode,
    ) -> Result<LayerForward> {
        let wn = g.param(store, self.w)?;
        let wx = g.matmul(wn, x)?;
        if mode == GateMode::ForcedOff {
            return Ok(LayerForward {
                y: wx,
                gates: None,
                g_task: None,
                h: None,
            });
        }

        let an = g.param(store, self.a)?;
        let u0 = g.matmul(an, x)?;
        let sn = g.param(store, self.s)?;
        let us = g.row_scale(u0, sn)?;
        let route_src = if self.cfg.route_on_scaled { us } else { u0 };
        let gates = self.routing_nodes(g, store, x, route_src)?;

        let mut delta: Option<NodeId> = None;
        for (i, bi) in self.b.iter().enumerate() {
            let bn = g.param(store, *bi)?;
            let yi = g.matmul(bn, us)?;
            let gi = g.row_extract(gates, i)?;
            let wi = g.col_scale(yi, gi)?;
            delta = Some(match delta {
                Some(acc) => g.add(acc, wi)?,
                None => wi,
            });
        }
        let delta = delta.unwrap();

        match mode {
            GateMode::ForcedOff => unreachable!(),
            GateMode::ForcedOne => Ok(LayerForward {
                y: g.add(wx, delta)?,
                gates: Some(gates),
                g_task: None,
                h: Some(route_src),
            }),
            GateMode::Learned => {
                let gt = self.task_gate(g, store, table, task)?;
                let scaled = g.mul_scalar(delta, gt)?;
                Ok(LayerForward {
                    y: g.add(wx, scaled)?,
                    gates: Some(gates),
                    g_task: Some(gt),
                    h: Some(route_src),
                })
            }
        }
    }
}

/// Single-pair low-rank update Y = WX + (α/r)·B·A·X with no routing, no
/// scaling, no task gate. B starts at zero so the initial update vanishes.
#[derive(Clone, Debug)]
pub struct PlainLoraLayer {
    pub name: String,
    pub w: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

pub fn init_lora_layer(
    store: &mut ParamStore,
    prefix: &str,
    w: ParamId,
    rank: usize,
    alpha: f64,
    rng: &mut RngState,
) -> Result<PlainLoraLayer> {
    let shape = store.value(w).shape().to_vec();
    let (d_out, d_in) = (shape[0], shape[1]);
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "lora rank {rank} invalid for a {d_out}x{d_in} projection"
        )));
    }
    let std = 1.0 / (d_in as f64).sqrt();
    let a_data: Vec<f64> = rng.gaussian_vec(rank * d_in).iter().map(|x| std * x).collect();
    let a = store.add(&format!("{prefix}.lora_A"), Tensor::matrix(rank, d_in, a_data)?, true)?;
    let b = store.add(&format!("{prefix}.lora_B"), Tensor::zeros(&[d_out, rank]), true)?;
    Ok(PlainLoraLayer {
        name: prefix.to_string(),
        w,
        a,
        b,
        rank,
        alpha,
    })
}

impl PlainLoraLayer {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let wn = g.param(store, self.w)?;
        let wx = g.matmul(wn, x)?;
        let an = g.param(store, self.a)?;
        let bn = g.param(store, self.b)?;
        let ax = g.matmul(an, x)?;
        let bax = g.matmul(bn, ax)?;
        let scaled = g.scale_const(bax, self.alpha / self.rank as f64)?;
        g.add(wx, scaled)
    }
}
