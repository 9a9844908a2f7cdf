//! Tiny frozen transformer backbone with swappable projection layers, so the
//! same forward pass runs the frozen model, the routed adapter, or plain
//! low-rank updates depending on what is attached to Q, K, V, O.

use serde::{Deserialize, Serialize};

use crate::adapter::{
    init_layer, init_lora_layer, AdapterConfig, GateMode, PlainLoraLayer, RouterInit, SamoraLayer,
    TaskEmbeddingTable, TARGET_NAMES,
};
use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::RngState;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub max_seq: usize,
    /// Feed-forward width as a multiple of d_model.
    pub ff_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 16,
            d_model: 32,
            n_blocks: 1,
            max_seq: 16,
            ff_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::Config(format!("vocab {} below minimum of 4", self.vocab)));
        }
        if self.d_model < 2 {
            return Err(Error::Config(format!("d_model {} below minimum of 2", self.d_model)));
        }
        if self.n_blocks < 1 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be at least 2".into()));
        }
        if self.ff_mult < 1 {
            return Err(Error::Config("ff_mult must be at least 1".into()));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.ff_mult * self.d_model
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug)]
pub struct TinyBackbone {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockWeights>,
    pub head: ParamId,
}

impl TinyBackbone {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed, self.pos];
        for b in &self.blocks {
            ids.extend([b.wq, b.wk, b.wv, b.wo, b.w1, b.w2]);
        }
        ids.push(self.head);
        ids
    }
}

pub fn init_backbone(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RngState) -> Result<TinyBackbone> {
    cfg.validate()?;
    let d = cfg.d_model;
    let d_ff = cfg.d_ff();
    let mat = |rng: &mut RngState, rows: usize, cols: usize, std: f64| -> Result<Tensor> {
        let data: Vec<f64> = rng.gaussian_vec(rows * cols).iter().map(|x| std * x).collect();
        Tensor::matrix(rows, cols, data)
    };
    let proj_std = 1.0 / (d as f64).sqrt();

    let embed = store.add("embed", mat(rng, cfg.vocab, d, 0.5)?, true)?;
    let pos = store.add("pos", mat(rng, cfg.max_seq, d, 0.5)?, true)?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let wq = store.add(&format!("block{b}.wq"), mat(rng, d, d, proj_std)?, true)?;
        let wk = store.add(&format!("block{b}.wk"), mat(rng, d, d, proj_std)?, true)?;
        let wv = store.add(&format!("block{b}.wv"), mat(rng, d, d, proj_std)?, true)?;
        let wo = store.add(&format!("block{b}.wo"), mat(rng, d, d, proj_std)?, true)?;
        let w1 = store.add(&format!("block{b}.w1"), mat(rng, d_ff, d, proj_std)?, true)?;
        let w2 = store.add(
            &format!("block{b}.w2"),
            mat(rng, d, d_ff, 1.0 / (d_ff as f64).sqrt())?,
            true,
        )?;
        blocks.push(BlockWeights {
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
        });
    }
    let head = store.add("head", mat(rng, cfg.vocab, d, proj_std)?, true)?;
    Ok(TinyBackbone {
        embed,
        pos,
        blocks,
        head,
    })
}

/// What sits on one attention projection.
#[derive(Clone, Debug)]
pub enum Projection {
    Frozen(ParamId),
    Adapted(Box<SamoraLayer>),
    Lora(PlainLoraLayer),
}

impl Projection {
    pub fn weight(&self) -> ParamId {
        match self {
            Projection::Frozen(w) => *w,
            Projection::Adapted(l) => l.w,
            Projection::Lora(l) => l.w,
        }
    }
}

struct ProjOut {
    y: NodeId,
    gates: Option<NodeId>,
    g_task: Option<NodeId>,
    h: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct AdaptedBlock {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
}

impl AdaptedBlock {
    pub fn get(&self, target: &str) -> &Projection {
        match target {
            "q" => &self.q,
            "k" => &self.k,
            "v" => &self.v,
            "o" => &self.o,
            _ => panic!("unknown projection target {target}"),
        }
    }

    fn get_mut(&mut self, target: &str) -> &mut Projection {
        match target {
            "q" => &mut self.q,
            "k" => &mut self.k,
            "v" => &mut self.v,
            "o" => &mut self.o,
            _ => panic!("unknown projection target {target}"),
        }
    }
}

/// Routing and gate nodes captured for one adapted projection during a
/// forward pass.
pub struct LayerRecord {
    pub name: String,
    pub gates: Option<NodeId>,
    pub g_task: Option<NodeId>,
    pub h: Option<NodeId>,
}

pub struct ModelForward {
    /// [V×T].
    pub logits: NodeId,
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: TinyBackbone,
    pub blocks: Vec<AdaptedBlock>,
    pub tasks: Option<TaskEmbeddingTable>,
    pub gate_mode: GateMode,
}

impl Model {
    /// All projections frozen; the state right after backbone pretraining.
    pub fn frozen(cfg: ModelConfig, backbone: TinyBackbone) -> Self {
        let blocks = backbone
            .blocks
            .iter()
            .map(|b| AdaptedBlock {
                q: Projection::Frozen(b.wq),
                k: Projection::Frozen(b.wk),
                v: Projection::Frozen(b.wv),
                o: Projection::Frozen(b.wo),
            })
            .collect();
        Model {
            cfg,
            backbone,
            blocks,
            tasks: None,
            gate_mode: GateMode::Learned,
        }
    }

    pub fn freeze_backbone(&self, store: &mut ParamStore) {
        for id in self.backbone.param_ids() {
            store.get_mut(id).trainable = false;
        }
    }

    /// FNV-1a over the little-endian bytes of every backbone tensor, in
    /// param-id order. Stable across adapter training iff the backbone is
    /// genuinely untouched.
    pub fn backbone_checksum(&self, store: &ParamStore) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for id in self.backbone.param_ids() {
            for byte in store.value(id).to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }

    pub fn attach_routed_adapters(
        &mut self,
        store: &mut ParamStore,
        acfg: &AdapterConfig,
        router: RouterInit,
        table: TaskEmbeddingTable,
        rng: &mut RngState,
    ) -> Result<()> {
        acfg.validate()?;
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for target in &acfg.target_layers {
                let slot = block.get_mut(target);
                let w = slot.weight();
                let layer = init_layer(
                    store,
                    &format!("block{b}.{target}"),
                    w,
                    acfg,
                    router.clone(),
                    rng,
                )?;
                *slot = Projection::Adapted(Box::new(layer));
            }
        }
        self.tasks = Some(table);
        Ok(())
    }

    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        targets: &[String],
        rank: usize,
        alpha: f64,
        rng: &mut RngState,
    ) -> Result<()> {
        for t in targets {
            if !TARGET_NAMES.contains(&t.as_str()) {
                return Err(Error::Config(format!(
                    "unknown target layer {t:?}, expected one of {TARGET_NAMES:?}"
                )));
            }
        }
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for target in targets {
                let slot = block.get_mut(target);
                let w = slot.weight();
                let layer = init_lora_layer(store, &format!("block{b}.{target}"), w, rank, alpha, rng)?;
                *slot = Projection::Lora(layer);
            }
        }
        Ok(())
    }

    pub fn routed_layers(&self) -> Vec<&SamoraLayer> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for target in TARGET_NAMES {
                if let Projection::Adapted(l) = block.get(target) {
                    out.push(l.as_ref());
                }
            }
        }
        out
    }

    pub fn lora_layers(&self) -> Vec<&PlainLoraLayer> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for target in TARGET_NAMES {
                if let Projection::Lora(l) = block.get(target) {
                    out.push(l);
                }
            }
        }
        out
    }

    fn apply_projection(
        &self,
        proj: &Projection,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        task: Option<usize>,
    ) -> Result<ProjOut> {
        match proj {
            Projection::Frozen(w) => {
                let wn = g.param(store, *w)?;
                let y = g.matmul(wn, x)?;
                Ok(ProjOut {
                    y,
                    gates: None,
                    g_task: None,
                    h: None,
                })
            }
            Projection::Lora(l) => Ok(ProjOut {
                y: l.forward(g, store, x)?,
                gates: None,
                g_task: None,
                h: None,
            }),
            Projection::Adapted(l) => {
                let table = self.tasks.as_ref().ok_or_else(|| {
                    Error::Usage("routed adapters need a task embedding table".into())
                })?;
                let out = l.forward(g, store, x, table, task, self.gate_mode)?;
                Ok(ProjOut {
                    y: out.y,
                    gates: out.gates,
                    g_task: out.g_task,
                    h: out.h,
                })
            }
        }
    }

    /// Teacher-forced forward over one token sequence. `task` picks the
    /// task embedding; None falls back to the mean embedding.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        task: Option<usize>,
    ) -> Result<ModelForward> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Data(format!(
                "token {bad} out of vocabulary (V={})",
                self.cfg.vocab
            )));
        }

        let t_len = tokens.len();
        let mut records = Vec::new();

        let embed_n = g.param(store, self.backbone.embed)?;
        let pos_n = g.param(store, self.backbone.pos)?;
        let tok_emb = g.embed_cols(embed_n, tokens)?;
        let pos_ids: Vec<usize> = (0..t_len).collect();
        let pos_emb = g.embed_cols(pos_n, &pos_ids)?;
        let mut x = g.add(tok_emb, pos_emb)?;

        let scale = 1.0 / (self.cfg.d_model as f64).sqrt();
        for (b, (bw, ab)) in self.backbone.blocks.iter().zip(&self.blocks).enumerate() {
            let xn = g.rms_norm_cols(x)?;
            let take = |g: &mut Graph, records: &mut Vec<LayerRecord>, name: &str, proj: &Projection, input: NodeId| -> Result<NodeId> {
                let out = self.apply_projection(proj, g, store, input, task)?;
                if out.gates.is_some() || out.g_task.is_some() {
                    records.push(LayerRecord {
                        name: name.to_string(),
                        gates: out.gates,
                        g_task: out.g_task,
                        h: out.h,
                    });
                }
                Ok(out.y)
            };
            let q = take(g, &mut records, &format!("block{b}.q"), &ab.q, xn)?;
            let k = take(g, &mut records, &format!("block{b}.k"), &ab.k, xn)?;
            let v = take(g, &mut records, &format!("block{b}.v"), &ab.v, xn)?;
            let qt = g.transpose(q)?;
            let scores = g.matmul(qt, k)?;
            let scaled = g.scale_const(scores, scale)?;
            let p = g.causal_softmax_rows(scaled)?;
            let pt = g.transpose(p)?;
            let att = g.matmul(v, pt)?;
            let o = take(g, &mut records, &format!("block{b}.o"), &ab.o, att)?;
            x = g.add(x, o)?;

            let xn2 = g.rms_norm_cols(x)?;
            let w1 = g.param(store, bw.w1)?;
            let h1 = g.matmul(w1, xn2)?;
            let th = g.tanh(h1)?;
            let w2 = g.param(store, bw.w2)?;
            let h2 = g.matmul(w2, th)?;
            x = g.add(x, h2)?;
        }

        let xf = g.rms_norm_cols(x)?;
        let head = g.param(store, self.backbone.head)?;
        let logits = g.matmul(head, xf)?;
        Ok(ModelForward {
            logits,
            layers: records,
        })
    }
}
