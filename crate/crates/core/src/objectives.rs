//! Training objective: autoregressive task loss plus the orthogonality and
//! semantic-match regularizers, combined with configurable weights.

use serde::{Deserialize, Serialize};

use crate::adapter::{Router, SamoraLayer};
use crate::autodiff::{ops, Graph, NodeId, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_orth: f64,
    pub lambda_match: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_orth: 1e-3,
            lambda_match: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_orth < 0.0 || self.lambda_match < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got orth={} match={}",
                self.lambda_orth, self.lambda_match
            )));
        }
        Ok(())
    }
}

/// Which auxiliary terms enter the total, and whether the match target is
/// detached (no gradient into the expert matrices).
#[derive(Clone, Copy, Debug)]
pub struct RegularizerToggles {
    pub orth: bool,
    pub matching: bool,
    pub detach_match: bool,
}

impl Default for RegularizerToggles {
    fn default() -> Self {
        RegularizerToggles {
            orth: true,
            matching: true,
            detach_match: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub orth: f64,
    pub matching: f64,
    pub total: f64,
}

/// Mean negative log-likelihood of the target tokens; `targets` pairs the
/// logit column predicting each token with that token's id.
pub fn task_loss(g: &mut Graph, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId> {
    g.ce_mean_cols(logits, targets.to_vec())
}

/// Σ over layers of ‖A·Aᵀ − I‖_F² + Σ_i ‖B_iᵀ·B_i − I‖_F².
pub fn orth_loss(g: &mut Graph, store: &ParamStore, layers: &[&SamoraLayer]) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for layer in layers {
        let r = layer.cfg.rank;
        let eye = g.constant(Tensor::identity(r))?;
        let an = g.param(store, layer.a)?;
        let at = g.transpose(an)?;
        let aat = g.matmul(an, at)?;
        let da = g.sub(aat, eye)?;
        let mut acc = g.sum_squares(da)?;
        for bi in &layer.b {
            let bn = g.param(store, *bi)?;
            let bt = g.transpose(bn)?;
            let btb = g.matmul(bt, bn)?;
            let db = g.sub(btb, eye)?;
            let sq = g.sum_squares(db)?;
            acc = g.add(acc, sq)?;
        }
        total = Some(match total {
            Some(t) => g.add(t, acc)?,
            None => acc,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.constant(Tensor::scalar(0.0)),
    }
}

/// Per layer, the mean over experts of KL(softmax(b_i) ‖ softmax(k_i)) with
/// b_i the row centroid of B_i, summed over layers. With `detach` the
/// centroid side is a fixed target and no gradient reaches B_i. Layers
/// without keys (MLP-routed) contribute nothing.
pub fn match_loss(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[&SamoraLayer],
    detach: bool,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for layer in layers {
        let keys = match &layer.router {
            Router::Semantic { keys } => keys,
            Router::Mlp { .. } => continue,
        };
        let n = keys.len();
        let mut acc: Option<NodeId> = None;
        for (i, key) in keys.iter().enumerate() {
            let p = if detach {
                let centroid = layer.expert_centroid(store, i)?;
                g.constant(Tensor::vector(ops::softmax_temp_slice(&centroid, 1.0)))?
            } else {
                let c = layer.expert_centroid_node(g, store, i)?;
                g.softmax_vec(c, 1.0)?
            };
            let kn = g.param(store, *key)?;
            let q = g.softmax_vec(kn, 1.0)?;
            let kl = g.kl_div(p, q)?;
            acc = Some(match acc {
                Some(a) => g.add(a, kl)?,
                None => kl,
            });
        }
        if let Some(a) = acc {
            let scaled = g.scale_const(a, 1.0 / n as f64)?;
            total = Some(match total {
                Some(t) => g.add(t, scaled)?,
                None => scaled,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => g.constant(Tensor::scalar(0.0)),
    }
}

/// total = task + λ_orth·orth + λ_match·match over the toggled-on terms.
/// Returns the scalar node to backpropagate and the component values.
pub fn total_loss(
    g: &mut Graph,
    store: &ParamStore,
    task: NodeId,
    layers: &[&SamoraLayer],
    weights: &LossWeights,
    toggles: &RegularizerToggles,
) -> Result<(NodeId, LossBreakdown)> {
    weights.validate()?;
    let task_val = g.value(task).item();
    if !task_val.is_finite() {
        return Err(Error::NonFinite {
            context: "task loss".into(),
        });
    }

    let mut total = task;
    let mut orth_val = 0.0;
    let mut match_val = 0.0;

    if toggles.orth {
        let o = orth_loss(g, store, layers)?;
        orth_val = g.value(o).item();
        if !orth_val.is_finite() {
            return Err(Error::NonFinite {
                context: "orthogonality regularizer".into(),
            });
        }
        let w = g.scale_const(o, weights.lambda_orth)?;
        total = g.add(total, w)?;
    }
    if toggles.matching {
        let m = match_loss(g, store, layers, toggles.detach_match)?;
        match_val = g.value(m).item();
        if !match_val.is_finite() {
            return Err(Error::NonFinite {
                context: "semantic match regularizer".into(),
            });
        }
        let w = g.scale_const(m, weights.lambda_match)?;
        total = g.add(total, w)?;
    }

    let breakdown = LossBreakdown {
        task: task_val,
        orth: orth_val,
        matching: match_val,
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}
