//! Ablation variants: which router, whether scaling adapts, which
//! regularizers stay on, plus the plain low-rank baseline. Each variant is
//! the full model with exactly one mechanism swapped out.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, GateMode, RouterInit, TaskEmbeddingTable};
use crate::autodiff::{ParamStore, Tensor};
use crate::model::Model;
use crate::objectives::RegularizerToggles;
use crate::rng::RngState;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterChoice {
    Semantic,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingChoice {
    Adaptive,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    pub router: RouterChoice,
    pub scaling: ScalingChoice,
    pub use_orth: bool,
    pub use_match: bool,
}

impl AblationSwitches {
    pub fn full() -> Self {
        AblationSwitches {
            router: RouterChoice::Semantic,
            scaling: ScalingChoice::Adaptive,
            use_orth: true,
            use_match: true,
        }
    }

    pub fn toggles(&self) -> RegularizerToggles {
        RegularizerToggles {
            orth: self.use_orth,
            matching: self.use_match,
            ..RegularizerToggles::default()
        }
    }
}

pub const VARIANT_IDS: [&str; 6] = ["samora", "wo_router", "wo_scaling", "wo_orth", "wo_match", "lora"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Routed(AblationSwitches),
    /// Single-pair baseline at double rank, roughly parameter-matched.
    PlainLora,
}

pub fn variant_from_id(id: &str) -> Result<Variant> {
    let v = match id {
        "samora" => Variant::Routed(AblationSwitches::full()),
        "wo_router" => Variant::Routed(AblationSwitches {
            router: RouterChoice::Mlp,
            ..AblationSwitches::full()
        }),
        "wo_scaling" => Variant::Routed(AblationSwitches {
            scaling: ScalingChoice::Fixed,
            ..AblationSwitches::full()
        }),
        "wo_orth" => Variant::Routed(AblationSwitches {
            use_orth: false,
            ..AblationSwitches::full()
        }),
        "wo_match" => Variant::Routed(AblationSwitches {
            use_match: false,
            ..AblationSwitches::full()
        }),
        "lora" => Variant::PlainLora,
        other => {
            return Err(Error::Config(format!(
                "unknown variant '{other}', expected one of {VARIANT_IDS:?}"
            )))
        }
    };
    Ok(v)
}

impl Variant {
    pub fn id(&self) -> &'static str {
        match self {
            Variant::Routed(s) if *s == AblationSwitches::full() => "samora",
            Variant::Routed(s) if s.router == RouterChoice::Mlp => "wo_router",
            Variant::Routed(s) if s.scaling == ScalingChoice::Fixed => "wo_scaling",
            Variant::Routed(s) if !s.use_orth => "wo_orth",
            Variant::Routed(_) => "wo_match",
            Variant::PlainLora => "lora",
        }
    }

    pub fn toggles(&self) -> RegularizerToggles {
        match self {
            Variant::Routed(s) => s.toggles(),
            Variant::PlainLora => RegularizerToggles {
                orth: false,
                matching: false,
                ..RegularizerToggles::default()
            },
        }
    }
}

/// Attaches the variant's adapters to a frozen model. Fixed scaling pins
/// every S entry to 1.0 and the task gate to 1.0, with none of them
/// trainable. Returns the regularizer toggles the training loop should use.
pub fn build_variant(
    store: &mut ParamStore,
    model: &mut Model,
    acfg: &AdapterConfig,
    task_names: &[String],
    variant: Variant,
    rng: &mut RngState,
) -> Result<RegularizerToggles> {
    match variant {
        Variant::Routed(switches) => {
            let router = match switches.router {
                RouterChoice::Semantic => RouterInit::Semantic,
                RouterChoice::Mlp => RouterInit::Mlp { bias: false },
            };
            let table = TaskEmbeddingTable::init(store, task_names, acfg.d_g, rng)?;
            model.attach_routed_adapters(store, acfg, router, table, rng)?;
            if switches.scaling == ScalingChoice::Fixed {
                fix_scaling(store, model);
            }
            Ok(switches.toggles())
        }
        Variant::PlainLora => {
            let rank = 2 * acfg.rank;
            model.attach_lora(store, &acfg.target_layers, rank, rank as f64, rng)?;
            Ok(variant.toggles())
        }
    }
}

fn fix_scaling(store: &mut ParamStore, model: &mut Model) {
    for layer in model.routed_layers() {
        let s = store.get_mut(layer.s);
        s.value = Tensor::vector(vec![1.0; s.value.len()]);
        s.trainable = false;
        store.get_mut(layer.w_gate).trainable = false;
        store.get_mut(layer.b_gate).trainable = false;
    }
    if let Some(table) = &model.tasks {
        store.get_mut(table.e).trainable = false;
    }
    model.gate_mode = GateMode::ForcedOne;
}
