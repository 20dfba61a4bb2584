use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::MimModel;
use crate::error::{bail, Result};
use crate::nn::{init_tensor, Init, LoraAdapter};
use crate::numerics::{Graph, Real};

/// Standard deviation of the `A` factor at attach time.
pub const LORA_A_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Linear layer names to adapt; `None` selects every query, key and
    /// value projection.
    pub targets: Option<Vec<String>>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 16, alpha: 32.0, targets: None }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter bookkeeping kept on the model while adapters are attached.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LoraState {
    pub config: LoraConfig,
    /// Trainable flags of the pre-existing parameters, restored on merge.
    pub prev_trainable: Vec<bool>,
}

/// Query/key/value projection of a self- or cross-attention layer.
pub fn is_qkv_projection(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or("");
    (name.contains(".attn.") || name.contains(".cross.")) && matches!(leaf, "q" | "k" | "v")
}

/// Adds `(alpha/r) B A` to every target weight and freezes everything else.
/// `A` starts Gaussian and `B` at zero, so outputs are initially unchanged.
pub fn attach_lora<T: Real>(model: &mut MimModel<T>, cfg: &LoraConfig, rng: &mut impl Rng) -> Result<()> {
    if model.has_lora() {
        bail!(Domain, "LoRA adapters are already attached");
    }
    if model.is_quantized() {
        bail!(Domain, "cannot attach LoRA to a quantized model");
    }
    if cfg.rank == 0 || !(cfg.alpha.is_finite()) {
        bail!(Config, "LoRA rank must be at least 1 and alpha finite");
    }
    let (store, linears) = model.store_and_linears_mut();
    if let Some(names) = &cfg.targets {
        if names.is_empty() {
            bail!(Config, "empty LoRA target list");
        }
        for n in names {
            if !linears.iter().any(|l| &l.name == n) {
                bail!(Config, "LoRA target {n} does not exist");
            }
        }
    }
    let selected = |name: &str| match &cfg.targets {
        Some(names) => names.iter().any(|n| n == name),
        None => is_qkv_projection(name),
    };
    let prev_trainable: Vec<bool> = store.iter().map(|(_, p)| p.trainable).collect();
    store.freeze_all();
    for lin in linears {
        if !selected(&lin.name) {
            continue;
        }
        let a = store.add(format!("{}.lora_a", lin.name), init_tensor(&[cfg.rank, lin.d_in], Init::Normal(LORA_A_STD), rng), true)?;
        let b = store.add(format!("{}.lora_b", lin.name), init_tensor(&[lin.d_out, cfg.rank], Init::Zeros, rng), true)?;
        lin.lora = Some(LoraAdapter { a, b, rank: cfg.rank, alpha: cfg.alpha });
    }
    model.lora = Some(LoraState { config: cfg.clone(), prev_trainable });
    Ok(())
}

/// Folds every adapter into its base weight and removes the adapters.
/// A model without adapters is left unchanged.
pub fn merge_lora<T: Real>(model: &mut MimModel<T>) -> Result<()> {
    let Some(state) = model.lora.take() else { return Ok(()) };
    let (store, linears) = model.store_and_linears_mut();
    for lin in linears {
        if lin.lora.is_none() {
            continue;
        }
        let mut g = Graph::no_grad();
        let w = lin.weight_var(&mut g, store)?;
        *store.tensor_mut(lin.weight) = g.value(w).clone();
        lin.lora = None;
    }
    store.remove_where(|p| p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b"));
    for (id, flag) in store.ids().zip(state.prev_trainable).collect::<Vec<_>>() {
        store.set_trainable(id, flag);
    }
    Ok(())
}
