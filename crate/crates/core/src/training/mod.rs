//! Masked-token training, optimisation, LoRA adapters and checkpoints.
//!
//! A training step draws a masking rate per item from the cosine schedule,
//! replaces the chosen tokens with MASK, and minimises cross-entropy on the
//! masked positions only. The loss is normalised by the number of masked
//! tokens across the whole effective batch, so gradient accumulation over
//! several micro-batches reproduces the full-batch update.

mod adam;
mod checkpoint;
mod lora;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use adam::{accumulate, Adam, AdamConfig, GradMap};
pub use checkpoint::{Checkpoint, NamedTensor, RngState, FORMAT_VERSION, MAGIC};
pub(crate) use lora::LoraState;
pub use lora::{attach_lora, is_qkv_projection, merge_lora, LoraConfig, LORA_A_STD};

use crate::backbone::{MimModel, ModelConfig};
use crate::conditioning::{drop_condition, CaptionVocabulary, Conditioning};
use crate::error::{bail, Result};
use crate::numerics::{Graph, Real, Tensor};
use crate::schedule::{make_train_mask, sample_train_fraction};
use crate::tooling::Sample;
use crate::vq::{TokenGrid, VqConfig, VqModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Probability of replacing a caption with NULL.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, batch_size: 4, accum_steps: 1, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, cond_dropout: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accum_steps == 0 {
            bail!(Config, "batch size and accumulation steps must be at least 1");
        }
        if !(self.lr > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            bail!(Config, "condition dropout must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Target tokens of one image with its conditioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: TokenGrid,
    pub cond: Conditioning,
}

/// Tokenizes samples with a frozen autoencoder.
pub fn encode_dataset(vq: &VqModel<f32>, samples: &[Sample]) -> Result<Vec<TrainExample>> {
    samples
        .iter()
        .map(|s| Ok(TrainExample { tokens: vq.tokenize(&s.image)?, cond: Conditioning::new(s.caption.clone(), s.micro) }))
        .collect()
}

/// Mean over masked rows of `-log softmax(logits)[target]`; 0 when nothing
/// is masked.
pub fn masked_ce_loss<T: Real>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let count = mask.iter().filter(|&&m| m).count();
    let mut g = Graph::no_grad();
    let l = g.constant(logits.clone());
    let loss = g.masked_ce(l, targets, mask, count.max(1) as f64)?;
    Ok(g.value(loss).data()[0].as_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Argmax accuracy on masked positions.
    pub accuracy: f64,
    pub masked: usize,
}

/// Model, optimizer and rng of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real = f32> {
    pub model: MimModel<T>,
    pub config: TrainConfig,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: MimModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { model, config, adam: Adam::new(config.adam()), rng: ChaCha8Rng::seed_from_u64(config.seed), step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step on items drawn uniformly from `data`.
    pub fn step(&mut self, data: &[TrainExample]) -> Result<StepMetrics> {
        if data.is_empty() {
            bail!(Domain, "empty training set");
        }
        let picks: Vec<usize> = (0..self.config.effective_batch()).map(|_| self.rng.gen_range(0..data.len())).collect();
        let batch: Vec<TrainExample> = picks.into_iter().map(|i| data[i].clone()).collect();
        self.step_on(&batch)
    }

    /// One optimizer step on exactly `batch_size * accum_steps` items, split
    /// into `accum_steps` micro-batches in order.
    pub fn step_on(&mut self, batch: &[TrainExample]) -> Result<StepMetrics> {
        let cfg = self.config;
        if batch.len() != cfg.effective_batch() {
            bail!(Dimension, "expected {} examples per step, got {}", cfg.effective_batch(), batch.len());
        }
        let n = self.model.config.tokens();
        let v = self.model.config.vocab_size;
        let mut masks = Vec::with_capacity(batch.len());
        let mut conds = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.tokens.len() != n {
                bail!(Dimension, "example has {} tokens, model expects {n}", ex.tokens.len());
            }
            let fraction = sample_train_fraction(&mut self.rng);
            masks.push(make_train_mask(n, fraction, &mut self.rng)?);
            conds.push(drop_condition(&ex.cond, cfg.cond_dropout, &mut self.rng));
        }
        let total_masked: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
        let mut grads = GradMap::new();
        let (mut loss, mut correct) = (0.0, 0usize);
        for chunk in (0..batch.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
            let mut tokens = Vec::with_capacity(chunk.len() * n);
            let mut targets = Vec::with_capacity(chunk.len() * n);
            let mut mask = Vec::with_capacity(chunk.len() * n);
            for &b in chunk {
                for (i, &t) in batch[b].tokens.ids.iter().enumerate() {
                    let m = masks[b][i];
                    tokens.push(if m { v } else { t });
                    targets.push(t);
                    mask.push(m);
                }
            }
            let chunk_conds: Vec<Conditioning> = chunk.iter().map(|&b| conds[b].clone()).collect();
            let mut g = Graph::new();
            let logits = self.model.forward(&mut g, &tokens, &chunk_conds)?;
            let l = g.masked_ce(logits, &targets, &mask, total_masked.max(1) as f64)?;
            let lv = g.value(l).data()[0].as_f64();
            if !lv.is_finite() {
                bail!(Divergence, "loss became {lv} at step {}", self.step);
            }
            loss += lv;
            let lt = g.value(logits);
            for r in (0..mask.len()).filter(|&r| mask[r]) {
                let row = lt.row(r);
                let best = (0..v).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += (best == targets[r]) as usize;
            }
            accumulate(&mut grads, &g.backward(l)?);
        }
        self.adam.apply(&mut self.model.store, &grads)?;
        self.step += 1;
        Ok(StepMetrics { step: self.step, loss, accuracy: correct as f64 / total_masked.max(1) as f64, masked: total_masked })
    }

    /// Runs `steps` optimizer steps, stopping at the first error.
    pub fn train(&mut self, data: &[TrainExample], steps: usize, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.step(data)?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }
}

/// Deterministic evaluation masks at evenly spaced masking rates.
pub fn eval_masks(tokens: usize, count: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let fraction = (i as f64 + 0.5) / count as f64;
            let k = ((fraction * tokens as f64).round() as usize).clamp(1, tokens);
            let mut mask = vec![false; tokens];
            for p in index::sample(&mut rng, tokens, k).iter() {
                mask[p] = true;
            }
            Ok(mask)
        })
        .collect()
}

/// Mean masked cross-entropy of `model` on `example` over `masks`.
pub fn evaluate_masked_ce<T: Real>(model: &MimModel<T>, example: &TrainExample, masks: &[Vec<bool>]) -> Result<f64> {
    let v = model.config.vocab_size;
    let mut total = 0.0;
    for mask in masks {
        let tokens: Vec<usize> = example.tokens.ids.iter().zip(mask).map(|(&t, &m)| if m { v } else { t }).collect();
        let logits = model.logits(&tokens, std::slice::from_ref(&example.cond))?;
        total += masked_ce_loss(&logits, &example.tokens.ids, mask)?;
    }
    Ok(total / masks.len().max(1) as f64)
}

fn model_tensors(model: &MimModel<f32>) -> Vec<NamedTensor> {
    model
        .store
        .iter()
        .map(|(_, p)| NamedTensor { name: p.name.clone(), tensor: p.tensor.clone(), trainable: p.trainable })
        .collect()
}

/// Checkpoint of a token predictor, including adapters and int8 layers.
pub fn mim_checkpoint(model: &MimModel<f32>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("mim", serde_json::to_value(model.config)?);
    ck.vocabulary = Some(model.vocab.to_map());
    ck.extra = json!({ "lora": model.lora_config() });
    ck.tensors = model_tensors(model);
    ck.quantized = model.linears().filter_map(|l| l.quant.as_ref().map(|q| (l.name.clone(), (**q).clone()))).collect();
    Ok(ck)
}

/// Rebuilds a token predictor from a `mim` or `trainer` checkpoint.
pub fn load_mim(ck: &Checkpoint) -> Result<MimModel<f32>> {
    ck.expect_kind(&["mim", "trainer"])?;
    let config: ModelConfig = serde_json::from_value(ck.config.get("model").cloned().unwrap_or_else(|| ck.config.clone()))?;
    let Some(vmap) = &ck.vocabulary else { bail!(Format, "checkpoint has no caption vocabulary") };
    let vocab = CaptionVocabulary::from_map(vmap)?;
    let mut model = MimModel::build(config, vocab, 0)?;
    let lora: Option<LoraConfig> = serde_json::from_value(ck.extra.get("lora").cloned().unwrap_or(serde_json::Value::Null))?;
    if let Some(l) = &lora {
        attach_lora(&mut model, l, &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    let quantized: std::collections::BTreeMap<&str, &crate::quantize::QuantizedLinear> =
        ck.quantized.iter().map(|(n, q)| (n.as_str(), q)).collect();
    let (store, linears) = model.store_and_linears_mut();
    for lin in linears {
        if let Some(q) = quantized.get(lin.name.as_str()) {
            if (q.rows(), q.cols()) != (lin.d_out, lin.d_in) {
                bail!(Format, "quantized {} has shape {}x{}", lin.name, q.rows(), q.cols());
            }
            *store.tensor_mut(lin.weight) = Tensor::zeros(&[0, lin.d_in]);
            lin.quant = Some(std::sync::Arc::new((*q).clone()));
        }
    }
    if quantized.len() != model.linears().filter(|l| l.quant.is_some()).count() {
        bail!(Format, "checkpoint quantizes layers the model does not have");
    }
    fill_store(&mut model.store, ck, "adam.")?;
    Ok(model)
}

fn fill_store(store: &mut crate::numerics::ParamStore<f32>, ck: &Checkpoint, skip_prefix: &str) -> Result<()> {
    let mut seen = 0;
    for t in &ck.tensors {
        if t.name.starts_with(skip_prefix) {
            continue;
        }
        let Some(id) = store.id(&t.name) else { bail!(Format, "checkpoint tensor {} has no matching parameter", t.name) };
        if store.tensor(id).shape() != t.tensor.shape() {
            bail!(Format, "shape mismatch for {}: {:?} vs {:?}", t.name, t.tensor.shape(), store.tensor(id).shape());
        }
        *store.tensor_mut(id) = t.tensor.clone();
        store.set_trainable(id, t.trainable);
        seen += 1;
    }
    if seen != store.len() {
        bail!(Format, "checkpoint provides {seen} of {} parameters", store.len());
    }
    Ok(())
}

pub fn vq_checkpoint(vq: &VqModel<f32>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("vq", serde_json::to_value(vq.config)?);
    ck.tensors = vq
        .store
        .iter()
        .map(|(_, p)| NamedTensor { name: p.name.clone(), tensor: p.tensor.clone(), trainable: p.trainable })
        .collect();
    Ok(ck)
}

pub fn load_vq(ck: &Checkpoint) -> Result<VqModel<f32>> {
    ck.expect_kind(&["vq"])?;
    let config: VqConfig = serde_json::from_value(ck.config.clone())?;
    let mut vq = VqModel::build(config, 0)?;
    fill_store(&mut vq.store, ck, "\u{0}")?;
    Ok(vq)
}

impl Trainer<f32> {
    /// Full training state: model, optimizer moments, rng and step.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = mim_checkpoint(&self.model)?;
        ck.kind = "trainer".into();
        ck.config = json!({ "model": self.model.config, "train": self.config });
        ck.rng = Some(RngState::capture(&self.rng));
        ck.step = self.step;
        ck.extra["adam_steps"] = json!(self.adam.steps_taken());
        for (name, tensor) in self.adam.state_tensors(&self.model.store) {
            ck.tensors.push(NamedTensor { name, tensor, trainable: false });
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(&["trainer"])?;
        let model = load_mim(ck)?;
        let config: TrainConfig = serde_json::from_value(ck.config.get("train").cloned().unwrap_or_default())?;
        let Some(rng) = &ck.rng else { bail!(Format, "trainer checkpoint without rng state") };
        let adam_steps = ck.extra.get("adam_steps").and_then(|v| v.as_u64()).unwrap_or(0);
        let state: Vec<(String, Tensor<f32>)> =
            ck.tensors.iter().filter(|t| t.name.starts_with("adam.")).map(|t| (t.name.clone(), t.tensor.clone())).collect();
        let adam = Adam::from_state(config.adam(), adam_steps, &model.store, &state)?;
        Ok(Trainer { model, config, adam, rng: rng.restore()?, step: ck.step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{CaptionConfig, MicroConditioning};
    use crate::numerics::ParamId;

    fn vocab() -> CaptionVocabulary {
        CaptionVocabulary::new(&["red", "blue", "circle", "square"]).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            grid: 4,
            dim: 16,
            heads: 2,
            depth: 1,
            conv_blocks: 1,
            downsample: false,
            mlp_ratio: 2,
            caption: CaptionConfig { dim: 8, max_len: 4, micro_dim: 4 },
        }
    }

    fn examples() -> Vec<TrainExample> {
        (0..4)
            .map(|k| TrainExample {
                tokens: TokenGrid::new(4, 4, (0..16).map(|i| (i * (k + 1) + k) % 12).collect()).unwrap(),
                cond: Conditioning::new(vec![2 + k % 2, 4 + k / 2], MicroConditioning::full(32, 32 + k as u32, 0.5)),
            })
            .collect()
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        for v in [8usize, 8192] {
            let logits = Tensor::<f64>::zeros(&[3, v]);
            let loss = masked_ce_loss(&logits, &[0, 5, 7], &[false, true, false]).unwrap();
            assert!((loss - (v as f64).ln()).abs() < 1e-6);
        }
        assert!((8192f64.ln() - 13.0 * 2f64.ln()).abs() < 1e-12);
        let logits = Tensor::<f64>::from_f64(&[1, 3], &[0.0, 100.0, 0.0]).unwrap();
        assert!(masked_ce_loss(&logits, &[1], &[true]).unwrap() < 1e-30);
        assert_eq!(masked_ce_loss(&Tensor::<f64>::zeros(&[2, 4]), &[0, 0], &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn frozen_parameters_stay_bitwise_constant() {
        let mut model = MimModel::<f32>::build(tiny(), vocab(), 0).unwrap();
        model.store.freeze_prefix("caption.");
        let frozen: Vec<(ParamId, Tensor<f32>)> =
            model.store.iter().filter(|(_, p)| !p.trainable).map(|(id, p)| (id, p.tensor.clone())).collect();
        let mut tr = Trainer::new(model, TrainConfig { batch_size: 2, ..TrainConfig::default() }).unwrap();
        tr.train(&examples(), 5, |_| {}).unwrap();
        for (id, t) in frozen {
            assert_eq!(tr.model.store.tensor(id), &t);
        }
    }

    #[test]
    fn accumulation_matches_full_batch() {
        let model = MimModel::<f64>::build(tiny(), vocab(), 1).unwrap();
        let data = examples();
        let full = TrainConfig { batch_size: 4, accum_steps: 1, ..TrainConfig::default() };
        let accum = TrainConfig { batch_size: 1, accum_steps: 4, ..TrainConfig::default() };
        let mut a = Trainer::new(model.clone(), full).unwrap();
        let mut b = Trainer::new(model, accum).unwrap();
        let ma = a.step_on(&data).unwrap();
        let mb = b.step_on(&data).unwrap();
        assert!((ma.loss - mb.loss).abs() < 1e-10);
        for ((_, pa), (_, pb)) in a.model.store.iter().zip(b.model.store.iter()) {
            assert!(pa.tensor.max_abs_diff(&pb.tensor) < 1e-5, "{}", pa.name);
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let model = MimModel::<f32>::build(tiny(), vocab(), 2).unwrap();
        let data = examples();
        let mut tr = Trainer::new(model, TrainConfig { batch_size: 4, cond_dropout: 0.0, ..TrainConfig::default() }).unwrap();
        let masks = eval_masks(16, 4, 0).unwrap();
        let before: f64 = data.iter().map(|e| evaluate_masked_ce(&tr.model, e, &masks).unwrap()).sum();
        for _ in 0..50 {
            tr.step_on(&data).unwrap();
        }
        let after: f64 = data.iter().map(|e| evaluate_masked_ce(&tr.model, e, &masks).unwrap()).sum();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn bad_configs_and_batches() {
        let model = MimModel::<f32>::build(tiny(), vocab(), 0).unwrap();
        assert!(Trainer::new(model.clone(), TrainConfig { lr: 0.0, ..TrainConfig::default() }).is_err());
        let mut tr = Trainer::new(model, TrainConfig { batch_size: 2, ..TrainConfig::default() }).unwrap();
        assert!(tr.step_on(&examples()).is_err());
        assert!(tr.step(&[]).is_err());
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let mut model = MimModel::<f32>::build(tiny(), vocab(), 4).unwrap();
        attach_lora(&mut model, &LoraConfig { rank: 2, ..LoraConfig::default() }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = mim_checkpoint(&model).unwrap().to_bytes().unwrap();
        let back = load_mim(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.store, model.store);
        assert!(back.has_lora());
        assert_eq!(mim_checkpoint(&back).unwrap().to_bytes().unwrap(), bytes);
        assert!(load_vq(&Checkpoint::from_bytes(&bytes).unwrap()).is_err());
    }

    #[test]
    fn quantized_checkpoint_round_trip() {
        let mut model = MimModel::<f32>::build(tiny(), vocab(), 4).unwrap();
        crate::quantize::quantize_model(&mut model, crate::quantize::is_projection_layer).unwrap();
        let ck = mim_checkpoint(&model).unwrap();
        let back = load_mim(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert!(back.is_quantized());
        let tokens = vec![12; 16];
        let c = [examples()[0].cond.clone()];
        assert_eq!(back.logits(&tokens, &c).unwrap(), model.logits(&tokens, &c).unwrap());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let data = examples();
        let cfg = TrainConfig { batch_size: 2, accum_steps: 2, seed: 9, ..TrainConfig::default() };
        let mut straight = Trainer::new(MimModel::<f32>::build(tiny(), vocab(), 5).unwrap(), cfg).unwrap();
        let mut first = straight.clone();
        let full = straight.train(&data, 6, |_| {}).unwrap();
        first.train(&data, 3, |_| {}).unwrap();
        let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let rest = resumed.train(&data, 3, |_| {}).unwrap();
        assert_eq!(&full[3..], &rest[..]);
        assert_eq!(resumed.model.store, straight.model.store);
    }

    #[test]
    fn vq_checkpoint_round_trip() {
        let vq = VqModel::<f32>::build(VqConfig { hidden: 4, ..VqConfig::default() }, 3).unwrap();
        let ck = vq_checkpoint(&vq).unwrap();
        let back = load_vq(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.store, vq.store);
    }
}
