// Calibration run for the training-dependent acceptance thresholds.
// Usage: cargo run --release --example pilot -- ../cli/tests/fixtures/pilot.json

use std::time::Instant;

use maskgen::backbone::{MimModel, ModelConfig};
use maskgen::quantize::{is_projection_layer, quantize_model};
use maskgen::sampler::{generate, SamplerConfig};
use maskgen::tooling::{bench_throughput, dataset_vocabulary, gen_dataset, DatasetSpec};
use maskgen::training::{attach_lora, encode_dataset, eval_masks, evaluate_masked_ce, LoraConfig, TrainConfig, Trainer};
use maskgen::vq::{smooth, train_vq, VqConfig, VqModel, VqTrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn main() -> maskgen::Result<()> {
    let out = std::env::args().nth(1);
    let t0 = Instant::now();

    // Autoencoder convergence on a small dataset.
    let small: Vec<_> = gen_dataset(&DatasetSpec { samples: 8, ..DatasetSpec::default() })?.into_iter().map(|s| s.image).collect();
    let mut vq8 = VqModel::build(VqConfig::default(), 0)?;
    let rep8 = train_vq(&mut vq8, &small, &VqTrainConfig::default())?;
    let smoothed = *smooth(&rep8.losses, 0.98).last().unwrap();
    let mut recon_mse = 0.0;
    let mut gray_mse = 0.0;
    for im in &small {
        recon_mse += vq8.decode(&vq8.tokenize(im)?)?.mse(im)? / small.len() as f64;
        gray_mse += im.pixels.iter().map(|&p| (p as f64 - 0.5).powi(2)).sum::<f64>() / im.pixels.len() as f64 / small.len() as f64;
    }
    let vq_ratio = smoothed / rep8.losses[0];
    println!("vq8: loss {:.3} -> {:.3} ratio {:.4} recon {:.5} gray {:.5} ({:.1}s)", rep8.losses[0], smoothed, vq_ratio, recon_mse, gray_mse, t0.elapsed().as_secs_f64());

    let samples = gen_dataset(&DatasetSpec::default())?;
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let mut vq = VqModel::build(VqConfig::default(), 0)?;
    let vq_cfg = VqTrainConfig { steps: 300, ..VqTrainConfig::default() };
    let rep = train_vq(&mut vq, &images, &vq_cfg)?;
    let vq_eval = vq.evaluate(&images, vq_cfg.beta)?;
    println!("vq: {:?} dead={} ({:.1}s)", vq_eval, rep.dead_entries(), t0.elapsed().as_secs_f64());
    let data = encode_dataset(&vq, &samples)?;

    // Overfit one example.
    let t = Instant::now();
    let model = MimModel::build(ModelConfig::default(), dataset_vocabulary(), 0)?;
    println!("params {}", model.count_params());
    let mut tr = Trainer::new(model, TrainConfig { cond_dropout: 0.0, ..TrainConfig::default() })?;
    let one = vec![data[0].clone()];
    let mut overfit = Vec::new();
    for chunk in [250, 250, 500, 1000] {
        let m = tr.train(&one, chunk, |_| {})?;
        let grid = generate(&tr.model, &one[0].cond, &SamplerConfig::greedy(12))?;
        let acc = grid.agreement(&one[0].tokens);
        println!("overfit step {} loss {:.4} match {:.4} ({:.1}s)", tr.step_count(), m.last().unwrap().loss, acc, t.elapsed().as_secs_f64());
        overfit.push(json!({"step": tr.step_count(), "match": acc}));
    }

    // Base model on the whole dataset, then LoRA on one held-out-ish image.
    let t = Instant::now();
    let base_model = MimModel::build(ModelConfig::default(), dataset_vocabulary(), 1)?;
    let mut base = Trainer::new(base_model, TrainConfig { seed: 1, ..TrainConfig::default() })?;
    base.train(&data, 600, |_| {})?;
    println!("base trained ({:.1}s)", t.elapsed().as_secs_f64());
    let held_out = gen_dataset(&DatasetSpec { samples: 1, seed: 99, ..DatasetSpec::default() })?;
    let target = encode_dataset(&vq, &held_out)?.remove(0);
    let masks = eval_masks(target.tokens.len(), 16, 7)?;
    let before = evaluate_masked_ce(&base.model, &target, &masks)?;
    let mut lmodel = base.model.clone();
    attach_lora(&mut lmodel, &LoraConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut lt = Trainer::new(lmodel, TrainConfig { lr: 2e-3, seed: 2, ..TrainConfig::default() })?;
    let tgt = vec![target.clone()];
    let mut lora = Vec::new();
    for chunk in [100, 150, 250, 500, 1000] {
        lt.train(&tgt, chunk, |_| {})?;
        let after = evaluate_masked_ce(&lt.model, &target, &masks)?;
        let red = 1.0 - after / before;
        println!("lora step {} ce {:.4} -> {:.4} reduction {:.4} ({:.1}s)", lt.step_count(), before, after, red, t.elapsed().as_secs_f64());
        lora.push(json!({"step": lt.step_count(), "before": before, "after": after, "reduction": red}));
    }

    // Quantized vs full precision greedy decoding.
    let mut q = base.model.clone();
    let qr = quantize_model(&mut q, is_projection_layer)?;
    let mut agree = Vec::new();
    for ex in data.iter().take(18) {
        let a = generate(&base.model, &ex.cond, &SamplerConfig::greedy(12))?;
        let b = generate(&q, &ex.cond, &SamplerConfig::greedy(12))?;
        agree.push(a.agreement(&b));
    }
    let mean_agree = agree.iter().sum::<f64>() / agree.len() as f64;
    let min_agree = agree.iter().cloned().fold(1.0, f64::min);
    println!("quant ratio {:.4} agreement mean {:.4} min {:.4}", qr.ratio(), mean_agree, min_agree);

    let bench = bench_throughput(&base.model, &data[0].cond, &[1, 8], 5, &SamplerConfig::default())?;
    for e in &bench.entries {
        println!("bench b={} median {:.4}s per-image {:.5}s", e.batch_size, e.median_seconds, e.per_image_seconds);
    }
    let record = json!({
        "vq": {"steps": rep8.losses.len(), "initial": rep8.losses[0], "smoothed_final": smoothed, "ratio": vq_ratio,
               "recon_mse": recon_mse, "gray_mse": gray_mse, "dead_entries": rep8.dead_entries()},
        "overfit": overfit, "lora": lora,
        "quant": {"ratio": qr.ratio(), "mean_agreement": mean_agree, "min_agreement": min_agree},
        "bench": bench.entries.iter().map(|e| json!({"batch": e.batch_size, "per_image": e.per_image_seconds})).collect::<Vec<_>>(),
        "total_seconds": t0.elapsed().as_secs_f64(),
        "thresholds": {
            "vq_steps": 2000, "vq_max_loss_ratio": 0.25,
            "overfit_min_match": 0.95, "overfit_steps": 500,
            "lora_min_reduction": 0.8, "lora_steps": 500, "base_steps": 600,
            "quant_min_agreement": 0.9, "quant_max_ratio": 0.26,
        },
    });
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&record)?)?;
    }
    Ok(())
}
