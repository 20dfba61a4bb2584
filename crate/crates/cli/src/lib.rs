use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use maskgen::backbone::MimModel;
use maskgen::conditioning::{Conditioning, MicroConditioning};
use maskgen::quantize::{is_projection_layer, quantize_model};
use maskgen::sampler::{animate, generate, inpaint, vary};
use maskgen::tooling::{bench_throughput, dataset_vocabulary, gen_dataset, read_image, Image, PixelMask, RunConfig};
use maskgen::training::{
    attach_lora, encode_dataset, eval_masks, evaluate_masked_ce, load_mim, load_vq, merge_lora, mim_checkpoint, vq_checkpoint, Checkpoint,
    TrainExample, Trainer,
};
use maskgen::vq::{train_vq, TokenGrid, VqModel};
use maskgen::Error;

pub const VERSION: &str = env!("MASKGEN_VERSION");

#[derive(Parser, Debug)]
#[command(name = "maskgen", version = VERSION, about = "Masked token image generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, also the default location of checkpoints.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct Sampling {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "cfg-scale")]
    cfg_scale: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value = "red circle light")]
    caption: String,
    /// Quality score fed to the micro-conditioning.
    #[arg(long, default_value_t = 0.6)]
    quality: f32,
    /// Token predictor checkpoint (default `<out>/mim.ckpt`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Autoencoder checkpoint (default `<out>/vq.ckpt`).
    #[arg(long)]
    vq: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural dataset to PPM files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the VQ autoencoder on the procedural dataset.
    TrainVq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the masked token predictor on tokenized data.
    TrainMim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        vq: Option<PathBuf>,
    },
    /// Fit LoRA adapters to a single image.
    FinetuneLora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        vq: Option<PathBuf>,
        /// Target image (default: a dataset sample).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Caption of `--image`.
        #[arg(long)]
        caption: Option<String>,
        /// Dataset index used when no image is given.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Sample an image from a caption.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Re-mask part of an image's tokens and decode again.
    Vary {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        /// Source image (default: the first dataset sample).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Fraction of tokens re-masked.
        #[arg(long, default_value_t = 0.5)]
        strength: f64,
    },
    /// Regenerate the region of an image marked by a mask PPM.
    Inpaint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        /// Source image (default: the first dataset sample).
        #[arg(long)]
        image: Option<PathBuf>,
        /// PPM of the same size; pixels brighter than mid-grey are regenerated.
        #[arg(long, required = true)]
        mask: PathBuf,
    },
    /// Decode a sequence of frames drifting by a fixed token shift.
    Animate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Per-frame shift in tokens, `dx,dy`.
        #[arg(long, default_value = "1,0", value_parser = parse_shift)]
        shift: (f64, f64),
    },
    /// Convert projection layers of a checkpoint to int8.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Time batched generation.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long = "batch-sizes", value_delimiter = ',', default_value = "1,8")]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn parse_shift(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected dx,dy")?;
    let x = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let y = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((x, y))
}

/// Parses `argv` (including the program name) and runs one command.
/// Returns 0 on success, 2 on usage errors and 1 on runtime errors.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Run {
    command: &'static str,
    argv: Vec<String>,
    out: PathBuf,
    config: RunConfig,
    seed: u64,
    inputs: Vec<Value>,
    outputs: Vec<Value>,
    metrics: Value,
}

impl Run {
    fn new(command: &'static str, argv: &[String], common: &Common) -> maskgen::Result<Self> {
        let config = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        std::fs::create_dir_all(&common.out)?;
        Ok(Run {
            command,
            argv: argv.iter().skip(1).cloned().collect(),
            out: common.out.clone(),
            config,
            seed: 0,
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: json!({}),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&mut self, path: &Path) -> maskgen::Result<Vec<u8>> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(json!({ "path": path.display().to_string(), "sha256": sha256_hex(&bytes) }));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> maskgen::Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes)?;
        self.outputs.push(json!({ "path": path.display().to_string(), "sha256": sha256_hex(bytes) }));
        Ok(())
    }

    fn write_image(&mut self, name: &str, img: &Image) -> maskgen::Result<()> {
        self.write(name, &maskgen::tooling::encode_ppm(img))
    }

    fn write_checkpoint(&mut self, name: &str, ck: &Checkpoint) -> maskgen::Result<()> {
        self.write(name, &ck.to_bytes()?)
    }

    fn load_checkpoint(&mut self, path: &Path) -> maskgen::Result<Checkpoint> {
        let bytes = self.input(path)?;
        Checkpoint::from_bytes(&bytes)
    }

    fn finish(self) -> maskgen::Result<()> {
        let config = serde_json::to_value(&self.config)?;
        let record = json!({
            "command": self.command,
            "argv": self.argv,
            "version": VERSION,
            "seed": self.seed,
            "config_hash": sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            "config": config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "metrics": self.metrics,
        });
        let path = self.out.join(format!("{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")?;
        println!("{}", path.display());
        Ok(())
    }
}

struct Loaded {
    model: MimModel<f32>,
    vq: VqModel<f32>,
    cond: Conditioning,
}

fn apply_sampling(run: &mut Run, common: &Common, s: &Sampling) {
    let cfg = &mut run.config.sampler;
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = s.steps {
        cfg.steps = v;
    }
    if let Some(v) = s.cfg_scale {
        cfg.cfg_scale = v;
    }
    if let Some(v) = s.temperature {
        cfg.temperature = v;
    }
    run.seed = cfg.seed;
}

fn load_for_sampling(run: &mut Run, s: &Sampling) -> maskgen::Result<Loaded> {
    let model_path = s.model.clone().unwrap_or_else(|| run.path("mim.ckpt"));
    let vq_path = s.vq.clone().unwrap_or_else(|| run.path("vq.ckpt"));
    let model = load_mim(&run.load_checkpoint(&model_path)?)?;
    let vq = load_vq(&run.load_checkpoint(&vq_path)?)?;
    let size = (model.config.grid * vq.config.downsample) as u32;
    let cond = Conditioning::new(model.vocab.encode(&s.caption)?, MicroConditioning::full(size, size, s.quality));
    run.config.sampler.validate()?;
    Ok(Loaded { model, vq, cond })
}

fn source_image(run: &mut Run, image: &Option<PathBuf>) -> maskgen::Result<Image> {
    match image {
        Some(p) => {
            run.input(p)?;
            read_image(p)
        }
        None => Ok(gen_dataset(&run.config.dataset)?.swap_remove(0).image),
    }
}

fn grid_json(grid: &TokenGrid) -> Value {
    json!({ "height": grid.height, "width": grid.width, "ids": grid.ids })
}

fn execute(command: Command, argv: &[String]) -> maskgen::Result<()> {
    match command {
        Command::GenData { common } => {
            let mut run = Run::new("gen-data", argv, &common)?;
            if let Some(s) = common.seed {
                run.config.dataset.seed = s;
            }
            run.seed = run.config.dataset.seed;
            let samples = gen_dataset(&run.config.dataset)?;
            let mut index = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let name = format!("sample_{i:04}.ppm");
                run.write_image(&name, &s.image)?;
                index.push(json!({ "file": name, "caption": s.text, "micro": s.micro }));
            }
            run.write("dataset.json", (serde_json::to_string_pretty(&index)? + "\n").as_bytes())?;
            run.metrics = json!({ "samples": samples.len() });
            run.finish()
        }
        Command::TrainVq { common, steps } => {
            let mut run = Run::new("train-vq", argv, &common)?;
            if let Some(s) = common.seed {
                run.config.vq_train.seed = s;
            }
            if let Some(s) = steps {
                run.config.vq_train.steps = s;
            }
            run.seed = run.config.vq_train.seed;
            let images: Vec<Image> = gen_dataset(&run.config.dataset)?.into_iter().map(|s| s.image).collect();
            let mut vq = VqModel::build(run.config.vq, run.config.vq_train.seed)?;
            let report = train_vq(&mut vq, &images, &run.config.vq_train)?;
            let eval = vq.evaluate(&images, run.config.vq_train.beta)?;
            run.write_checkpoint("vq.ckpt", &vq_checkpoint(&vq)?)?;
            let recon = vq.decode(&vq.tokenize(&images[0])?)?;
            run.write_image("vq_recon_0000.ppm", &recon)?;
            run.metrics = json!({
                "final_loss": report.losses.last(),
                "eval": eval,
                "dead_entries": report.dead_entries(),
                "pixel_mse": recon.mse(&images[0])?,
            });
            run.finish()
        }
        Command::TrainMim { common, steps, vq } => {
            let mut run = Run::new("train-mim", argv, &common)?;
            if let Some(s) = common.seed {
                run.config.train.seed = s;
            }
            if let Some(s) = steps {
                run.config.train.steps = s;
            }
            run.seed = run.config.train.seed;
            let vq_path = vq.unwrap_or_else(|| run.path("vq.ckpt"));
            let vq = load_vq(&run.load_checkpoint(&vq_path)?)?;
            let mut mc = run.config.model;
            mc.vocab_size = vq.config.vocab_size;
            run.config.model = mc;
            let data = encode_dataset(&vq, &gen_dataset(&run.config.dataset)?)?;
            let model = MimModel::build(mc, dataset_vocabulary(), run.config.train.seed)?;
            let mut trainer = Trainer::new(model, run.config.train)?;
            let total = run.config.train.steps;
            let history = trainer.train(&data, total, |m| {
                if m.step % 100 == 0 {
                    eprintln!("step {} loss {:.4} acc {:.3}", m.step, m.loss, m.accuracy);
                }
            })?;
            run.write_checkpoint("mim.ckpt", &mim_checkpoint(&trainer.model)?)?;
            run.write_checkpoint("mim-trainer.ckpt", &trainer.checkpoint()?)?;
            let tail = &history[history.len().saturating_sub(50)..];
            run.metrics = json!({
                "steps": total,
                "params": trainer.model.count_params(),
                "final_loss": history.last().map(|m| m.loss),
                "tail_mean_loss": tail.iter().map(|m| m.loss).sum::<f64>() / tail.len().max(1) as f64,
            });
            run.finish()
        }
        Command::FinetuneLora { common, steps, model, vq, image, caption, sample } => {
            let mut run = Run::new("finetune-lora", argv, &common)?;
            if let Some(s) = common.seed {
                run.config.lora_train.seed = s;
            }
            if let Some(s) = steps {
                run.config.lora_train.steps = s;
            }
            run.seed = run.config.lora_train.seed;
            let model_path = model.unwrap_or_else(|| run.path("mim.ckpt"));
            let vq_path = vq.unwrap_or_else(|| run.path("vq.ckpt"));
            let mut model = load_mim(&run.load_checkpoint(&model_path)?)?;
            let vq = load_vq(&run.load_checkpoint(&vq_path)?)?;
            let example = match (&image, &caption) {
                (Some(p), Some(text)) => {
                    run.input(p)?;
                    let img = read_image(p)?;
                    let micro = MicroConditioning::full(img.height as u32, img.width as u32, 0.6);
                    TrainExample { tokens: vq.tokenize(&img)?, cond: Conditioning::new(model.vocab.encode(text)?, micro) }
                }
                (None, None) => {
                    let samples = gen_dataset(&run.config.dataset)?;
                    let Some(s) = samples.get(sample) else {
                        return Err(Error::Domain(format!("sample {sample} outside a dataset of {}", samples.len())));
                    };
                    encode_dataset(&vq, std::slice::from_ref(s))?.remove(0)
                }
                _ => return Err(Error::Config("--image and --caption must be given together".into())),
            };
            let masks = eval_masks(example.tokens.len(), 16, run.seed)?;
            let before = evaluate_masked_ce(&model, &example, &masks)?;
            attach_lora(&mut model, &run.config.lora, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
            let mut trainer = Trainer::new(model, run.config.lora_train)?;
            trainer.train(std::slice::from_ref(&example), run.config.lora_train.steps, |_| {})?;
            let after = evaluate_masked_ce(&trainer.model, &example, &masks)?;
            let adapted = trainer.model;
            run.write_checkpoint("lora.ckpt", &mim_checkpoint(&adapted)?)?;
            let mut merged = adapted.clone();
            merge_lora(&mut merged)?;
            run.write_checkpoint("lora-merged.ckpt", &mim_checkpoint(&merged)?)?;
            run.metrics = json!({
                "trainable_params": adapted.count_params(),
                "masked_ce_before": before,
                "masked_ce_after": after,
                "reduction": 1.0 - after / before,
            });
            run.finish()
        }
        Command::Generate { common, sampling } => {
            let mut run = Run::new("generate", argv, &common)?;
            apply_sampling(&mut run, &common, &sampling);
            let l = load_for_sampling(&mut run, &sampling)?;
            let grid = generate(&l.model, &l.cond, &run.config.sampler)?;
            run.write_image("generate.ppm", &l.vq.decode(&grid)?)?;
            run.metrics = json!({ "caption": sampling.caption, "tokens": grid_json(&grid) });
            run.finish()
        }
        Command::Vary { common, sampling, image, strength } => {
            let mut run = Run::new("vary", argv, &common)?;
            apply_sampling(&mut run, &common, &sampling);
            let l = load_for_sampling(&mut run, &sampling)?;
            let source = l.vq.tokenize(&source_image(&mut run, &image)?)?;
            let grid = vary(&l.model, &source, strength, &l.cond, &run.config.sampler)?;
            run.write_image("vary.ppm", &l.vq.decode(&grid)?)?;
            run.metrics = json!({ "strength": strength, "changed_fraction": 1.0 - grid.agreement(&source), "tokens": grid_json(&grid) });
            run.finish()
        }
        Command::Inpaint { common, sampling, image, mask } => {
            let mut run = Run::new("inpaint", argv, &common)?;
            apply_sampling(&mut run, &common, &sampling);
            let l = load_for_sampling(&mut run, &sampling)?;
            let img = source_image(&mut run, &image)?;
            run.input(&mask)?;
            let pixel_mask = PixelMask::from_image(&read_image(&mask)?);
            let source = l.vq.tokenize(&img)?;
            let grid = inpaint(&l.model, &source, &pixel_mask, l.vq.config.downsample, &l.cond, &run.config.sampler)?;
            run.write_image("inpaint.ppm", &l.vq.decode(&grid)?)?;
            run.metrics = json!({ "changed_fraction": 1.0 - grid.agreement(&source), "tokens": grid_json(&grid) });
            run.finish()
        }
        Command::Animate { common, sampling, frames, shift } => {
            let mut run = Run::new("animate", argv, &common)?;
            apply_sampling(&mut run, &common, &sampling);
            let l = load_for_sampling(&mut run, &sampling)?;
            let grids = animate(&l.model, l.vq.codebook(), &l.cond, frames, shift, &run.config.sampler)?;
            for (k, g) in grids.iter().enumerate() {
                run.write_image(&format!("animate_{k:03}.ppm"), &l.vq.decode(g)?)?;
            }
            run.metrics = json!({ "frames": frames, "shift": [shift.0, shift.1] });
            run.finish()
        }
        Command::Quantize { common, model } => {
            let mut run = Run::new("quantize", argv, &common)?;
            let model_path = model.unwrap_or_else(|| run.path("mim.ckpt"));
            let mut m = load_mim(&run.load_checkpoint(&model_path)?)?;
            let report = quantize_model(&mut m, is_projection_layer)?;
            run.write_checkpoint("mim-int8.ckpt", &mim_checkpoint(&m)?)?;
            run.metrics = json!({ "ratio": report.ratio(), "report": report });
            run.finish()
        }
        Command::Bench { common, sampling, batch_sizes, reps } => {
            let mut run = Run::new("bench", argv, &common)?;
            apply_sampling(&mut run, &common, &sampling);
            let l = load_for_sampling(&mut run, &sampling)?;
            let report = bench_throughput(&l.model, &l.cond, &batch_sizes, reps, &run.config.sampler)?;
            for e in &report.entries {
                println!("batch {:>3}: {:.4} s/batch, {:.5} s/image, {} forwards", e.batch_size, e.median_seconds, e.per_image_seconds, e.forwards);
            }
            run.write("bench_report.json", (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
            run.metrics = json!({ "forwards_per_decode": report.expected_forwards });
            run.finish()
        }
    }
}
