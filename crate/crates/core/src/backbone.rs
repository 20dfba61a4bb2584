//! Token-grid transformer with convolutional residual stages.
//!
//! Token ids (with `MASK = V`) are embedded, passed through convolutional
//! residual blocks, optionally downsampled 2x, processed by pre-norm
//! transformer blocks (self-attention with FiLM modulation, cross-attention to
//! the caption, MLP), brought back to full resolution and projected to logits
//! over the `V` codebook entries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{modulate, CaptionConfig, CaptionEmbedder, CaptionVocabulary, Conditioning, FilmHead};
use crate::error::{bail, Result};
use crate::nn::{init_tensor, Conv, Init, LayerNorm, Linear, ResBlock};
use crate::numerics::{AttnSpec, Graph, MapGeom, ParamId, ParamStore, Real, Tensor, Var};
use crate::training::{LoraConfig, LoraState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Codebook size `V`; the MASK token uses id `V`.
    pub vocab_size: usize,
    /// Token grid side length.
    pub grid: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Residual conv blocks before and after the transformer core.
    pub conv_blocks: usize,
    /// One 2x down/up pair around the transformer core.
    pub downsample: bool,
    pub mlp_ratio: usize,
    pub caption: CaptionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            grid: 8,
            dim: 128,
            heads: 4,
            depth: 4,
            conv_blocks: 1,
            downsample: false,
            mlp_ratio: 4,
            caption: CaptionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn mask_id(&self) -> usize {
        self.vocab_size
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Side of the grid the transformer core runs on.
    pub fn core_grid(&self) -> usize {
        if self.downsample {
            self.grid / 2
        } else {
            self.grid
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            bail!(Config, "codebook size must be at least 2");
        }
        if self.grid == 0 || self.dim == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            bail!(Config, "grid, dim, depth and mlp_ratio must be positive");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            bail!(Config, "dim {} not divisible by {} heads", self.dim, self.heads);
        }
        if self.downsample && !self.grid.is_multiple_of(2) {
            bail!(Config, "downsampling needs an even grid, got {}", self.grid);
        }
        if self.grid < 3 && (self.conv_blocks > 0 || self.downsample) {
            bail!(Config, "conv stages need a grid of at least 3");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AttnProj {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttnProj {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, kv_in: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(AttnProj {
            q: Linear::fan_in(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::fan_in(store, &format!("{name}.k"), kv_in, dim, rng)?,
            v: Linear::fan_in(store, &format!("{name}.v"), kv_in, dim, rng)?,
            o: Linear::fan_in(store, &format!("{name}.o"), dim, dim, rng)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: Var, spec: AttnSpec) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, ctx)?;
        let v = self.v.forward(g, store, ctx)?;
        let a = g.attention(q, k, v, spec)?;
        self.o.forward(g, store, a)
    }

    fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

#[derive(Clone, Debug)]
struct Block {
    film: FilmHead,
    norm1: LayerNorm,
    attn: AttnProj,
    norm2: LayerNorm,
    cross: AttnProj,
    norm3: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var, ctx: &Context<'_>) -> Result<Var> {
        let (gamma, beta) = self.film.params(g, store, ctx.cond_vec)?;
        let a = self.norm1.forward(g, store, h)?;
        let a = modulate(g, a, gamma, beta)?;
        let a = self.attn.forward(g, store, a, a, AttnSpec::new(ctx.heads, ctx.batch))?;
        let h = g.add(h, a)?;

        let c = self.norm2.forward(g, store, h)?;
        let spec = AttnSpec { heads: ctx.heads, batch: ctx.batch, key_lens: Some(ctx.key_lens.to_vec()) };
        let c = self.cross.forward(g, store, c, ctx.seq, spec)?;
        let h = g.add(h, c)?;

        let m = self.norm3.forward(g, store, h)?;
        let m = self.fc1.forward(g, store, m)?;
        let m = g.gelu(m);
        let m = self.fc2.forward(g, store, m)?;
        g.add(h, m)
    }
}

struct Context<'a> {
    batch: usize,
    heads: usize,
    seq: Var,
    key_lens: &'a [usize],
    cond_vec: Var,
}

/// Layer structure of the token predictor. Parameters live in the owning
/// [`MimModel`]'s store.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: ModelConfig,
    token: ParamId,
    position: ParamId,
    pre: Vec<ResBlock>,
    down: Option<Conv>,
    blocks: Vec<Block>,
    up: Option<Conv>,
    post: Vec<ResBlock>,
    norm_out: LayerNorm,
    head: Linear,
}

impl Backbone {
    fn new<T: Real>(store: &mut ParamStore<T>, config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let token = store.add("backbone.token", init_tensor(&[config.vocab_size + 1, d], Init::Normal(1.0), rng), true)?;
        let position = store.add("backbone.position", init_tensor(&[config.tokens(), d], Init::Normal(0.5), rng), true)?;
        let pre = (0..config.conv_blocks)
            .map(|i| ResBlock::new(store, &format!("backbone.pre.{i}"), d, rng))
            .collect::<Result<Vec<_>>>()?;
        let down = if config.downsample { Some(Conv::new(store, "backbone.down", d, d, 3, 2, rng)?) } else { None };
        let cond_width = config.caption.cond_width();
        let text = config.caption.dim;
        let blocks = (0..config.depth)
            .map(|i| {
                let n = format!("backbone.blocks.{i}");
                Ok(Block {
                    film: FilmHead::new(store, &format!("{n}.film"), cond_width, d, rng)?,
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d)?,
                    attn: AttnProj::new(store, &format!("{n}.attn"), d, d, rng)?,
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d)?,
                    cross: AttnProj::new(store, &format!("{n}.cross"), d, text, rng)?,
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), d)?,
                    fc1: Linear::fan_in(store, &format!("{n}.mlp.fc1"), d, d * config.mlp_ratio, rng)?,
                    fc2: Linear::fan_in(store, &format!("{n}.mlp.fc2"), d * config.mlp_ratio, d, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let up = if config.downsample { Some(Conv::new(store, "backbone.up", d, d, 3, 1, rng)?) } else { None };
        let post = (0..config.conv_blocks)
            .map(|i| ResBlock::new(store, &format!("backbone.post.{i}"), d, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm_out = LayerNorm::new(store, "backbone.norm_out", d)?;
        let head = Linear::fan_in(store, "backbone.head", d, config.vocab_size, rng)?;
        Ok(Backbone { config, token, position, pre, down, blocks, up, post, norm_out, head })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: &[usize], ctx: &Context<'_>) -> Result<Var> {
        let cfg = &self.config;
        let (b, side) = (ctx.batch, cfg.grid);
        if tokens.len() != b * cfg.tokens() {
            bail!(Dimension, "expected {} tokens for batch {b} on a {side}x{side} grid, got {}", b * cfg.tokens(), tokens.len());
        }
        if let Some(bad) = tokens.iter().find(|&&t| t > cfg.mask_id()) {
            bail!(Domain, "token id {bad} is neither a codebook id nor MASK");
        }
        let table = g.param(store, self.token);
        let h = g.gather_rows(table, tokens)?;
        let pos = g.param(store, self.position);
        let mut h = g.tile_add(h, pos)?;
        for rb in &self.pre {
            h = rb.forward(g, store, h, b, side, side)?;
        }
        let skip = h;
        if let Some(down) = &self.down {
            h = down.forward(g, store, h, b, side, side)?;
        }
        for block in &self.blocks {
            h = block.forward(g, store, h, ctx)?;
        }
        if let Some(up) = &self.up {
            let half = cfg.core_grid();
            h = g.upsample2x(h, MapGeom { batch: b, height: half, width: half })?;
            h = up.forward(g, store, h, b, side, side)?;
            h = g.add(h, skip)?;
        }
        for rb in &self.post {
            h = rb.forward(g, store, h, b, side, side)?;
        }
        let h = self.norm_out.forward(g, store, h)?;
        self.head.forward(g, store, h)
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for blk in &mut self.blocks {
            out.extend([&mut blk.film.gamma, &mut blk.film.beta]);
            out.extend(blk.attn.linears_mut());
            out.extend(blk.cross.linears_mut());
            out.extend([&mut blk.fc1, &mut blk.fc2]);
        }
        out.push(&mut self.head);
        out
    }
}

/// Caption embedder plus backbone, with their parameters.
#[derive(Clone, Debug)]
pub struct MimModel<T: Real = f32> {
    pub config: ModelConfig,
    pub vocab: CaptionVocabulary,
    pub store: ParamStore<T>,
    pub embedder: CaptionEmbedder,
    backbone: Backbone,
    pub(crate) lora: Option<LoraState>,
}

impl<T: Real> MimModel<T> {
    /// Builds a randomly initialised model. Same seed, same parameters.
    pub fn build(config: ModelConfig, vocab: CaptionVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = CaptionEmbedder::new(&mut store, vocab.len(), config.caption, &mut rng)?;
        let backbone = Backbone::new(&mut store, config, &mut rng)?;
        Ok(MimModel { config, vocab, store, embedder, backbone, lora: None })
    }

    /// Logits `[batch * grid^2, V]` for a batch of token grids (MASK = `V`).
    pub fn forward(&self, g: &mut Graph<T>, tokens: &[usize], conds: &[Conditioning]) -> Result<Var> {
        let cv = self.embedder.embed(g, &self.store, conds)?;
        let ctx = Context { batch: conds.len(), heads: self.config.heads, seq: cv.seq, key_lens: &cv.key_lens, cond_vec: cv.cond_vec };
        self.backbone.forward(g, &self.store, tokens, &ctx)
    }

    /// Inference-only forward returning the logits tensor.
    pub fn logits(&self, tokens: &[usize], conds: &[Conditioning]) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, tokens, conds)?;
        let logits = g.value(out).clone();
        if !logits.is_finite() {
            bail!(Numeric, "non-finite logits");
        }
        Ok(logits)
    }

    /// Exact number of trainable scalar parameters.
    pub fn count_params(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn is_quantized(&self) -> bool {
        self.linears().any(|l| l.quant.is_some())
    }

    pub fn has_lora(&self) -> bool {
        self.lora.is_some()
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref().map(|s| &s.config)
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        let b = &self.backbone;
        b.blocks
            .iter()
            .flat_map(|blk| {
                [
                    &blk.film.gamma,
                    &blk.film.beta,
                    &blk.attn.q,
                    &blk.attn.k,
                    &blk.attn.v,
                    &blk.attn.o,
                    &blk.cross.q,
                    &blk.cross.k,
                    &blk.cross.v,
                    &blk.cross.o,
                    &blk.fc1,
                    &blk.fc2,
                ]
            })
            .chain(std::iter::once(&b.head))
    }

    /// Parameter store alongside mutable access to every transformer linear.
    pub(crate) fn store_and_linears_mut(&mut self) -> (&mut ParamStore<T>, Vec<&mut Linear>) {
        (&mut self.store, self.backbone.linears_mut())
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Real>(&self) -> MimModel<U> {
        MimModel {
            config: self.config,
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            embedder: self.embedder.clone(),
            backbone: self.backbone.clone(),
            lora: self.lora.clone(),
        }
    }
}
