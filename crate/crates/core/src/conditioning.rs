//! Caption embedding, micro-conditioning and adaptive-norm heads.
//!
//! A caption produces two streams: per-token embeddings consumed by
//! cross-attention, and a pooled vector that (with the micro-conditioning
//! channels appended) drives per-block FiLM modulation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{init_tensor, Init, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const PAD_TOKEN: &str = "<pad>";
pub const NULL_TOKEN: &str = "<null>";

/// Word-level caption vocabulary. Id 0 is PAD, id 1 is NULL (the
/// unconditional caption); words follow densely from 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionVocabulary {
    tokens: Vec<String>,
}

impl CaptionVocabulary {
    pub const PAD: usize = 0;
    pub const NULL: usize = 1;

    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), NULL_TOKEN.to_string()];
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.contains(char::is_whitespace) {
                bail!(Vocabulary, "invalid vocabulary word {w:?}");
            }
            if tokens.iter().any(|t| t == w) {
                bail!(Vocabulary, "duplicate vocabulary word {w:?}");
            }
            tokens.push(w.to_string());
        }
        Ok(CaptionVocabulary { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace-tokenised caption ids.
    pub fn encode(&self, caption: &str) -> Result<Vec<usize>> {
        let ids = caption
            .split_whitespace()
            .map(|w| match self.id(w) {
                Some(id) if id >= 2 => Ok(id),
                _ => Err(crate::Error::Vocabulary(format!("unknown caption word {w:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            bail!(Vocabulary, "empty caption");
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != Self::PAD)
            .map(|&i| self.token(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `{token: id}` map used in checkpoints.
    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![String::new(); map.len()];
        for (t, &i) in map {
            if i >= tokens.len() || !tokens[i].is_empty() {
                bail!(Vocabulary, "vocabulary ids are not dense");
            }
            tokens[i] = t.clone();
        }
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) || tokens.get(1).map(String::as_str) != Some(NULL_TOKEN) {
            bail!(Vocabulary, "vocabulary must start with {PAD_TOKEN} and {NULL_TOKEN}");
        }
        Ok(CaptionVocabulary { tokens })
    }
}

/// Original size, crop offset and quality score of a training image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroConditioning {
    pub orig_height: u32,
    pub orig_width: u32,
    pub crop_top: u32,
    pub crop_left: u32,
    pub quality: f32,
}

impl MicroConditioning {
    /// Uncropped image of the given size with a neutral quality score.
    pub fn full(height: u32, width: u32, quality: f32) -> Self {
        MicroConditioning { orig_height: height, orig_width: width, crop_top: 0, crop_left: 0, quality }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_top >= self.orig_height.max(1) || self.crop_left >= self.orig_width.max(1) {
            bail!(Domain, "crop offset lies outside the original image");
        }
        if !self.quality.is_finite() {
            bail!(Domain, "quality score must be finite");
        }
        Ok(())
    }

    pub fn scalars(&self) -> [f64; 5] {
        [
            self.orig_height as f64,
            self.orig_width as f64,
            self.crop_top as f64,
            self.crop_left as f64,
            self.quality as f64,
        ]
    }
}

/// Everything a generation request conditions on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub caption: Vec<usize>,
    pub micro: MicroConditioning,
}

impl Conditioning {
    pub fn new(caption: Vec<usize>, micro: MicroConditioning) -> Self {
        Conditioning { caption, micro }
    }

    /// Unconditional counterpart: NULL caption, same micro channels.
    pub fn unconditional(&self) -> Self {
        Conditioning { caption: vec![CaptionVocabulary::NULL], micro: self.micro }
    }

    pub fn is_null(&self) -> bool {
        self.caption == [CaptionVocabulary::NULL]
    }
}

/// With probability `p`, swaps the caption for NULL. Micro channels stay.
pub fn drop_condition(cond: &Conditioning, p: f64, rng: &mut impl Rng) -> Conditioning {
    if rng.gen::<f64>() < p {
        cond.unconditional()
    } else {
        cond.clone()
    }
}

/// `[sin(w_k v)..., cos(w_k v)...]` with `w_k = 10000^(-2k/dim)`.
pub fn sinusoidal_embed(value: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        bail!(Config, "sinusoidal dimension must be even and positive, got {dim}");
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| 10000f64.powf(-2.0 * k as f64 / dim as f64)).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (w * value).sin()).collect();
    out.extend(freqs.iter().map(|w| (w * value).cos()));
    Ok(out)
}

/// Concatenated sinusoidal embeddings of the five micro scalars.
pub fn build_micro(micro: &MicroConditioning, per_scalar_dim: usize) -> Result<Vec<f64>> {
    micro.validate()?;
    let mut out = Vec::with_capacity(5 * per_scalar_dim);
    for v in micro.scalars() {
        out.extend(sinusoidal_embed(v, per_scalar_dim)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionConfig {
    /// Width of caption token embeddings.
    pub dim: usize,
    pub max_len: usize,
    /// Sinusoid width per micro-conditioning scalar.
    pub micro_dim: usize,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        CaptionConfig { dim: 64, max_len: 8, micro_dim: 32 }
    }
}

impl CaptionConfig {
    /// Width of the pooled-plus-micro vector fed to the FiLM heads.
    pub fn cond_width(&self) -> usize {
        self.dim + 5 * self.micro_dim
    }
}

/// Graph handles for a batch of conditioning inputs.
pub struct CondVars {
    /// `[batch * max_len, dim]`, item `b` padded past `key_lens[b]`.
    pub seq: Var,
    pub key_lens: Vec<usize>,
    /// `[batch, dim]`
    pub pooled: Var,
    /// `[batch, dim + 5 * micro_dim]`: pooled with micro channels appended.
    pub cond_vec: Var,
}

/// Concrete per-caption conditioning values.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub sequence: Tensor<f32>,
    pub pooled: Tensor<f32>,
    pub micro: Tensor<f32>,
}

/// Trainable stand-in for a frozen text encoder: token plus positional
/// embeddings, pooled by a mean over non-PAD positions.
#[derive(Clone, Debug)]
pub struct CaptionEmbedder {
    pub config: CaptionConfig,
    pub vocab_size: usize,
    token: ParamId,
    position: ParamId,
}

impl CaptionEmbedder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, vocab_size: usize, config: CaptionConfig, rng: &mut impl Rng) -> Result<Self> {
        if vocab_size < 3 || config.max_len == 0 || config.dim == 0 {
            bail!(Config, "caption embedder needs a vocabulary word, max_len >= 1 and dim >= 1");
        }
        if !config.micro_dim.is_multiple_of(2) {
            bail!(Config, "micro_dim must be even");
        }
        let token = store.add("caption.token", init_tensor(&[vocab_size, config.dim], Init::Normal(1.0), rng), true)?;
        let position = store.add("caption.position", init_tensor(&[config.max_len, config.dim], Init::Normal(0.1), rng), true)?;
        Ok(CaptionEmbedder { config, vocab_size, token, position })
    }

    /// Caption length after stripping trailing PAD; validates ids.
    fn caption_len(&self, caption: &[usize]) -> Result<usize> {
        let len = caption.iter().rposition(|&i| i != CaptionVocabulary::PAD).map_or(0, |p| p + 1);
        if len == 0 {
            bail!(Vocabulary, "caption has no non-PAD tokens");
        }
        if len > self.config.max_len {
            bail!(Vocabulary, "caption of {len} tokens exceeds max length {}", self.config.max_len);
        }
        let body = &caption[..len];
        if let Some(&bad) = body.iter().find(|&&i| i >= self.vocab_size) {
            bail!(Vocabulary, "caption id {bad} outside vocabulary of {}", self.vocab_size);
        }
        if body.contains(&CaptionVocabulary::PAD) {
            bail!(Vocabulary, "PAD inside caption body");
        }
        if len > 1 && body.contains(&CaptionVocabulary::NULL) {
            bail!(Vocabulary, "NULL token mixed into a caption");
        }
        Ok(len)
    }

    /// Embeds a batch. The NULL caption maps to the bare NULL row with no
    /// positional offset.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, conds: &[Conditioning]) -> Result<CondVars> {
        if conds.is_empty() {
            bail!(Dimension, "empty conditioning batch");
        }
        let lens = conds.iter().map(|c| self.caption_len(&c.caption)).collect::<Result<Vec<_>>>()?;
        let l = *lens.iter().max().expect("non-empty");
        let b = conds.len();
        let mut ids = Vec::with_capacity(b * l);
        let mut pos_ids = Vec::with_capacity(b * l);
        let mut pos_gate = Vec::with_capacity(b * l * self.config.dim);
        let mut pool = vec![T::zero(); b * b * l];
        for (bi, (c, &len)) in conds.iter().zip(&lens).enumerate() {
            let gate = if c.is_null() { T::zero() } else { T::one() };
            for p in 0..l {
                ids.push(if p < len { c.caption[p] } else { CaptionVocabulary::PAD });
                pos_ids.push(p);
                pos_gate.extend(std::iter::repeat_n(if p < len { gate } else { T::zero() }, self.config.dim));
                if p < len {
                    pool[bi * b * l + bi * l + p] = T::lit(1.0 / len as f64);
                }
            }
        }
        let table = g.param(store, self.token);
        let tok = g.gather_rows(table, &ids)?;
        let pos_table = g.param(store, self.position);
        let pos = g.gather_rows(pos_table, &pos_ids)?;
        let gate = g.constant(Tensor::new(&[b * l, self.config.dim], pos_gate)?);
        let pos = g.mul(pos, gate)?;
        let seq = g.add(tok, pos)?;
        let pool = g.constant(Tensor::new(&[b, b * l], pool)?);
        let pooled = g.matmul(pool, seq)?;
        let mut micro = Vec::with_capacity(b * 5 * self.config.micro_dim);
        for c in conds {
            micro.extend(build_micro(&c.micro, self.config.micro_dim)?.into_iter().map(T::lit));
        }
        let micro = g.constant(Tensor::new(&[b, 5 * self.config.micro_dim], micro)?);
        let cond_vec = g.concat_cols(pooled, micro)?;
        Ok(CondVars { seq, key_lens: lens, pooled, cond_vec })
    }

    /// Evaluated streams for a single conditioning input.
    pub fn bundle(&self, store: &ParamStore<f32>, cond: &Conditioning) -> Result<ConditioningBundle> {
        let mut g = Graph::no_grad();
        let v = self.embed(&mut g, store, std::slice::from_ref(cond))?;
        let len = v.key_lens[0];
        let seq = g.value(v.seq);
        let sequence = Tensor::new(&[len, self.config.dim], seq.data()[..len * self.config.dim].to_vec())?;
        let cv = g.value(v.cond_vec);
        let micro = Tensor::new(&[5 * self.config.micro_dim], cv.data()[self.config.dim..].to_vec())?;
        Ok(ConditioningBundle { sequence, pooled: g.value(v.pooled).clone().reshape(&[self.config.dim])?, micro })
    }

    pub fn null_row<'a>(&self, store: &'a ParamStore<f32>) -> &'a [f32] {
        store.tensor(self.token).row(CaptionVocabulary::NULL)
    }
}

/// Per-block FiLM projections `gamma = 1 + W_g c`, `beta = W_b c`, both
/// zero-initialised so modulation starts as the identity.
#[derive(Clone, Debug)]
pub struct FilmHead {
    pub gamma: Linear,
    pub beta: Linear,
}

impl FilmHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cond_width: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FilmHead {
            gamma: Linear::new(store, &format!("{name}.gamma"), cond_width, dim, true, Init::Zeros, rng)?,
            beta: Linear::new(store, &format!("{name}.beta"), cond_width, dim, true, Init::Zeros, rng)?,
        })
    }

    /// `(gamma, beta)`, each `[batch, dim]`.
    pub fn params<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, cond_vec: Var) -> Result<(Var, Var)> {
        let gm = self.gamma.forward(g, store, cond_vec)?;
        let gamma = g.add_scalar(gm, 1.0);
        let beta = self.beta.forward(g, store, cond_vec)?;
        Ok((gamma, beta))
    }
}

/// `gamma (.) h + beta` with one `(gamma, beta)` row per batch item.
pub fn modulate<T: Real>(g: &mut Graph<T>, normed: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = g.group_mul(normed, gamma)?;
    g.group_add(scaled, beta)
}

/// FiLM parameters for every head.
pub fn film_params<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, heads: &[FilmHead], cond_vec: Var) -> Result<Vec<(Var, Var)>> {
    heads.iter().map(|h| h.params(g, store, cond_vec)).collect()
}
