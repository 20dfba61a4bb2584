//! Convolutional VQ autoencoder.
//!
//! The encoder maps an `H x W` image to an `H/f x W/f x D` latent field, each
//! latent vector snaps to its nearest codebook entry, and the decoder maps the
//! quantized field back to pixels. Training uses reconstruction, codebook and
//! commitment terms with a straight-through gradient around the lookup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{Conv, ResBlock};
use crate::numerics::{Graph, MapGeom, ParamId, ParamStore, Real, Tensor, Var};
use crate::tooling::Image;
use crate::training::{Adam, AdamConfig};

/// Discrete latent image: `height x width` codebook ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<usize>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != height * width {
            bail!(Dimension, "{} ids for a {height}x{width} grid", ids.len());
        }
        Ok(TokenGrid { height, width, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fraction of positions holding the same id as `other`.
    pub fn agreement(&self, other: &TokenGrid) -> f64 {
        let same = self.ids.iter().zip(&other.ids).filter(|(a, b)| a == b).count();
        same as f64 / self.ids.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    /// Codebook size `V`.
    pub vocab_size: usize,
    /// Codebook entry width `D`.
    pub dim: usize,
    /// Spatial downsample factor `f`, a power of two.
    pub downsample: usize,
    /// Channel width of the convolutional trunk.
    pub hidden: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { vocab_size: 256, dim: 16, downsample: 4, hidden: 16 }
    }
}

impl VqConfig {
    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            bail!(Config, "codebook needs at least 2 entries");
        }
        if self.dim == 0 || self.hidden == 0 {
            bail!(Config, "codebook dim and hidden width must be positive");
        }
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            bail!(Config, "downsample factor {} is not a power of two >= 2", self.downsample);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqTrainConfig {
    /// Commitment weight.
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig { beta: 0.25, lr: 2e-3, steps: 2000, batch_size: 8, seed: 0 }
    }
}

/// Index of the nearest codebook row to each row of `field` by squared
/// Euclidean distance. Ties go to the lowest index.
pub fn nearest_ids<T: Real>(field: &Tensor<T>, codebook: &Tensor<T>) -> Result<Vec<usize>> {
    if field.cols() != codebook.cols() {
        bail!(Dimension, "field width {} vs codebook width {}", field.cols(), codebook.cols());
    }
    let mut ids = Vec::with_capacity(field.rows());
    for r in 0..field.rows() {
        let z = field.row(r);
        let mut best = (0, T::infinity());
        for i in 0..codebook.rows() {
            let d = z.iter().zip(codebook.row(i)).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
            if d < best.1 {
                best = (i, d);
            }
        }
        ids.push(best.0);
    }
    Ok(ids)
}

/// Loss terms of one batch, each averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// Graph handles for the loss terms.
pub struct VqLossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
}

/// `||x - x_hat||^2 + ||sg[z] - e||^2 + beta ||z - sg[e]||^2`, each sum
/// divided by `batch`.
pub fn vq_loss<T: Real>(g: &mut Graph<T>, x: Var, recon: Var, z: Var, e: Var, beta: f64, batch: usize) -> Result<VqLossVars> {
    let inv = 1.0 / batch.max(1) as f64;
    let d = g.sub(x, recon)?;
    let rec = g.sum_sq(d)?;
    let reconstruction = g.scale(rec, inv);
    let zs = g.detach(z);
    let d = g.sub(zs, e)?;
    let cb = g.sum_sq(d)?;
    let codebook = g.scale(cb, inv);
    let es = g.detach(e);
    let d = g.sub(z, es)?;
    let cm = g.sum_sq(d)?;
    let commitment = g.scale(cm, inv);
    let weighted = g.scale(commitment, beta);
    let total = g.add(reconstruction, codebook)?;
    let total = g.add(total, weighted)?;
    Ok(VqLossVars { total, reconstruction, codebook, commitment })
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    res: ResBlock,
}

/// Encoder, codebook and decoder with their parameters.
#[derive(Clone, Debug)]
pub struct VqModel<T: Real = f32> {
    pub config: VqConfig,
    pub store: ParamStore<T>,
    codebook: ParamId,
    enc_in: Conv,
    enc: Vec<Stage>,
    enc_out: Conv,
    dec_in: Conv,
    dec: Vec<Stage>,
    dec_out: Conv,
}

/// Intermediate values of one autoencoder pass.
pub struct VqForward {
    pub field: Var,
    pub quantized: Var,
    pub recon: Var,
    pub ids: Vec<usize>,
}

impl<T: Real> VqModel<T> {
    pub fn build(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, v, d) = (config.hidden, config.vocab_size, config.dim);
        let bound = 1.0 / v as f64;
        let cb = Tensor::from_fn(&[v, d], |_| T::lit(rng.gen_range(-bound..bound)));
        let codebook = store.add("vq.codebook", cb, true)?;
        let enc_in = Conv::new(&mut store, "vq.enc.in", 3, c, 3, 1, &mut rng)?;
        let enc = (0..config.levels())
            .map(|i| {
                Ok(Stage {
                    conv: Conv::new(&mut store, &format!("vq.enc.{i}.down"), c, c, 3, 2, &mut rng)?,
                    res: ResBlock::new(&mut store, &format!("vq.enc.{i}.res"), c, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_out = Conv::new(&mut store, "vq.enc.out", c, d, 1, 1, &mut rng)?;
        let dec_in = Conv::new(&mut store, "vq.dec.in", d, c, 3, 1, &mut rng)?;
        let dec = (0..config.levels())
            .map(|i| {
                Ok(Stage {
                    res: ResBlock::new(&mut store, &format!("vq.dec.{i}.res"), c, &mut rng)?,
                    conv: Conv::new(&mut store, &format!("vq.dec.{i}.up"), c, c, 3, 1, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv::new(&mut store, "vq.dec.out", c, 3, 3, 1, &mut rng)?;
        Ok(VqModel { config, store, codebook, enc_in, enc, enc_out, dec_in, dec, dec_out })
    }

    pub fn codebook(&self) -> &Tensor<T> {
        self.store.tensor(self.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// Token grid extent for an image of the given size.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.config.downsample;
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) || height == 0 || width == 0 {
            bail!(Config, "image {height}x{width} not divisible by downsample factor {f}");
        }
        Ok((height / f, width / f))
    }

    fn images_var(g: &mut Graph<T>, images: &[Image]) -> Result<(Var, usize, usize)> {
        let Some(first) = images.first() else { bail!(Dimension, "empty image batch") };
        let (h, w) = (first.height, first.width);
        if images.iter().any(|im| (im.height, im.width) != (h, w)) {
            bail!(Dimension, "images in a batch must share one size");
        }
        let data = images.iter().flat_map(|im| im.pixels.iter().map(|&p| T::lit(p as f64))).collect();
        Ok((g.constant(Tensor::new(&[images.len() * h * w, 3], data)?), h, w))
    }

    /// Continuous latent field `[batch * h/f * w/f, D]`.
    pub fn encode_var(&self, g: &mut Graph<T>, x: Var, batch: usize, height: usize, width: usize) -> Result<Var> {
        self.grid_for(height, width)?;
        let s = &self.store;
        let mut h = self.enc_in.forward(g, s, x, batch, height, width)?;
        let (mut hh, mut ww) = (height, width);
        for stage in &self.enc {
            h = stage.conv.forward(g, s, h, batch, hh, ww)?;
            hh /= 2;
            ww /= 2;
            h = g.silu(h);
            h = stage.res.forward(g, s, h, batch, hh, ww)?;
        }
        self.enc_out.forward(g, s, h, batch, hh, ww)
    }

    /// Pixels `[batch * H * W, 3]` from a quantized field, unclamped.
    pub fn decode_var(&self, g: &mut Graph<T>, q: Var, batch: usize, gh: usize, gw: usize) -> Result<Var> {
        let s = &self.store;
        let mut h = self.dec_in.forward(g, s, q, batch, gh, gw)?;
        let (mut hh, mut ww) = (gh, gw);
        for stage in &self.dec {
            h = stage.res.forward(g, s, h, batch, hh, ww)?;
            h = g.silu(h);
            h = g.upsample2x(h, MapGeom { batch, height: hh, width: ww })?;
            hh *= 2;
            ww *= 2;
            h = stage.conv.forward(g, s, h, batch, hh, ww)?;
        }
        self.dec_out.forward(g, s, h, batch, hh, ww)
    }

    /// Full pass with straight-through quantization.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, batch: usize, height: usize, width: usize) -> Result<VqForward> {
        let (gh, gw) = self.grid_for(height, width)?;
        let field = self.encode_var(g, x, batch, height, width)?;
        let ids = nearest_ids(g.value(field), self.codebook())?;
        let cb = g.param(&self.store, self.codebook);
        let e = g.gather_rows(cb, &ids)?;
        let st = g.straight_through(field, e)?;
        let recon = self.decode_var(g, st, batch, gh, gw)?;
        Ok(VqForward { field, quantized: e, recon, ids })
    }

    /// Latent field of one image, `[h/f * w/f, D]`.
    pub fn encode(&self, image: &Image) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let (x, h, w) = Self::images_var(&mut g, std::slice::from_ref(image))?;
        let z = self.encode_var(&mut g, x, 1, h, w)?;
        Ok(g.value(z).clone())
    }

    /// Token grid and quantized field for a latent field of `gh x gw`.
    pub fn quantize(&self, field: &Tensor<T>, gh: usize, gw: usize) -> Result<(TokenGrid, Tensor<T>)> {
        let ids = nearest_ids(field, self.codebook())?;
        let grid = TokenGrid::new(gh, gw, ids)?;
        let q = self.lookup(&grid)?;
        Ok((grid, q))
    }

    /// Codebook rows for every id of `grid`.
    pub fn lookup(&self, grid: &TokenGrid) -> Result<Tensor<T>> {
        let cb = self.codebook();
        let d = cb.cols();
        let mut out = Vec::with_capacity(grid.len() * d);
        for &i in &grid.ids {
            if i >= cb.rows() {
                bail!(Domain, "token id {i} outside codebook of {}", cb.rows());
            }
            out.extend_from_slice(cb.row(i));
        }
        Tensor::new(&[grid.len(), d], out)
    }

    pub fn tokenize(&self, image: &Image) -> Result<TokenGrid> {
        let (gh, gw) = self.grid_for(image.height, image.width)?;
        let field = self.encode(image)?;
        Ok(self.quantize(&field, gh, gw)?.0)
    }

    /// Pixels for a token grid, clamped to `[0, 1]`.
    pub fn decode(&self, grid: &TokenGrid) -> Result<Image> {
        let q = self.lookup(grid)?;
        let mut g = Graph::no_grad();
        let qv = g.constant(q);
        let out = self.decode_var(&mut g, qv, 1, grid.height, grid.width)?;
        let f = self.config.downsample;
        let pixels = g.value(out).data().iter().map(|v| v.as_f64().clamp(0.0, 1.0) as f32).collect();
        Image::new(grid.height * f, grid.width * f, pixels)
    }

    /// Loss terms on a batch without updating anything.
    pub fn evaluate(&self, images: &[Image], beta: f64) -> Result<VqLoss> {
        let mut g = Graph::no_grad();
        let (x, h, w) = Self::images_var(&mut g, images)?;
        let fwd = self.forward(&mut g, x, images.len(), h, w)?;
        let l = vq_loss(&mut g, x, fwd.recon, fwd.field, fwd.quantized, beta, images.len())?;
        let val = |v: Var| g.value(v).data()[0].as_f64();
        Ok(VqLoss { total: val(l.total), reconstruction: val(l.reconstruction), codebook: val(l.codebook), commitment: val(l.commitment) })
    }

    pub fn cast<U: Real>(&self) -> VqModel<U> {
        VqModel {
            config: self.config,
            store: self.store.cast(),
            codebook: self.codebook,
            enc_in: self.enc_in.clone(),
            enc: self.enc.clone(),
            enc_out: self.enc_out.clone(),
            dec_in: self.dec_in.clone(),
            dec: self.dec.clone(),
            dec_out: self.dec_out.clone(),
        }
    }
}

/// Outcome of [`train_vq`].
#[derive(Clone, Debug, PartialEq)]
pub struct VqTrainReport {
    pub losses: Vec<f64>,
    /// How many training-set positions map to each codebook entry.
    pub usage: Vec<usize>,
}

impl VqTrainReport {
    pub fn dead_entries(&self) -> usize {
        self.usage.iter().filter(|&&u| u == 0).count()
    }
}

/// Exponential moving average of a loss curve.
pub fn smooth(losses: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = None;
    for &l in losses {
        let v = match acc {
            None => l,
            Some(a) => decay * a + (1.0 - decay) * l,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}

/// Trains the autoencoder on `images`.
///
/// Before the first step the codebook is seeded with latent vectors drawn
/// from the untrained encoder's output on the training set.
pub fn train_vq(model: &mut VqModel<f32>, images: &[Image], cfg: &VqTrainConfig) -> Result<VqTrainReport> {
    if images.is_empty() {
        bail!(Domain, "VQ training needs at least one image");
    }
    if !(cfg.beta > 0.0) || !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        bail!(Config, "VQ training needs beta > 0, lr > 0 and batch_size >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    seed_codebook(model, images, &mut rng)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Image> = (0..cfg.batch_size).map(|_| images[rng.gen_range(0..images.len())].clone()).collect();
        let mut g = Graph::new();
        let (x, h, w) = VqModel::images_var(&mut g, &batch)?;
        let fwd = model.forward(&mut g, x, batch.len(), h, w)?;
        let l = vq_loss(&mut g, x, fwd.recon, fwd.field, fwd.quantized, cfg.beta, batch.len())?;
        let loss = g.value(l.total).data()[0] as f64;
        if !loss.is_finite() {
            bail!(Divergence, "VQ loss became {loss} at step {step}");
        }
        let grads = g.backward(l.total)?;
        adam.step(&mut model.store, &grads)?;
        losses.push(loss);
    }
    let mut usage = vec![0; model.config.vocab_size];
    for im in images {
        for id in model.tokenize(im)?.ids {
            usage[id] += 1;
        }
    }
    Ok(VqTrainReport { losses, usage })
}

fn seed_codebook(model: &mut VqModel<f32>, images: &[Image], rng: &mut ChaCha8Rng) -> Result<()> {
    let mut pool = Vec::new();
    for im in images {
        let z = model.encode(im)?;
        pool.extend((0..z.rows()).map(|r| z.row(r).to_vec()));
    }
    let id = model.codebook;
    let cb = model.store.tensor_mut(id);
    for i in 0..cb.rows() {
        let src = &pool[rng.gen_range(0..pool.len())];
        for (dst, &s) in cb.row_mut(i).iter_mut().zip(src) {
            *dst = s + rng.gen_range(-0.01..0.01);
        }
    }
    Ok(())
}
