//! Iterative parallel decoding.
//!
//! Decoding starts from a partly or fully masked token grid. Each step runs
//! the predictor (twice with classifier-free guidance), samples a token for
//! every masked position, and commits the most confident samples until only
//! the schedule's masked count remains. Committed tokens never change.
//!
//! Re-entry for partially masked inputs: step `t` runs only when the
//! schedule's `masked_count(t)` lies strictly below the current masked count,
//! so decoding effectively starts at the first step whose count is below the
//! actual number of masked tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::MimModel;
use crate::conditioning::Conditioning;
use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::schedule::{Schedule, ScheduleShape};
use crate::tooling::PixelMask;
use crate::vq::{nearest_ids, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Guidance scale `s`; 1 disables the unconditional pass.
    pub cfg_scale: f64,
    /// Token sampling temperature; 0 means argmax.
    pub temperature: f64,
    /// Initial scale of the Gumbel noise on confidences, annealed to 0.
    pub noise_temperature: f64,
    pub seed: u64,
    pub shape: ScheduleShape,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 12, cfg_scale: 3.0, temperature: 1.0, noise_temperature: 1.0, seed: 0, shape: ScheduleShape::Cosine }
    }
}

impl SamplerConfig {
    /// Argmax decoding without confidence noise or guidance.
    pub fn greedy(steps: usize) -> Self {
        SamplerConfig { steps, cfg_scale: 1.0, temperature: 0.0, noise_temperature: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            bail!(Config, "sampler needs at least one step");
        }
        if !(self.temperature >= 0.0) || !(self.noise_temperature >= 0.0) || !(self.cfg_scale >= 0.0) {
            bail!(Config, "temperatures and guidance scale must be non-negative");
        }
        Ok(())
    }

    pub fn guided(&self) -> bool {
        self.cfg_scale != 1.0
    }

    /// Predictor calls per full decode of one batch.
    pub fn forwards_per_decode(&self) -> usize {
        if self.guided() {
            2 * self.steps
        } else {
            self.steps
        }
    }
}

/// Anything that maps a batch of token grids plus conditioning to logits.
pub trait TokenPredictor {
    /// Codebook size `V`; `V` itself is the MASK id.
    fn vocab_size(&self) -> usize;
    fn grid(&self) -> (usize, usize);
    /// Logits `[batch * tokens, V]`.
    fn predict(&self, tokens: &[usize], conds: &[Conditioning]) -> Result<Tensor<f32>>;
}

impl TokenPredictor for MimModel<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn grid(&self) -> (usize, usize) {
        (self.config.grid, self.config.grid)
    }

    fn predict(&self, tokens: &[usize], conds: &[Conditioning]) -> Result<Tensor<f32>> {
        self.logits(tokens, conds)
    }
}

/// `uncond + s * (cond - uncond)`, exact at `s = 0` and `s = 1`.
pub fn guided_logits(cond: &[f32], uncond: &[f32], s: f64) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        bail!(Dimension, "guidance inputs have {} and {} logits", cond.len(), uncond.len());
    }
    if s == 1.0 {
        return Ok(cond.to_vec());
    }
    if s == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| (u as f64 + s * (c as f64 - u as f64)) as f32).collect())
}

/// Draws one id from a logit row and reports its probability.
///
/// `temperature = 0` picks the argmax (lowest index on ties) and reports its
/// plain softmax probability; otherwise the id is sampled from
/// `softmax(logits / temperature)` and that distribution's probability is
/// reported.
pub fn sample_token(logits: &[f32], temperature: f64, rng: &mut impl Rng) -> Result<(usize, f64)> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "cannot sample from empty or non-finite logits");
    }
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let weights: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let id = if temperature > 0.0 {
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                chosen = i;
                break;
            }
            u -= w;
        }
        chosen
    } else {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    };
    Ok((id, weights[id] / total))
}

/// Per-position commitment state of one token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskState {
    pub height: usize,
    pub width: usize,
    pub fixed: Vec<bool>,
    /// Committed id at fixed positions; meaningless elsewhere.
    pub ids: Vec<usize>,
}

impl MaskState {
    pub fn all_masked(height: usize, width: usize) -> Self {
        MaskState { height, width, fixed: vec![false; height * width], ids: vec![0; height * width] }
    }

    /// Commits `source` everywhere except where `masked` is set.
    pub fn from_source(source: &TokenGrid, masked: &[bool]) -> Result<Self> {
        if masked.len() != source.len() {
            bail!(Dimension, "mask of {} entries for {} tokens", masked.len(), source.len());
        }
        Ok(MaskState {
            height: source.height,
            width: source.width,
            fixed: masked.iter().map(|&m| !m).collect(),
            ids: source.ids.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.fixed.iter().filter(|&&f| !f).count()
    }

    /// Model input with `mask_id` at unfixed positions.
    pub fn input_tokens(&self, mask_id: usize) -> Vec<usize> {
        self.fixed.iter().zip(&self.ids).map(|(&f, &i)| if f { i } else { mask_id }).collect()
    }

    pub fn to_grid(&self) -> Result<TokenGrid> {
        if self.masked_count() != 0 {
            bail!(Domain, "{} positions are still masked", self.masked_count());
        }
        TokenGrid::new(self.height, self.width, self.ids.clone())
    }
}

/// Commits the most confident masked positions until `target_masked` remain.
///
/// Scores are `ln(confidence) + noise_temperature * (1 - step/steps) * gumbel`,
/// with Gumbel noise drawn for every masked position in index order. Ties
/// prefer the lower index. `proposals[i]` is the id committed at position `i`.
#[allow(clippy::too_many_arguments)]
pub fn select_to_fix(
    confidences: &[f64],
    proposals: &[usize],
    state: &mut MaskState,
    target_masked: usize,
    noise_temperature: f64,
    step: usize,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if confidences.len() != state.len() || proposals.len() != state.len() {
        bail!(Dimension, "confidence/proposal length does not match the grid");
    }
    let masked = state.masked_count();
    if target_masked > masked {
        bail!(Domain, "target of {target_masked} masked exceeds the {masked} currently masked");
    }
    let anneal = noise_temperature * (1.0 - step as f64 / steps.max(1) as f64);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(masked);
    for i in (0..state.len()).filter(|&i| !state.fixed[i]) {
        let u: f64 = rng.gen();
        let gumbel = -(-(u.max(f64::MIN_POSITIVE)).ln()).ln();
        let score = confidences[i].ln() + if anneal > 0.0 { anneal * gumbel } else { 0.0 };
        scored.push((score, i));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in scored.iter().take(masked - target_masked) {
        state.fixed[i] = true;
        state.ids[i] = proposals[i];
    }
    Ok(())
}

/// Call accounting for a decode run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    /// Schedule steps visited.
    pub iterations: usize,
    /// Predictor calls, counting conditional and unconditional passes
    /// separately.
    pub forwards: usize,
}

/// Deterministic rng for batch item `item` under `seed`.
pub fn item_rng(seed: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item as u64);
    rng
}

/// Rng used to pick variation re-mask positions, independent of decoding.
fn remask_rng(seed: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | item as u64);
    rng
}

/// Callback receiving the step index and every state after that step.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &[MaskState]);

/// Runs the decode loop over a batch of states until all are committed.
///
/// `observe` sees every state after each step.
pub fn decode(
    model: &dyn TokenPredictor,
    conds: &[Conditioning],
    states: &mut [MaskState],
    cfg: &SamplerConfig,
    rngs: &mut [ChaCha8Rng],
    mut observe: Option<StepObserver<'_>>,
) -> Result<DecodeStats> {
    cfg.validate()?;
    let (gh, gw) = model.grid();
    let n = gh * gw;
    let v = model.vocab_size();
    if states.len() != conds.len() || rngs.len() != conds.len() {
        bail!(Dimension, "batch of {} conditions, {} states, {} rngs", conds.len(), states.len(), rngs.len());
    }
    if states.iter().any(|s| s.len() != n) {
        bail!(Dimension, "state size does not match the {gh}x{gw} grid");
    }
    let counts = Schedule::new(cfg.steps, cfg.shape)?.counts(n)?;
    let uncond: Vec<Conditioning> = conds.iter().map(Conditioning::unconditional).collect();
    let mut stats = DecodeStats::default();
    for t in 1..=cfg.steps {
        stats.iterations += 1;
        let active: Vec<usize> = (0..states.len()).filter(|&b| counts[t] < states[b].masked_count()).collect();
        if active.is_empty() {
            continue;
        }
        let tokens: Vec<usize> = states.iter().flat_map(|s| s.input_tokens(v)).collect();
        let cl = model.predict(&tokens, conds)?;
        stats.forwards += 1;
        let ul = if cfg.guided() {
            stats.forwards += 1;
            Some(model.predict(&tokens, &uncond)?)
        } else {
            None
        };
        for &b in &active {
            let state = &mut states[b];
            let mut conf = vec![0.0; n];
            let mut prop = vec![0; n];
            for i in (0..n).filter(|&i| !state.fixed[i]) {
                let row = b * n + i;
                let logits = match &ul {
                    Some(u) => guided_logits(cl.row(row), u.row(row), cfg.cfg_scale)?,
                    None => cl.row(row).to_vec(),
                };
                let (id, c) = sample_token(&logits, cfg.temperature, &mut rngs[b])?;
                prop[i] = id;
                conf[i] = c;
            }
            select_to_fix(&conf, &prop, state, counts[t], cfg.noise_temperature, t, cfg.steps, &mut rngs[b])?;
        }
        if let Some(f) = observe.as_mut() {
            f(t, states);
        }
    }
    if let Some(b) = states.iter().position(|s| s.masked_count() != 0) {
        bail!(Numeric, "item {b} still has masked tokens after decoding");
    }
    Ok(stats)
}

fn check_grid(model: &dyn TokenPredictor, grid: &TokenGrid) -> Result<()> {
    let (gh, gw) = model.grid();
    if (grid.height, grid.width) != (gh, gw) {
        bail!(Dimension, "token grid {}x{} does not match the model's {gh}x{gw}", grid.height, grid.width);
    }
    if grid.ids.iter().any(|&i| i >= model.vocab_size()) {
        bail!(Domain, "source token outside the codebook");
    }
    Ok(())
}

fn run(model: &dyn TokenPredictor, conds: &[Conditioning], mut states: Vec<MaskState>, cfg: &SamplerConfig, first_item: usize) -> Result<(Vec<TokenGrid>, DecodeStats)> {
    let mut rngs: Vec<ChaCha8Rng> = (0..conds.len()).map(|b| item_rng(cfg.seed, first_item + b)).collect();
    let stats = decode(model, conds, &mut states, cfg, &mut rngs, None)?;
    let grids = states.iter().map(MaskState::to_grid).collect::<Result<Vec<_>>>()?;
    Ok((grids, stats))
}

/// Generates one token grid per condition from an all-MASK start.
pub fn generate_batch(model: &dyn TokenPredictor, conds: &[Conditioning], cfg: &SamplerConfig) -> Result<(Vec<TokenGrid>, DecodeStats)> {
    let (gh, gw) = model.grid();
    run(model, conds, vec![MaskState::all_masked(gh, gw); conds.len()], cfg, 0)
}

pub fn generate(model: &dyn TokenPredictor, cond: &Conditioning, cfg: &SamplerConfig) -> Result<TokenGrid> {
    Ok(generate_batch(model, std::slice::from_ref(cond), cfg)?.0.remove(0))
}

/// Positions re-masked for a variation of the given strength:
/// `round(strength * N)` chosen uniformly without replacement.
pub fn variation_mask(tokens: usize, strength: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&strength) {
        bail!(Domain, "variation strength {strength} outside [0, 1]");
    }
    let count = (strength * tokens as f64).round() as usize;
    let mut mask = vec![false; tokens];
    for i in rand::seq::index::sample(&mut remask_rng(seed, 0), tokens, count).iter() {
        mask[i] = true;
    }
    Ok(mask)
}

/// Re-masks a random fraction of `source` and decodes it again.
pub fn vary(model: &dyn TokenPredictor, source: &TokenGrid, strength: f64, cond: &Conditioning, cfg: &SamplerConfig) -> Result<TokenGrid> {
    check_grid(model, source)?;
    let mask = variation_mask(source.len(), strength, cfg.seed)?;
    let state = MaskState::from_source(source, &mask)?;
    Ok(run(model, std::slice::from_ref(cond), vec![state], cfg, 0)?.0.remove(0))
}

/// Token mask covering every `factor x factor` patch that contains a masked
/// pixel.
pub fn project_mask(mask: &PixelMask, factor: usize, grid: (usize, usize)) -> Result<Vec<bool>> {
    let (gh, gw) = grid;
    if mask.height != gh * factor || mask.width != gw * factor {
        bail!(Dimension, "pixel mask {}x{} does not match a {gh}x{gw} grid at factor {factor}", mask.height, mask.width);
    }
    let mut out = vec![false; gh * gw];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.mask[y * mask.width + x] {
                out[(y / factor) * gw + x / factor] = true;
            }
        }
    }
    Ok(out)
}

/// Regenerates the tokens under `mask`, keeping every other token of
/// `source` exactly.
pub fn inpaint(model: &dyn TokenPredictor, source: &TokenGrid, mask: &PixelMask, factor: usize, cond: &Conditioning, cfg: &SamplerConfig) -> Result<TokenGrid> {
    check_grid(model, source)?;
    let tokens = project_mask(mask, factor, (source.height, source.width))?;
    let state = MaskState::from_source(source, &tokens)?;
    Ok(run(model, std::slice::from_ref(cond), vec![state], cfg, 0)?.0.remove(0))
}

/// Translates a token grid by `(dx, dy)` in latent space.
///
/// Tokens are looked up in `codebook`, bilinearly resampled at
/// `(x - dx, y - dy)` and snapped back to the nearest entry. Positions whose
/// resampling support (neighbours with nonzero weight) leaves the grid are
/// returned for re-masking.
pub fn warp_frame(tokens: &TokenGrid, codebook: &Tensor<f32>, shift: (f64, f64)) -> Result<(TokenGrid, Vec<usize>)> {
    let (h, w) = (tokens.height, tokens.width);
    let (dx, dy) = shift;
    if !(dx.abs() < w as f64 && dy.abs() < h as f64) {
        bail!(Domain, "shift ({dx}, {dy}) must be smaller than the {h}x{w} grid");
    }
    if let Some(bad) = tokens.ids.iter().find(|&&i| i >= codebook.rows()) {
        bail!(Domain, "token id {bad} outside codebook");
    }
    let d = codebook.cols();
    let mut field = vec![0.0f32; h * w * d];
    let mut remask = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x as f64 - dx, y as f64 - dy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let mut outside = false;
            let out = &mut field[(y * w + x) * d..(y * w + x + 1) * d];
            for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let (ny, nx) = (y0 + oy, x0 + ox);
                    if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
                        outside = true;
                        continue;
                    }
                    let src = codebook.row(tokens.ids[ny as usize * w + nx as usize]);
                    for (o, &s) in out.iter_mut().zip(src) {
                        *o += (wgt as f32) * s;
                    }
                }
            }
            if outside {
                remask.push(y * w + x);
            }
        }
    }
    let ids = nearest_ids(&Tensor::new(&[h * w, d], field)?, codebook)?;
    Ok((TokenGrid::new(h, w, ids)?, remask))
}

/// A frame sequence: a generated first frame, then each frame is the warped
/// previous one with its re-mask set decoded late in the schedule.
pub fn animate(
    model: &dyn TokenPredictor,
    codebook: &Tensor<f32>,
    cond: &Conditioning,
    frames: usize,
    shift: (f64, f64),
    cfg: &SamplerConfig,
) -> Result<Vec<TokenGrid>> {
    if frames == 0 {
        bail!(Domain, "animation needs at least one frame");
    }
    let mut out = vec![generate(model, cond, cfg)?];
    for k in 1..frames {
        let (warped, remask) = warp_frame(&out[k - 1], codebook, shift)?;
        let mut mask = vec![false; warped.len()];
        for i in remask {
            mask[i] = true;
        }
        let state = MaskState::from_source(&warped, &mask)?;
        out.push(run(model, std::slice::from_ref(cond), vec![state], cfg, k)?.0.remove(0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::MicroConditioning;
    use std::cell::Cell;

    /// Logits that depend on position, item content and caption, so that
    /// decoding is non-trivial but cheap.
    pub(crate) struct Mock {
        pub side: usize,
        pub v: usize,
        pub calls: Cell<usize>,
    }

    impl TokenPredictor for Mock {
        fn vocab_size(&self) -> usize {
            self.v
        }
        fn grid(&self) -> (usize, usize) {
            (self.side, self.side)
        }
        fn predict(&self, tokens: &[usize], conds: &[Conditioning]) -> Result<Tensor<f32>> {
            self.calls.set(self.calls.get() + 1);
            let n = self.side * self.side;
            assert_eq!(tokens.len(), n * conds.len());
            let committed: Vec<usize> = tokens.chunks(n).map(|item| item.iter().filter(|&&t| t < self.v).sum()).collect();
            Ok(Tensor::from_fn(&[tokens.len(), self.v], |k| {
                let (row, c) = (k / self.v, k % self.v);
                let cap = conds[row / n].caption[0] as f32;
                let committed = committed[row / n];
                ((((row % n) * 7 + c * 13 + committed) % 17) as f32 * 0.3 + cap * (c % 3) as f32 * 0.1).sin()
            }))
        }
    }

    fn mock(side: usize) -> Mock {
        Mock { side, v: 10, calls: Cell::new(0) }
    }

    fn cond() -> Conditioning {
        Conditioning::new(vec![3], MicroConditioning::full(32, 32, 0.5))
    }

    #[test]
    fn guidance_examples() {
        assert_eq!(guided_logits(&[1.0, -1.0], &[0.0, 0.0], 3.0).unwrap(), vec![3.0, -3.0]);
        assert_eq!(guided_logits(&[1.5, 2.0], &[0.25, 9.0], 1.0).unwrap(), vec![1.5, 2.0]);
        assert_eq!(guided_logits(&[1.5, 2.0], &[0.25, 9.0], 0.0).unwrap(), vec![0.25, 9.0]);
        assert!(guided_logits(&[1.0], &[1.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn argmax_sampling() {
        let mut rng = item_rng(0, 0);
        let (id, c) = sample_token(&[2.0, 1.0, 0.0], 0.0, &mut rng).unwrap();
        assert_eq!(id, 0);
        assert!((c - 0.6652).abs() < 1e-4);
        let (id, c) = sample_token(&[0.5; 8], 0.0, &mut rng).unwrap();
        assert_eq!(id, 0);
        assert_eq!(c, 1.0 / 8.0);
        let (_, c) = sample_token(&[0.5; 8], 0.7, &mut rng).unwrap();
        assert_eq!(c, 1.0 / 8.0);
        assert!(sample_token(&[f32::NAN], 1.0, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_follows_softmax() {
        let logits = [1.0f32, 0.0, -1.0];
        let draw = |seed| {
            let mut rng = item_rng(seed, 0);
            (0..50).map(|_| sample_token(&logits, 1.0, &mut rng).unwrap().0).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        let mut rng = item_rng(9, 0);
        let n = 200_000;
        let zeros = (0..n).filter(|_| sample_token(&logits, 1.0, &mut rng).unwrap().0 == 0).count();
        let p0 = 1.0 / (1.0 + (-1f64).exp() + (-2f64).exp());
        assert!((zeros as f64 / n as f64 - p0).abs() < 0.005);
    }

    #[test]
    fn fix_most_confident() {
        let mut s = MaskState::all_masked(2, 2);
        let mut rng = item_rng(0, 0);
        select_to_fix(&[0.9, 0.2, 0.8, 0.1], &[5, 6, 7, 8], &mut s, 2, 0.0, 1, 12, &mut rng).unwrap();
        assert_eq!(s.fixed, vec![true, false, true, false]);
        assert_eq!((s.ids[0], s.ids[2]), (5, 7));
        let before = s.clone();
        select_to_fix(&[0.9; 4], &[1; 4], &mut s, 2, 0.0, 2, 12, &mut rng).unwrap();
        assert_eq!(s, before);
        assert!(select_to_fix(&[0.9; 4], &[1; 4], &mut s, 3, 0.0, 2, 12, &mut rng).is_err());

        let mut s = MaskState::all_masked(1, 4);
        select_to_fix(&[0.5; 4], &[1; 4], &mut s, 1, 0.0, 1, 12, &mut rng).unwrap();
        assert_eq!(s.fixed, vec![true, true, true, false]);
    }

    #[test]
    fn forward_accounting_and_monotone_commitment() {
        for (side, steps) in [(4, 12), (4, 4), (8, 12), (2, 16)] {
            for scale in [1.0, 2.5] {
                let m = mock(side);
                let cfg = SamplerConfig { steps, cfg_scale: scale, seed: 5, ..SamplerConfig::default() };
                let mut states = vec![MaskState::all_masked(side, side)];
                let mut rngs = vec![item_rng(5, 0)];
                let mut prev = states[0].clone();
                let counts = Schedule::cosine(steps).unwrap().counts(side * side).unwrap();
                let mut obs = |t: usize, s: &[MaskState]| {
                    assert_eq!(s[0].masked_count(), counts[t]);
                    for i in 0..s[0].len() {
                        if prev.fixed[i] {
                            assert!(s[0].fixed[i]);
                            assert_eq!(s[0].ids[i], prev.ids[i]);
                        }
                    }
                    prev = s[0].clone();
                };
                let stats = decode(&m, &[cond()], &mut states, &cfg, &mut rngs, Some(&mut obs)).unwrap();
                assert_eq!(stats.iterations, steps);
                assert_eq!(states[0].masked_count(), 0);
                if side * side >= steps {
                    let want = if scale == 1.0 { steps } else { 2 * steps };
                    assert_eq!(stats.forwards, want);
                    assert_eq!(m.calls.get(), want);
                }
            }
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let m = mock(4);
        let cfg = SamplerConfig { seed: 3, ..SamplerConfig::default() };
        let a = generate(&m, &cond(), &cfg).unwrap();
        assert_eq!(a, generate(&m, &cond(), &cfg).unwrap());
        assert!(a.ids.iter().all(|&i| i < 10));
        let (batch, _) = generate_batch(&m, &[cond(), cond()], &cfg).unwrap();
        assert_eq!(batch[0], a);
    }

    #[test]
    fn variation_extremes() {
        let m = mock(4);
        let cfg = SamplerConfig { seed: 11, ..SamplerConfig::default() };
        let src = TokenGrid::new(4, 4, (0..16).map(|i| i % 10).collect()).unwrap();
        assert_eq!(vary(&m, &src, 0.0, &cond(), &cfg).unwrap(), src);
        assert_eq!(m.calls.get(), 0);
        assert_eq!(vary(&m, &src, 1.0, &cond(), &cfg).unwrap(), generate(&m, &cond(), &cfg).unwrap());
        let mask = variation_mask(16, 0.5, 11).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 8);
        let out = vary(&m, &src, 0.5, &cond(), &cfg).unwrap();
        for i in (0..16).filter(|&i| !mask[i]) {
            assert_eq!(out.ids[i], src.ids[i]);
        }
        assert!(vary(&m, &src, 1.5, &cond(), &cfg).is_err());
    }

    #[test]
    fn inpainting_projection_and_extremes() {
        let m = mock(4);
        let cfg = SamplerConfig { seed: 2, ..SamplerConfig::default() };
        let src = TokenGrid::new(4, 4, (0..16).map(|i| (i * 3) % 10).collect()).unwrap();
        let mut pm = PixelMask::empty(16, 16);
        pm.set(5, 6);
        let tok = project_mask(&pm, 4, (4, 4)).unwrap();
        assert_eq!(tok.iter().filter(|&&b| b).count(), 1);
        assert!(tok[5]);
        assert_eq!(inpaint(&m, &src, &PixelMask::empty(16, 16), 4, &cond(), &cfg).unwrap(), src);
        assert_eq!(inpaint(&m, &src, &PixelMask::full(16, 16), 4, &cond(), &cfg).unwrap(), generate(&m, &cond(), &cfg).unwrap());
        assert!(inpaint(&m, &src, &PixelMask::empty(12, 16), 4, &cond(), &cfg).is_err());
        let out = inpaint(&m, &src, &pm, 4, &cond(), &cfg).unwrap();
        for i in (0..16).filter(|&i| i != 5) {
            assert_eq!(out.ids[i], src.ids[i]);
        }
    }

    fn one_hot_codebook(v: usize) -> Tensor<f32> {
        Tensor::from_fn(&[v, v], |i| if i / v == i % v { 1.0 } else { 0.0 })
    }

    #[test]
    fn warp_integer_shifts() {
        let cb = one_hot_codebook(16);
        let grid = TokenGrid::new(4, 4, (0..16).collect()).unwrap();
        let (same, rm) = warp_frame(&grid, &cb, (0.0, 0.0)).unwrap();
        assert_eq!(same, grid);
        assert!(rm.is_empty());
        let (moved, rm) = warp_frame(&grid, &cb, (1.0, 0.0)).unwrap();
        assert_eq!(rm, vec![0, 4, 8, 12]);
        for y in 0..4 {
            for x in 1..4 {
                assert_eq!(moved.ids[y * 4 + x], grid.ids[y * 4 + x - 1]);
            }
        }
        let (_, rm) = warp_frame(&grid, &cb, (-1.0, 2.0)).unwrap();
        assert_eq!(rm.len(), 10);
        let (_, rm) = warp_frame(&grid, &cb, (0.5, 0.0)).unwrap();
        assert_eq!(rm, vec![0, 4, 8, 12]);
        assert!(warp_frame(&grid, &cb, (4.0, 0.0)).is_err());
    }

    #[test]
    fn animation() {
        let m = mock(4);
        let cb = one_hot_codebook(10);
        let cfg = SamplerConfig { seed: 8, ..SamplerConfig::default() };
        let one = animate(&m, &cb, &cond(), 1, (1.0, 0.0), &cfg).unwrap();
        assert_eq!(one, vec![generate(&m, &cond(), &cfg).unwrap()]);
        let still = animate(&m, &cb, &cond(), 3, (0.0, 0.0), &cfg).unwrap();
        assert!(still.iter().all(|f| *f == still[0]));
        let frames = animate(&m, &cb, &cond(), 3, (1.0, 0.0), &cfg).unwrap();
        for k in 0..2 {
            for y in 0..4 {
                for x in 1..4 {
                    assert_eq!(frames[k + 1].ids[y * 4 + x], frames[k].ids[y * 4 + x - 1]);
                }
            }
        }
        assert!(animate(&m, &cb, &cond(), 0, (0.0, 0.0), &cfg).is_err());
    }
}
