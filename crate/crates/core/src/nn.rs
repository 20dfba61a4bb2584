//! Parameterised layers shared by the tokenizer and the backbone.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{ConvGeom, Graph, ParamId, ParamStore, Real, Tensor, Var, LAYER_NORM_EPS};
use crate::quantize::QuantizedLinear;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

pub fn init_tensor<T: Real>(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
        }
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
    }
}

/// Low-rank delta `(alpha / rank) * B A` attached to a [`Linear`].
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Affine map `x W^T + b` with `W` stored `[d_out, d_in]`.
///
/// The weight may carry a LoRA adapter or be replaced by an int8 copy.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
    pub quant: Option<Arc<QuantizedLinear>>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(name, init_tensor(&[d_out, d_in], init, rng), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true)?)
        } else {
            None
        };
        Ok(Linear { name: name.to_string(), weight, bias, d_in, d_out, lora: None, quant: None })
    }

    /// Default fan-in scaled initialisation.
    pub fn fan_in<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, name, d_in, d_out, true, Init::Normal(1.0 / (d_in as f64).sqrt()), rng)
    }

    /// Effective dense weight `W + (alpha/r) B A` inside the graph.
    pub fn weight_var<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var> {
        let w = g.param(store, self.weight);
        match &self.lora {
            None => Ok(w),
            Some(l) => {
                let (a, b) = (g.param(store, l.a), g.param(store, l.b));
                let ba = g.matmul(b, a)?;
                let delta = g.scale(ba, l.scaling());
                g.add(w, delta)
            }
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let bias = self.bias.map(|b| g.param(store, b));
        if let Some(q) = &self.quant {
            let y = g.quant_linear(x, q.clone())?;
            return match bias {
                Some(b) => g.group_add(y, b),
                None => Ok(y),
            };
        }
        let w = self.weight_var(g, store)?;
        g.linear(x, w, bias)
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one()), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, Some(gain), Some(bias), LAYER_NORM_EPS)
    }
}

/// Square-kernel convolution on channel-last maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub linear: Linear,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * c_in;
        let linear = Linear::fan_in(store, name, fan_in, c_out, rng)?;
        Ok(Conv { linear, c_in, kernel, stride })
    }

    /// Applies the convolution to a `[batch*height*width, c_in]` map.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, batch: usize, height: usize, width: usize) -> Result<Var> {
        let geom = ConvGeom { batch, height, width, channels: self.c_in, kernel: self.kernel, stride: self.stride };
        let cols = g.im2col(x, geom)?;
        self.linear.forward(g, store, cols)
    }
}

/// `h + conv(silu(norm(conv(silu(norm(h))))))` at constant width.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv,
    norm2: LayerNorm,
    conv2: Conv,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(ResBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, batch: usize, height: usize, width: usize) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h, batch, height, width)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h, batch, height, width)?;
        g.add(x, h)
    }
}
