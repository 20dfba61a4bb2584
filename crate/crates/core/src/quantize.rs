//! Post-training int8 absmax quantization of projection weights.
//!
//! Each output row `i` of a weight matrix is stored as int8 values
//! `q_ij = round_half_away(W_ij / scale_i)` with `scale_i = max_j |W_ij| / 127`
//! stored as f32.
//! Rows that are entirely zero get `scale_i = 1`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::MimModel;
use crate::error::{bail, Result};
use crate::numerics::{Graph, Real, Tensor};

const QMAX: f64 = 127.0;

/// Int8 weight matrix with one `f32` scale per output row.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    rows: usize,
    cols: usize,
    ints: Vec<i8>,
    scales: Vec<f32>,
}

impl QuantizedLinear {
    pub fn from_parts(rows: usize, cols: usize, ints: Vec<i8>, scales: Vec<f32>) -> Result<Self> {
        if ints.len() != rows * cols || scales.len() != rows {
            bail!(Dimension, "quantized blob sizes do not match {rows}x{cols}");
        }
        if ints.contains(&i8::MIN) {
            bail!(Format, "int8 value -128 outside the symmetric range");
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            bail!(Format, "quantization scales must be positive and finite");
        }
        Ok(QuantizedLinear { rows, cols, ints, scales })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ints(&self) -> &[i8] {
        &self.ints
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// `q_ij * scale_i` as a dense `[rows, cols]` tensor.
    pub fn dequantize<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.rows, self.cols], |i| {
            T::lit(self.ints[i] as f64) * T::lit(self.scales[i / self.cols] as f64)
        })
    }

    /// Storage size: one byte per weight plus four per row scale.
    pub fn bytes(&self) -> usize {
        self.ints.len() + 4 * self.scales.len()
    }
}

/// Quantizes a `[d_out, d_in]` weight matrix row by row.
pub fn quantize_linear<T: Real>(w: &Tensor<T>) -> Result<QuantizedLinear> {
    if !w.is_finite() {
        bail!(Numeric, "cannot quantize non-finite weights");
    }
    let (rows, cols) = (w.rows(), w.cols());
    let mut ints = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.row(r);
        let amax = row.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
        if amax == 0.0 {
            scales.push(1.0);
            ints.extend(std::iter::repeat_n(0i8, cols));
            continue;
        }
        let scale = (amax / QMAX) as f32;
        scales.push(scale);
        // Round against the stored f32 scale rather than the exact one.
        // f64::round rounds half away from zero.
        ints.extend(row.iter().map(|v| (v.as_f64() / scale as f64).round().clamp(-QMAX, QMAX) as i8));
    }
    QuantizedLinear::from_parts(rows, cols, ints, scales)
}

/// `y = x @ dequant(q)^T + bias`, accumulating against the raw int8 values
/// and applying each row scale to the finished dot product.
pub fn dequant_matmul<T: Real>(x: &Tensor<T>, q: &QuantizedLinear, bias: Option<&[f32]>) -> Result<Tensor<T>> {
    if x.cols() != q.cols {
        bail!(Dimension, "dequant_matmul: input width {} vs weight {}x{}", x.cols(), q.rows, q.cols);
    }
    if let Some(b) = bias {
        if b.len() != q.rows {
            bail!(Dimension, "dequant_matmul: bias has {} entries, expected {}", b.len(), q.rows);
        }
    }
    let n = x.rows();
    let raw = Tensor::<T>::from_fn(&[q.rows, q.cols], |i| T::lit(q.ints[i] as f64));
    let mut g = Graph::no_grad();
    let (xv, wv) = (g.constant(x.clone()), g.constant(raw));
    let acc = g.linear(xv, wv, None)?;
    let mut y = g.value(acc).clone().into_data();
    for row in y.chunks_exact_mut(q.rows) {
        for (j, o) in row.iter_mut().enumerate() {
            *o *= T::lit(q.scales[j] as f64);
            if let Some(b) = bias {
                *o += T::lit(b[j] as f64);
            }
        }
    }
    Tensor::new(&[n, q.rows], y)
}

/// Per-layer line of a [`QuantReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub bytes_before: usize,
    pub bytes_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub layers: Vec<QuantizedLayer>,
    pub bytes_before: usize,
    pub bytes_after: usize,
}

impl QuantReport {
    pub fn ratio(&self) -> f64 {
        self.bytes_after as f64 / self.bytes_before.max(1) as f64
    }
}

/// Default target set: attention projections and feed-forward layers of the
/// transformer core.
pub fn is_projection_layer(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or("");
    name.starts_with("backbone.blocks.")
        && (name.contains(".attn.") || name.contains(".cross.") || name.contains(".mlp."))
        && matches!(leaf, "q" | "k" | "v" | "o" | "fc1" | "fc2")
}

/// Replaces every linear layer accepted by `filter` with its int8 form.
pub fn quantize_model(model: &mut MimModel<f32>, filter: impl Fn(&str) -> bool) -> Result<QuantReport> {
    if model.is_quantized() {
        bail!(Domain, "model is already quantized");
    }
    if model.has_lora() {
        bail!(Domain, "merge LoRA adapters before quantizing");
    }
    let mut layers = Vec::new();
    let (store, linears) = model.store_and_linears_mut();
    for lin in linears {
        if !filter(&lin.name) {
            continue;
        }
        let w = store.tensor(lin.weight);
        let q = quantize_linear(w)?;
        layers.push(QuantizedLayer {
            name: lin.name.clone(),
            rows: q.rows(),
            cols: q.cols(),
            bytes_before: w.len() * 4,
            bytes_after: q.bytes(),
        });
        *store.tensor_mut(lin.weight) = Tensor::zeros(&[0, lin.d_in]);
        store.set_trainable(lin.weight, false);
        lin.quant = Some(Arc::new(q));
    }
    if layers.is_empty() {
        bail!(Config, "quantization filter matched no layers");
    }
    let bytes_before = layers.iter().map(|l| l.bytes_before).sum();
    let bytes_after = layers.iter().map(|l| l.bytes_after).sum();
    Ok(QuantReport { layers, bytes_before, bytes_after })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_row() {
        let w = Tensor::<f32>::from_f64(&[1, 3], &[0.5, -1.0, 0.25]).unwrap();
        let q = quantize_linear(&w).unwrap();
        assert_eq!(q.ints(), &[64, -127, 32]);
        assert!((q.scales()[0] as f64 - 1.0 / 127.0).abs() < 1e-9);
        let d: Tensor<f64> = q.dequantize();
        let want = [64.0 / 127.0, -1.0, 32.0 / 127.0];
        for (a, b) in d.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((d.data()[0] - 0.50394).abs() < 1e-5);
        assert!((d.data()[2] - 0.25197).abs() < 1e-5);
    }

    #[test]
    fn zero_row_and_constant_row() {
        let w = Tensor::<f32>::from_f64(&[2, 3], &[0.0, 0.0, 0.0, 0.3, 0.3, 0.3]).unwrap();
        let q = quantize_linear(&w).unwrap();
        assert_eq!(q.scales()[0], 1.0);
        assert_eq!(&q.ints()[..3], &[0, 0, 0]);
        assert_eq!(&q.ints()[3..], &[127, 127, 127]);
        let d: Tensor<f32> = q.dequantize();
        assert_eq!(&d.data()[..3], &[0.0, 0.0, 0.0]);
        for v in &d.data()[3..] {
            assert!((v - 0.3).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_input_gives_bias_and_identity_is_exact() {
        let eye = Tensor::<f32>::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let q = quantize_linear(&eye).unwrap();
        assert_eq!(q.dequantize::<f32>(), eye);
        let bias = [0.5f32, -1.0, 2.0];
        let zero = Tensor::<f32>::zeros(&[2, 3]);
        let y = dequant_matmul(&zero, &q, Some(&bias)).unwrap();
        assert_eq!(y.row(1), &bias);
        let x = Tensor::<f32>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let y = dequant_matmul(&x, &q, Some(&bias)).unwrap();
        assert_eq!(y.data(), &[1.5, 1.0, 5.0]);
    }

    #[test]
    fn projection_filter() {
        assert!(is_projection_layer("backbone.blocks.0.attn.q"));
        assert!(is_projection_layer("backbone.blocks.3.mlp.fc2"));
        assert!(is_projection_layer("backbone.blocks.1.cross.o"));
        assert!(!is_projection_layer("backbone.blocks.1.film.gamma"));
        assert!(!is_projection_layer("backbone.head"));
        assert!(!is_projection_layer("backbone.pre.0.conv1"));
    }

    proptest! {
        #[test]
        fn dequant_error_within_half_scale(vals in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            let cols = vals.len();
            let w = Tensor::new(&[1, cols], vals).unwrap();
            let q = quantize_linear(&w).unwrap();
            let s = q.scales()[0] as f64;
            let d: Tensor<f64> = q.dequantize();
            for (a, b) in d.data().iter().zip(w.data()) {
                prop_assert!((a - *b as f64).abs() <= s / 2.0 * (1.0 + 1e-12));
            }
            prop_assert!(q.ints().iter().all(|v| (-127..=127).contains(v)));
        }

        #[test]
        fn row_order_does_not_matter(vals in prop::collection::vec(-1.0f32..1.0, 12)) {
            let w = Tensor::new(&[3, 4], vals.clone()).unwrap();
            let mut swapped = vals[8..].to_vec();
            swapped.extend_from_slice(&vals[4..8]);
            swapped.extend_from_slice(&vals[..4]);
            let ws = Tensor::new(&[3, 4], swapped).unwrap();
            let (a, b) = (quantize_linear(&w).unwrap(), quantize_linear(&ws).unwrap());
            prop_assert_eq!(&a.ints()[..4], &b.ints()[8..]);
            prop_assert_eq!(a.scales()[0], b.scales()[2]);
        }
    }
}
