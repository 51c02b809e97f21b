use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DenseArray, Scalar, TensorPack};
use crate::error::{config, numeric, shape, Result};

const LN_EPS: f64 = 1e-5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Where the optional LayerNorm sits inside each hidden block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `gelu(norm(W h + b))`
    PreActivation,
    /// `norm(gelu(W h + b))`
    PostActivation,
}

/// Architecture of a GELU MLP whose trailing scalar inputs are lifted through
/// a Fourier embedding before the first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Width of the raw, non-time input block.
    pub input_width: usize,
    /// Number of scalar time inputs, each embedded separately.
    pub time_axes: usize,
    /// Fourier features per time axis (sine/cosine pairs, so even).
    pub time_features: usize,
    /// Highest embedding frequency; frequencies are log-spaced in `[1, max]`.
    pub max_frequency: f64,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    #[serde(default)]
    pub layer_norm: Option<NormPlacement>,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_width + self.time_axes == 0 {
            return config("MLP needs at least one input");
        }
        if self.output_width == 0 || self.hidden.contains(&0) {
            return config("MLP layer widths must be positive");
        }
        if self.time_axes > 0 && (self.time_features == 0 || !self.time_features.is_multiple_of(2)) {
            return config("time_features must be a positive even number");
        }
        if self.time_axes > 0 && !(self.max_frequency >= 1.0 && self.max_frequency.is_finite()) {
            return config("max_frequency must be a finite value >= 1");
        }
        if self.layer_norm.is_some() && self.hidden.is_empty() {
            return config("layer_norm requires at least one hidden layer");
        }
        Ok(())
    }

    /// Width of the first layer's input after time embedding.
    pub fn embedded_width(&self) -> usize {
        self.input_width + self.time_axes * self.time_features
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let m = self.time_features / 2;
        match m {
            0 => Vec::new(),
            1 => vec![1.0],
            _ => (0..m)
                .map(|i| (self.max_frequency.ln() * i as f64 / (m - 1) as f64).exp())
                .collect(),
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.embedded_width()];
        w.extend(&self.hidden);
        w.push(self.output_width);
        w
    }
}

/// Location of one named parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct LayerIndex {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
}

/// Dense GELU network with a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Mlp<T: Scalar = f32> {
    spec: MlpSpec,
    slots: Vec<TensorSlot>,
    layers: Vec<LayerIndex>,
    freqs: Vec<T>,
    params: Vec<T>,
}

/// Input-space direction for a Jacobian-vector product.
#[derive(Clone, Copy, Debug)]
pub struct Tangent<'a, T: Scalar> {
    pub inputs: &'a DenseArray<T>,
    pub times: &'a DenseArray<T>,
}

/// Network output together with its directional derivative, when requested.
#[derive(Clone, Debug)]
pub struct DualOutput<T: Scalar> {
    pub value: DenseArray<T>,
    pub tangent: Option<DenseArray<T>>,
}

#[derive(Clone, Debug)]
struct NormTape<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
struct LayerTape<T> {
    input: Vec<T>,
    input_dot: Option<Vec<T>>,
    pre_dot: Option<Vec<T>>,
    /// First and second GELU derivatives at the activation's argument.
    d1: Vec<T>,
    d2: Vec<T>,
    norm: Option<NormTape<T>>,
}

/// Intermediate values recorded by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    batch: usize,
    layers: Vec<LayerTape<T>>,
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::ONE + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    x * cdf
}

#[cfg(test)]
fn gelu_d1<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::ONE + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::of(FRAC_1_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp();
    cdf + x * pdf
}

#[cfg(test)]
fn gelu_d2<T: Scalar>(x: T) -> T {
    let pdf = T::of(FRAC_1_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp();
    pdf * (T::of(2.0) - x * x)
}

/// GELU of every element and, if `derivs`, its first and second derivatives,
/// sharing one `erf` and one `exp` per element.
fn gelu_block<T: Scalar>(x: &[T], derivs: bool) -> (Vec<T>, Vec<T>, Vec<T>) {
    if !derivs {
        return (x.iter().map(|&v| gelu(v)).collect(), Vec::new(), Vec::new());
    }
    let mut out = Vec::with_capacity(x.len());
    let mut d1 = Vec::with_capacity(x.len());
    let mut d2 = Vec::with_capacity(x.len());
    for &v in x {
        let cdf = T::of(0.5) * (T::ONE + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
        let pdf = T::of(FRAC_1_SQRT_2PI) * (-(v * v) * T::of(0.5)).exp();
        out.push(v * cdf);
        d1.push(cdf + v * pdf);
        d2.push(pdf * (T::of(2.0) - v * v));
    }
    (out, d1, d2)
}

impl<T: Scalar> Mlp<T> {
    /// Network with every parameter zero (LayerNorm gains are one).
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut slots = Vec::new();
        let mut layers = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, slots: &mut Vec<TensorSlot>| {
            let at = offset;
            offset += shape.iter().product::<usize>();
            slots.push(TensorSlot {
                name,
                shape,
                offset: at,
            });
            at
        };
        let nlayers = widths.len() - 1;
        for l in 0..nlayers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let weight = push(
                format!("layers.{l}.weight"),
                vec![fan_out, fan_in],
                &mut slots,
            );
            let bias = push(format!("layers.{l}.bias"), vec![fan_out], &mut slots);
            let norm = if spec.layer_norm.is_some() && l + 1 < nlayers {
                let g = push(format!("layers.{l}.ln_gain"), vec![fan_out], &mut slots);
                let s = push(format!("layers.{l}.ln_shift"), vec![fan_out], &mut slots);
                Some((g, s))
            } else {
                None
            };
            layers.push(LayerIndex {
                fan_in,
                fan_out,
                weight,
                bias,
                norm,
            });
        }
        let mut params = vec![T::ZERO; offset];
        for layer in &layers {
            if let Some((g, _)) = layer.norm {
                params[g..g + layer.fan_out].fill(T::ONE);
            }
        }
        let freqs = spec.frequencies().into_iter().map(T::of).collect();
        Ok(Self {
            spec,
            slots,
            layers,
            freqs,
            params,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for l in 0..net.layers.len() {
            let layer = net.layers[l].clone();
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for i in 0..layer.fan_in * layer.fan_out {
                net.params[layer.weight + i] = T::of(rng.random_range(-bound..bound));
            }
            for i in 0..layer.fan_out {
                net.params[layer.bias + i] = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.params.len() {
            return shape(format!(
                "parameter vector has {} entries, network has {}",
                params.len(),
                self.params.len()
            ));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Overwrites the weight `[out, in]` and bias `[out]` of layer `l`.
    pub fn set_layer(&mut self, l: usize, weight: &[T], bias: &[T]) -> Result<()> {
        let Some(layer) = self.layers.get(l).cloned() else {
            return config(format!("layer {l} out of range"));
        };
        if weight.len() != layer.fan_in * layer.fan_out || bias.len() != layer.fan_out {
            return shape(format!(
                "layer {l} expects [{}, {}]",
                layer.fan_out, layer.fan_in
            ));
        }
        self.params[layer.weight..layer.weight + weight.len()].copy_from_slice(weight);
        self.params[layer.bias..layer.bias + bias.len()].copy_from_slice(bias);
        Ok(())
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            slots: self.slots.clone(),
            layers: self.layers.clone(),
            freqs: self.freqs.iter().map(|f| U::of(f.to_f64())).collect(),
            params: self.params.iter().map(|p| U::of(p.to_f64())).collect(),
        }
    }

    /// Copies every parameter tensor into `pack` under `prefix`.
    pub fn export(&self, prefix: &str, pack: &mut TensorPack) -> Result<()> {
        for slot in &self.slots {
            let data = self.params[slot.offset..slot.offset + slot.len()]
                .iter()
                .map(|v| v.to_f64() as f32)
                .collect();
            pack.insert(
                format!("{prefix}{}", slot.name),
                DenseArray::new(slot.shape.clone(), data)?,
            );
        }
        Ok(())
    }

    /// Loads parameters written by [`Mlp::export`] with the same prefix.
    pub fn import(&mut self, prefix: &str, pack: &TensorPack) -> Result<()> {
        for slot in &self.slots {
            let t = pack.get(&format!("{prefix}{}", slot.name))?;
            if t.shape() != slot.shape.as_slice() {
                return shape(format!(
                    "tensor {prefix}{} has shape {:?}",
                    slot.name,
                    t.shape()
                ));
            }
            for (dst, src) in self.params[slot.offset..slot.offset + slot.len()]
                .iter_mut()
                .zip(t.as_slice())
            {
                *dst = T::of(*src as f64);
            }
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &DenseArray<T>, times: &DenseArray<T>) -> Result<usize> {
        let batch = inputs.rows();
        inputs.ensure_shape(batch, self.spec.input_width, "network inputs")?;
        if self.spec.time_axes > 0 || !times.is_empty() {
            times.ensure_shape(batch, self.spec.time_axes, "network time inputs")?;
        }
        Ok(batch)
    }

    fn embed(&self, inputs: &DenseArray<T>, times: &DenseArray<T>) -> Vec<T> {
        let batch = inputs.rows();
        let width = self.spec.embedded_width();
        let m = self.freqs.len();
        let two_pi = T::of(std::f64::consts::TAU);
        let mut out = Vec::with_capacity(batch * width);
        for i in 0..batch {
            out.extend_from_slice(inputs.row(i));
            for j in 0..self.spec.time_axes {
                let t = times.get(i, j);
                for f in &self.freqs {
                    out.push((two_pi * *f * t).sin());
                }
                for f in &self.freqs {
                    out.push((two_pi * *f * t).cos());
                }
            }
            debug_assert_eq!(out.len(), (i + 1) * width);
        }
        let _ = m;
        out
    }

    fn embed_tangent(&self, times: &DenseArray<T>, tangent: &Tangent<'_, T>) -> Vec<T> {
        let batch = tangent.inputs.rows();
        let width = self.spec.embedded_width();
        let two_pi = T::of(std::f64::consts::TAU);
        let mut out = Vec::with_capacity(batch * width);
        for i in 0..batch {
            out.extend_from_slice(tangent.inputs.row(i));
            for j in 0..self.spec.time_axes {
                let t = times.get(i, j);
                let dt = tangent.times.get(i, j);
                for f in &self.freqs {
                    let w = two_pi * *f;
                    out.push(w * (w * t).cos() * dt);
                }
                for f in &self.freqs {
                    let w = two_pi * *f;
                    out.push(-w * (w * t).sin() * dt);
                }
            }
        }
        out
    }

    fn layer_norm_forward(
        &self,
        x: &[T],
        width: usize,
        gain: usize,
        shift: usize,
    ) -> (Vec<T>, NormTape<T>) {
        let rows = x.len() / width;
        let mut out = vec![T::ZERO; x.len()];
        let mut xhat = vec![T::ZERO; x.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let g = &self.params[gain..gain + width];
        let s = &self.params[shift..shift + width];
        let wf = T::of(width as f64);
        for i in 0..rows {
            let row = &x[i * width..(i + 1) * width];
            let mean = row.iter().copied().sum::<T>() / wf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wf;
            let inv = T::ONE / (var + T::of(LN_EPS)).sqrt();
            inv_std[i] = inv;
            for k in 0..width {
                let xh = (row[k] - mean) * inv;
                xhat[i * width + k] = xh;
                out[i * width + k] = g[k] * xh + s[k];
            }
        }
        (out, NormTape { xhat, inv_std })
    }

    fn layer_norm_backward(
        &self,
        grad_out: &[T],
        tape: &NormTape<T>,
        width: usize,
        gain: usize,
        shift: usize,
        grads: &mut [T],
    ) -> Vec<T> {
        let rows = grad_out.len() / width;
        let mut gx = vec![T::ZERO; grad_out.len()];
        let wf = T::of(width as f64);
        for i in 0..rows {
            let go = &grad_out[i * width..(i + 1) * width];
            let xh = &tape.xhat[i * width..(i + 1) * width];
            let mut mean_g = T::ZERO;
            let mut mean_gx = T::ZERO;
            for k in 0..width {
                grads[gain + k] += go[k] * xh[k];
                grads[shift + k] += go[k];
                let gxh = go[k] * self.params[gain + k];
                mean_g += gxh;
                mean_gx += gxh * xh[k];
            }
            mean_g /= wf;
            mean_gx /= wf;
            let inv = tape.inv_std[i];
            for k in 0..width {
                let gxh = go[k] * self.params[gain + k];
                gx[i * width + k] = inv * (gxh - mean_g - xh[k] * mean_gx);
            }
        }
        gx
    }

    fn run(
        &self,
        inputs: &DenseArray<T>,
        times: &DenseArray<T>,
        tangent: Option<&Tangent<'_, T>>,
        record: bool,
    ) -> Result<(DualOutput<T>, Option<Tape<T>>)> {
        let batch = self.check_inputs(inputs, times)?;
        if let Some(tan) = tangent {
            tan.inputs
                .ensure_shape(batch, self.spec.input_width, "input tangent")?;
            if self.spec.time_axes > 0 {
                tan.times
                    .ensure_shape(batch, self.spec.time_axes, "time tangent")?;
            }
            if self.spec.layer_norm.is_some() {
                return config("directional derivatives are not supported through LayerNorm");
            }
        }
        let mut h = self.embed(inputs, times);
        let mut hdot = tangent.map(|tan| self.embed_tangent(times, tan));
        let mut tapes = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (fin, fout) = (layer.fan_in, layer.fan_out);
            let w = &self.params[layer.weight..layer.weight + fin * fout];
            let b = &self.params[layer.bias..layer.bias + fout];
            let mut z = vec![T::ZERO; batch * fout];
            for i in 0..batch {
                z[i * fout..(i + 1) * fout].copy_from_slice(b);
            }
            T::gemm(batch, fin, fout, T::ONE, &h, false, w, true, T::ONE, &mut z);
            let zdot = hdot.as_ref().map(|hd| {
                let mut zd = vec![T::ZERO; batch * fout];
                T::gemm(
                    batch,
                    fin,
                    fout,
                    T::ONE,
                    hd,
                    false,
                    w,
                    true,
                    T::ZERO,
                    &mut zd,
                );
                zd
            });
            if l == last {
                if record {
                    tapes.push(LayerTape {
                        input: std::mem::take(&mut h),
                        input_dot: hdot.take(),
                        pre_dot: None,
                        d1: Vec::new(),
                        d2: Vec::new(),
                        norm: None,
                    });
                }
                let value = DenseArray::matrix(batch, fout, z)?;
                let tangent = zdot
                    .map(|zd| DenseArray::matrix(batch, fout, zd))
                    .transpose()?;
                let tape = record.then_some(Tape {
                    batch,
                    layers: tapes,
                });
                return Ok((DualOutput { value, tangent }, tape));
            }
            let derivs = record || zdot.is_some();
            let (next, next_dot, d1, d2, norm) = match (self.spec.layer_norm, layer.norm) {
                (Some(NormPlacement::PreActivation), Some((g, s))) => {
                    let (n, nt) = self.layer_norm_forward(&z, fout, g, s);
                    let (out, d1, d2) = gelu_block(&n, derivs);
                    (out, None, d1, d2, Some(nt))
                }
                (Some(NormPlacement::PostActivation), Some((g, s))) => {
                    let (act, d1, d2) = gelu_block(&z, derivs);
                    let (out, nt) = self.layer_norm_forward(&act, fout, g, s);
                    (out, None, d1, d2, Some(nt))
                }
                _ => {
                    let (out, d1, d2) = gelu_block(&z, derivs);
                    let out_dot = zdot
                        .as_ref()
                        .map(|zd| d1.iter().zip(zd).map(|(&a, &d)| a * d).collect());
                    (out, out_dot, d1, d2, None)
                }
            };
            if record {
                tapes.push(LayerTape {
                    input: std::mem::replace(&mut h, next),
                    input_dot: std::mem::replace(&mut hdot, next_dot),
                    pre_dot: zdot,
                    d1,
                    d2,
                    norm,
                });
            } else {
                h = next;
                hdot = next_dot;
            }
        }
        unreachable!("network has at least one layer")
    }

    pub fn forward(&self, inputs: &DenseArray<T>, times: &DenseArray<T>) -> Result<DenseArray<T>> {
        Ok(self.run(inputs, times, None, false)?.0.value)
    }

    /// Output and its forward-mode directional derivative along `tangent`.
    pub fn forward_dual(
        &self,
        inputs: &DenseArray<T>,
        times: &DenseArray<T>,
        tangent: &Tangent<'_, T>,
    ) -> Result<(DenseArray<T>, DenseArray<T>)> {
        let (out, _) = self.run(inputs, times, Some(tangent), false)?;
        let tan = out.tangent.expect("tangent requested");
        Ok((out.value, tan))
    }

    /// Jacobian-vector product of the output along `tangent`.
    pub fn jvp(
        &self,
        inputs: &DenseArray<T>,
        times: &DenseArray<T>,
        tangent: &Tangent<'_, T>,
    ) -> Result<DenseArray<T>> {
        Ok(self.forward_dual(inputs, times, tangent)?.1)
    }

    /// Forward pass that records what [`Mlp::backward`] needs. With a
    /// tangent, the backward pass can also differentiate through the
    /// directional derivative.
    pub fn forward_taped(
        &self,
        inputs: &DenseArray<T>,
        times: &DenseArray<T>,
        tangent: Option<&Tangent<'_, T>>,
    ) -> Result<(DualOutput<T>, Tape<T>)> {
        let (out, tape) = self.run(inputs, times, tangent, true)?;
        Ok((out, tape.expect("tape recorded")))
    }

    /// Reverse pass. `grad_value` is dL/d(output); `grad_tangent` is
    /// dL/d(output tangent) and requires a tape recorded with a tangent.
    /// Parameter gradients are accumulated into `grads`; the gradient with
    /// respect to the raw (non-time) inputs is returned when asked for.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_value: &DenseArray<T>,
        grad_tangent: Option<&DenseArray<T>>,
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Result<Option<DenseArray<T>>> {
        let batch = tape.batch;
        if grads.len() != self.params.len() {
            return shape("gradient buffer does not match parameter count".to_string());
        }
        grad_value.ensure_shape(batch, self.spec.output_width, "output gradient")?;
        if let Some(gt) = grad_tangent {
            gt.ensure_shape(batch, self.spec.output_width, "tangent gradient")?;
            if tape.layers[0].input_dot.is_none() {
                return config("tangent gradient given but tape has no tangent");
            }
        }
        let mut gz = grad_value.as_slice().to_vec();
        let mut gzdot = grad_tangent.map(|g| g.as_slice().to_vec());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let lt = &tape.layers[l];
            let (fin, fout) = (layer.fan_in, layer.fan_out);
            let w = &self.params[layer.weight..layer.weight + fin * fout];
            {
                let dw = &mut grads[layer.weight..layer.weight + fin * fout];
                T::gemm(
                    fout,
                    batch,
                    fin,
                    T::ONE,
                    &gz,
                    true,
                    &lt.input,
                    false,
                    T::ONE,
                    dw,
                );
                if let (Some(gzd), Some(hd)) = (&gzdot, &lt.input_dot) {
                    T::gemm(fout, batch, fin, T::ONE, gzd, true, hd, false, T::ONE, dw);
                }
            }
            for i in 0..batch {
                for k in 0..fout {
                    grads[layer.bias + k] += gz[i * fout + k];
                }
            }
            if l == 0 && !want_input_grad {
                break;
            }
            let mut gh = vec![T::ZERO; batch * fin];
            T::gemm(
                batch,
                fout,
                fin,
                T::ONE,
                &gz,
                false,
                w,
                false,
                T::ZERO,
                &mut gh,
            );
            let ghdot = gzdot.as_ref().map(|gzd| {
                let mut g = vec![T::ZERO; batch * fin];
                T::gemm(
                    batch,
                    fout,
                    fin,
                    T::ONE,
                    gzd,
                    false,
                    w,
                    false,
                    T::ZERO,
                    &mut g,
                );
                g
            });
            if l == 0 {
                let width = self.spec.input_width;
                let emb = self.spec.embedded_width();
                let mut gin = Vec::with_capacity(batch * width);
                for i in 0..batch {
                    gin.extend_from_slice(&gh[i * emb..i * emb + width]);
                }
                return Ok(Some(DenseArray::matrix(batch, width, gin)?));
            }
            // Through the activation block of layer l - 1.
            let prev = &self.layers[l - 1];
            let pt = &tape.layers[l - 1];
            match (self.spec.layer_norm, prev.norm, pt.norm.as_ref()) {
                (Some(NormPlacement::PreActivation), Some((g, s)), Some(nt)) => {
                    let gn: Vec<T> = gh.iter().zip(&pt.d1).map(|(&d, &a)| a * d).collect();
                    gz = self.layer_norm_backward(&gn, nt, fin, g, s, grads);
                    gzdot = None;
                }
                (Some(NormPlacement::PostActivation), Some((g, s)), Some(nt)) => {
                    let ga = self.layer_norm_backward(&gh, nt, fin, g, s, grads);
                    gz = ga.iter().zip(&pt.d1).map(|(&d, &a)| a * d).collect();
                    gzdot = None;
                }
                _ => {
                    let mut next = Vec::with_capacity(gh.len());
                    match (&ghdot, &pt.pre_dot) {
                        (Some(ghd), Some(zd)) => {
                            let mut next_dot = Vec::with_capacity(gh.len());
                            for k in 0..gh.len() {
                                let d1 = pt.d1[k];
                                next.push(d1 * gh[k] + pt.d2[k] * zd[k] * ghd[k]);
                                next_dot.push(d1 * ghd[k]);
                            }
                            gzdot = Some(next_dot);
                        }
                        _ => {
                            for k in 0..gh.len() {
                                next.push(pt.d1[k] * gh[k]);
                            }
                            gzdot = None;
                        }
                    }
                    gz = next;
                }
            }
        }
        Ok(None)
    }

    /// Loss value and parameter gradient for a scalar loss of the output.
    ///
    /// The closure receives the network output and returns the loss together
    /// with dL/d(output).
    pub fn value_and_grad<F>(
        &self,
        inputs: &DenseArray<T>,
        times: &DenseArray<T>,
        loss: F,
    ) -> Result<(f64, Vec<T>)>
    where
        F: FnOnce(&DenseArray<T>) -> Result<(f64, DenseArray<T>)>,
    {
        let (out, tape) = self.forward_taped(inputs, times, None)?;
        let (value, grad_out) = loss(&out.value)?;
        if !value.is_finite() {
            return numeric(format!("loss is not finite ({value})"));
        }
        let mut grads = vec![T::ZERO; self.params.len()];
        self.backward(&tape, &grad_out, None, &mut grads, false)?;
        Ok((value, grads))
    }

    /// Gradient of `sum(output * weights)` with respect to the raw inputs.
    pub fn input_gradient(
        &self,
        inputs: &DenseArray<T>,
        times: &DenseArray<T>,
        output_weights: &DenseArray<T>,
    ) -> Result<DenseArray<T>> {
        let (_, tape) = self.forward_taped(inputs, times, None)?;
        let mut scratch = vec![T::ZERO; self.params.len()];
        let g = self.backward(&tape, output_weights, None, &mut scratch, true)?;
        Ok(g.expect("input gradient requested"))
    }
}

/// Empty `[rows, 0]` time block for networks without time axes.
pub fn no_times<T: Scalar>(rows: usize) -> DenseArray<T> {
    DenseArray::zeros(vec![rows, 0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(norm: Option<NormPlacement>) -> MlpSpec {
        MlpSpec {
            input_width: 3,
            time_axes: 2,
            time_features: 4,
            max_frequency: 4.0,
            hidden: vec![5, 4],
            output_width: 2,
            layer_norm: norm,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseArray<f64> {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        DenseArray::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::<f32>::zeros(spec(None)).unwrap();
        let x = DenseArray::filled(vec![3, 3], 0.7f32);
        let t = DenseArray::filled(vec![3, 2], 0.2f32);
        assert!(net
            .forward(&x, &t)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_layer() {
        let s = MlpSpec {
            input_width: 1,
            time_axes: 0,
            time_features: 0,
            max_frequency: 1.0,
            hidden: vec![],
            output_width: 1,
            layer_norm: None,
        };
        let mut net = Mlp::<f32>::zeros(s).unwrap();
        net.set_layer(0, &[2.0], &[1.0]).unwrap();
        let x = DenseArray::matrix(1, 1, vec![3.0f32]).unwrap();
        assert_eq!(net.forward(&x, &no_times(1)).unwrap().as_slice(), &[7.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f32>::new(spec(None), &mut rng).unwrap();
        let x = batch(&mut rng, 4, 3).cast::<f32>();
        let t = batch(&mut rng, 4, 2).cast::<f32>();
        let a = net.forward(&x, &t).unwrap();
        let b = net.forward(&x, &t).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let net = Mlp::<f32>::zeros(spec(None)).unwrap();
        let x = DenseArray::filled(vec![2, 4], 0.0f32);
        let t = DenseArray::filled(vec![2, 2], 0.0f32);
        assert!(matches!(net.forward(&x, &t), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn odd_time_features_rejected() {
        let mut s = spec(None);
        s.time_features = 3;
        assert!(Mlp::<f32>::zeros(s).is_err());
    }

    #[test]
    fn layer_norm_rejects_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f64>::new(spec(Some(NormPlacement::PreActivation)), &mut rng).unwrap();
        let x = batch(&mut rng, 2, 3);
        let t = batch(&mut rng, 2, 2);
        let tan = Tangent {
            inputs: &x,
            times: &t,
        };
        assert!(net.jvp(&x, &t, &tan).is_err());
    }

    #[test]
    fn linear_loss_matches_outer_product() {
        // 1/2 |W x|^2 has gradient (W x) x^T.
        let s = MlpSpec {
            input_width: 2,
            time_axes: 0,
            time_features: 0,
            max_frequency: 1.0,
            hidden: vec![],
            output_width: 2,
            layer_norm: None,
        };
        let mut net = Mlp::<f64>::zeros(s).unwrap();
        net.set_layer(0, &[1.0, 2.0, -1.0, 0.5], &[0.0, 0.0])
            .unwrap();
        let x = DenseArray::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let (_, grads) = net
            .value_and_grad(&x, &no_times(1), |y| Ok((0.5 * y.sum_sq_f64(), y.clone())))
            .unwrap();
        let y = [0.3 - 1.4, -0.3 - 0.35];
        let expect = [y[0] * 0.3, y[0] * -0.7, y[1] * 0.3, y[1] * -0.7, y[0], y[1]];
        for (g, e) in grads.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::new(spec(None), &mut rng).unwrap();
        let x = batch(&mut rng, 3, 3);
        let t = batch(&mut rng, 3, 2);
        let (_, grads) = net
            .value_and_grad(&x, &t, |y| Ok((1.0, DenseArray::zeros(y.shape().to_vec()))))
            .unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nan_loss_is_reported() {
        let net = Mlp::<f64>::zeros(spec(None)).unwrap();
        let x = DenseArray::zeros(vec![1, 3]);
        let t = DenseArray::zeros(vec![1, 2]);
        let r = net.value_and_grad(&x, &t, |y| Ok((f64::NAN, y.clone())));
        assert!(matches!(r, Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn linear_jvp_is_matrix_vector_product() {
        let s = MlpSpec {
            input_width: 2,
            time_axes: 0,
            time_features: 0,
            max_frequency: 1.0,
            hidden: vec![],
            output_width: 2,
            layer_norm: None,
        };
        let mut net = Mlp::<f64>::zeros(s).unwrap();
        net.set_layer(0, &[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0])
            .unwrap();
        let x = DenseArray::matrix(1, 2, vec![0.1, 0.2]).unwrap();
        let v = DenseArray::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let tt = no_times(1);
        let out = net
            .jvp(
                &x,
                &tt,
                &Tangent {
                    inputs: &v,
                    times: &tt,
                },
            )
            .unwrap();
        assert_eq!(out.as_slice(), &[-1.0, -1.0]);
        let zero = DenseArray::zeros(vec![1, 2]);
        let out = net
            .jvp(
                &x,
                &tt,
                &Tangent {
                    inputs: &zero,
                    times: &tt,
                },
            )
            .unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn gelu_derivatives_match_differences() {
        for &x in &[-2.5f64, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-5;
            let d1 = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let d2 = (gelu_d1(x + h) - gelu_d1(x - h)) / (2.0 * h);
            assert!((d1 - gelu_d1(x)).abs() < 1e-8);
            assert!((d2 - gelu_d2(x)).abs() < 1e-8);
        }
        let xs = [-2.5f64, -0.3, 0.0, 0.7, 3.1];
        let (v, d1, d2) = gelu_block(&xs, true);
        for k in 0..xs.len() {
            assert_eq!(
                (v[k], d1[k], d2[k]),
                (gelu(xs[k]), gelu_d1(xs[k]), gelu_d2(xs[k]))
            );
        }
    }
}
