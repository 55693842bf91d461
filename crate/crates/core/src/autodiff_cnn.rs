//! Convolutional dynamics network with a hand-written reverse mode.
//!
//! The standard architecture lifts the input to 16 channels, runs four
//! 16-channel layers and projects back to the output channels. All
//! kernels are 3x3 with periodic padding; SELU follows every layer except
//! the last, which stays linear so the network can emit signed, unbounded
//! time derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_grid::{conv_kernel_grad, conv_periodic, GridField, Kernel, KernelGrad};

pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;

pub const HIDDEN_CHANNELS: usize = 16;
pub const HIDDEN_LAYERS: usize = 4;
pub const KERNEL_SIZE: usize = 3;

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

/// `d selu / dx` at `x`.
#[inline]
pub fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Selu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kernel: Kernel,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    layers: Vec<Layer>,
}

/// Per-layer inputs and pre-activations recorded by [`ConvNet::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<GridField>,
    pre_activations: Vec<GridField>,
}

impl ConvNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].kernel.out_channels() != pair[1].kernel.in_channels() {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} emits {} channels but layer {} expects {}",
                    pair[0].kernel.out_channels(),
                    i + 1,
                    pair[1].kernel.in_channels()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// The standard 6-kernel network, `o_in -> 16 -> 16 -> 16 -> 16 -> 16 -> o_out`,
    /// with zero biases and fan-in scaled uniform weights `U(-b, b)`,
    /// `b = sqrt(3 / (9 c_in))`.
    ///
    /// That bound gives each weight variance `1/fan_in`, the LeCun scaling
    /// SELU needs to keep activations near unit variance through depth. The
    /// narrower `1/sqrt(fan_in)` bound shrinks the signal threefold per layer.
    pub fn init(o_in: usize, o_out: usize, seed: u64) -> Result<Self> {
        if o_in == 0 || o_out == 0 {
            return Err(Error::InvalidConfig("network channel counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![o_in];
        dims.extend(std::iter::repeat_n(HIDDEN_CHANNELS, HIDDEN_LAYERS + 1));
        dims.push(o_out);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (cin, cout) = (dims[l], dims[l + 1]);
                let bound = (3.0 / (cin * KERNEL_SIZE * KERNEL_SIZE) as f64).sqrt();
                let weights = (0..cout * cin * KERNEL_SIZE * KERNEL_SIZE)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let kernel = Kernel::new(cout, cin, KERNEL_SIZE, KERNEL_SIZE, weights, vec![0.0; cout])?;
                let activation = if l + 1 == n { Activation::Linear } else { Activation::Selu };
                Ok(Layer { kernel, activation })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].kernel.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").kernel.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.param_count()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.kernel.weights());
            out.extend_from_slice(l.kernel.bias());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("ConvNet::set_flat", self.param_count(), flat.len()));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            let nw = l.kernel.weights().len();
            l.kernel.weights_mut().copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.kernel.bias().len();
            l.kernel.bias_mut().copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &GridField) -> Result<GridField> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = conv_periodic(&h, &l.kernel)?;
            if l.activation == Activation::Selu {
                h = h.map(selu);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &GridField) -> Result<(GridField, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let z = conv_periodic(&h, &l.kernel)?;
            inputs.push(h);
            h = match l.activation {
                Activation::Selu => z.map(selu),
                Activation::Linear => z.clone(),
            };
            pre.push(z);
        }
        Ok((
            h,
            ForwardCache {
                inputs,
                pre_activations: pre,
            },
        ))
    }

    /// Vector-Jacobian product through a cached forward pass: returns
    /// `(∂⟨g, net(x)⟩/∂x, ∂⟨g, net(x)⟩/∂θ)` for `g = grad_out`.
    pub fn backward_cached(&self, cache: &ForwardCache, grad_out: &GridField) -> Result<(GridField, Gradients)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Selu {
                g = g.zip_map(&cache.pre_activations[l], |gv, z| gv * selu_grad(z))?;
            }
            let kg = conv_kernel_grad(&cache.inputs[l], &layer.kernel, &g)?;
            grads.push(kg);
            // The input gradient of the first layer is still needed by callers.
            g = conv_periodic(&g, &layer.kernel.flipped_transpose())?;
        }
        grads.reverse();
        Ok((g, Gradients { layers: grads }))
    }

    pub fn backward(&self, x: &GridField, grad_out: &GridField) -> Result<(GridField, Gradients)> {
        let (_, cache) = self.forward_cached(x)?;
        self.backward_cached(&cache, grad_out)
    }

    fn check_input(&self, x: &GridField) -> Result<()> {
        if x.channels() != self.in_channels() {
            return Err(Error::shape(
                "ConvNet::forward",
                format!("{} input channels", self.in_channels()),
                format!("{} channels", x.channels()),
            ));
        }
        Ok(())
    }
}

/// Parameter gradients, one entry per layer, mirroring [`ConvNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<KernelGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &ConvNet) -> Self {
        Self {
            layers: net.layers.iter().map(|l| KernelGrad::zeros_like(&l.kernel)).collect(),
        }
    }

    /// `self += factor * other`.
    pub fn accumulate(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.accumulate(b, factor);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    /// Same ordering as [`ConvNet::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(net: &ConvNet, flat: &[f64]) -> Result<Self> {
        if flat.len() != net.param_count() {
            return Err(Error::shape("Gradients::from_flat", net.param_count(), flat.len()));
        }
        let mut pos = 0;
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let nw = l.kernel.weights().len();
                let nb = l.kernel.bias().len();
                let g = KernelGrad {
                    weights: flat[pos..pos + nw].to_vec(),
                    bias: flat[pos + nw..pos + nw + nb].to_vec(),
                };
                pos += nw + nb;
                g
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
