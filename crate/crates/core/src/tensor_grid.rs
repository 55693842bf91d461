//! Multi-channel fields on a regular periodic 2D grid, and the periodic
//! cross-correlation that both the finite-difference stencils and the
//! dynamics network are built from.
//!
//! Layout is channel-major, row-major: element `(c, i, j)` lives at
//! `c * height * width + i * width + j`, with `i` indexing y and `j` x.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    shape: Shape,
    data: Vec<f64>,
    dx: f64,
    dy: f64,
}

impl GridField {
    pub fn new(shape: Shape, dx: f64, dy: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("GridField::new", shape.len(), data.len()));
        }
        if shape.height == 0 || shape.width == 0 {
            return Err(Error::InvalidField(format!("empty grid {shape}")));
        }
        if !(dx > 0.0 && dy > 0.0 && dx.is_finite() && dy.is_finite()) {
            return Err(Error::InvalidField(format!(
                "grid spacing must be positive, got dx = {dx}, dy = {dy}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            shape,
            data,
            dx,
            dy,
        })
    }

    pub fn zeros(shape: Shape, dx: f64, dy: f64) -> Result<Self> {
        Self::new(shape, dx, dy, vec![0.0; shape.len()])
    }

    pub fn constant(shape: Shape, dx: f64, dy: f64, value: f64) -> Result<Self> {
        Self::new(shape, dx, dy, vec![value; shape.len()])
    }

    /// Builds a field from `f(channel, i, j)`.
    pub fn from_fn(
        shape: Shape,
        dx: f64,
        dy: f64,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for i in 0..shape.height {
                for j in 0..shape.width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self::new(shape, dx, dy, data)
    }

    /// Same grid and spacing as `self`, new data. Skips the finiteness scan;
    /// used internally where values come from arithmetic on valid fields.
    pub(crate) fn with_data(&self, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * self.shape.plane());
        Self {
            shape: Shape::new(channels, self.shape.height, self.shape.width),
            data,
            dx: self.dx,
            dy: self.dy,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.shape.height + i) * self.shape.width + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &GridField, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, self.shape, other.shape));
        }
        Ok(())
    }

    pub fn scale(&self, a: f64) -> GridField {
        self.map(|v| a * v)
    }

    pub fn add(&self, other: &GridField) -> Result<GridField> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridField) -> Result<GridField> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &GridField) -> Result<GridField> {
        self.zip_map(other, |a, b| a * b)
    }

    /// `a * x + y`.
    pub fn axpy(a: f64, x: &GridField, y: &GridField) -> Result<GridField> {
        x.zip_map(y, |xv, yv| a * xv + yv)
    }

    /// In-place `self += a * x`.
    pub fn add_scaled(&mut self, a: f64, x: &GridField) -> Result<()> {
        self.check_same(x, "add_scaled")?;
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridField {
        self.with_data(self.channels(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &GridField, f: impl Fn(f64, f64) -> f64) -> Result<GridField> {
        self.check_same(other, "zip_map")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(self.with_data(self.channels(), data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn channel_sum(&self, c: usize) -> f64 {
        self.channel(c).iter().sum()
    }

    pub fn dot(&self, other: &GridField) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_channel(&self, c: usize) -> f64 {
        self.channel(c).iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    /// Circular shift: `out[c, i, j] = self[c, i - di, j - dj]` (indices mod grid).
    pub fn shift(&self, di: isize, dj: isize) -> GridField {
        let (h, w) = (self.height(), self.width());
        let mut data = vec![0.0; self.data.len()];
        for c in 0..self.channels() {
            let src = self.channel(c);
            let dst = &mut data[c * h * w..(c + 1) * h * w];
            for i in 0..h {
                let si = wrap(i as isize - di, h);
                for j in 0..w {
                    dst[i * w + j] = src[si * w + wrap(j as isize - dj, w)];
                }
            }
        }
        self.with_data(self.channels(), data)
    }

    /// Channels `range` as a new field.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Result<GridField> {
        if range.end > self.channels() || range.start > range.end {
            return Err(Error::shape(
                "select_channels",
                format!("channel range within 0..{}", self.channels()),
                format!("{range:?}"),
            ));
        }
        let n = self.shape.plane();
        let data = self.data[range.start * n..range.end * n].to_vec();
        Ok(self.with_data(range.len(), data))
    }

    /// Stacks fields along the channel axis. All parts must share the grid.
    pub fn concat_channels(parts: &[&GridField]) -> Result<GridField> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidField("concat of zero fields".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height() != first.height() || p.width() != first.width() {
                return Err(Error::shape("concat_channels", first.shape, p.shape));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels();
        }
        Ok(first.with_data(channels, data))
    }
}

#[inline]
pub(crate) fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Convolution weights `[out][in][kh][kw]` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Kernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::InvalidKernel(format!(
                "kernel extent must be odd, got {kh}x{kw}"
            )));
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::InvalidKernel("kernel with zero channels".into()));
        }
        let expected = out_channels * in_channels * kh * kw;
        if weights.len() != expected {
            return Err(Error::InvalidKernel(format!(
                "expected {expected} weights, got {}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::InvalidKernel(format!(
                "expected {out_channels} biases, got {}",
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            kh,
            kw,
            vec![0.0; out_channels * in_channels * kh * kw],
            vec![0.0; out_channels],
        )
    }

    /// Single-channel 3x3 kernel from a row-major stencil matrix, zero bias.
    pub fn stencil3(rows: [[f64; 3]; 3]) -> Self {
        let weights = rows.iter().flatten().copied().collect();
        Self::new(1, 1, 3, 3, weights, vec![0.0]).expect("3x3 stencil is valid")
    }

    /// `channels -> channels` kernel passing every channel through unchanged.
    pub fn identity(channels: usize, kh: usize, kw: usize) -> Result<Self> {
        let mut k = Self::zeros(channels, channels, kh, kw)?;
        for c in 0..channels {
            let idx = k.index(c, c, kh / 2, kw / 2);
            k.weights[idx] = 1.0;
        }
        Ok(k)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn index(&self, o: usize, c: usize, a: usize, b: usize) -> usize {
        ((o * self.in_channels + c) * self.kh + a) * self.kw + b
    }

    pub fn weight(&self, o: usize, c: usize, a: usize, b: usize) -> f64 {
        self.weights[self.index(o, c, a, b)]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Spatially flipped, channel-transposed copy with zero bias: the kernel
    /// whose correlation realizes the adjoint of this kernel's correlation.
    pub fn flipped_transpose(&self) -> Kernel {
        let mut weights = vec![0.0; self.weights.len()];
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        let dst = ((c * self.out_channels + o) * self.kh + (self.kh - 1 - a))
                            * self.kw
                            + (self.kw - 1 - b);
                        weights[dst] = self.weight(o, c, a, b);
                    }
                }
            }
        }
        Kernel {
            out_channels: self.in_channels,
            in_channels: self.out_channels,
            kh: self.kh,
            kw: self.kw,
            weights,
            bias: vec![0.0; self.in_channels],
        }
    }
}

/// Gradient of a scalar loss with respect to a kernel's weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl KernelGrad {
    pub fn zeros_like(kernel: &Kernel) -> Self {
        Self {
            weights: vec![0.0; kernel.weights.len()],
            bias: vec![0.0; kernel.bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &KernelGrad, factor: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += factor * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += factor * b;
        }
    }
}

/// Fills `dst` with `src` circularly offset by `(da, db)`:
/// `dst[i, j] = src[(i + da) mod h, (j + db) mod w]`.
fn shifted_plane(dst: &mut [f64], src: &[f64], h: usize, w: usize, da: isize, db: isize) {
    let off = wrap(db, w);
    let split = w - off;
    for i in 0..h {
        let si = wrap(i as isize + da, h);
        let row = &src[si * w..(si + 1) * w];
        let out = &mut dst[i * w..(i + 1) * w];
        out[..split].copy_from_slice(&row[off..]);
        out[split..].copy_from_slice(&row[..off]);
    }
}

/// Periodic cross-correlation:
/// `out[o, i, j] = bias[o] + Σ_{c,a,b} w[o,c,a,b] · in[c, i+a-kh/2, j+b-kw/2]`
/// with indices taken modulo the grid. No kernel flip.
///
/// Every output element accumulates its terms in `(c, a, b)` order after the
/// bias, so circularly shifted inputs give bitwise-shifted outputs.
pub fn conv_periodic(field: &GridField, kernel: &Kernel) -> Result<GridField> {
    if field.channels() != kernel.in_channels {
        return Err(Error::shape(
            "conv_periodic",
            format!("{} input channels", kernel.in_channels),
            format!("{} channels", field.channels()),
        ));
    }
    let (h, w) = (field.height(), field.width());
    let n = h * w;
    let (rh, rw) = ((kernel.kh / 2) as isize, (kernel.kw / 2) as isize);
    let mut out = vec![0.0; kernel.out_channels * n];
    for o in 0..kernel.out_channels {
        out[o * n..(o + 1) * n].fill(kernel.bias[o]);
    }
    let mut plane = vec![0.0; n];
    for c in 0..kernel.in_channels {
        let src = field.channel(c);
        for a in 0..kernel.kh {
            for b in 0..kernel.kw {
                let mut built = false;
                for o in 0..kernel.out_channels {
                    let wgt = kernel.weight(o, c, a, b);
                    if wgt == 0.0 {
                        continue;
                    }
                    if !built {
                        shifted_plane(&mut plane, src, h, w, a as isize - rh, b as isize - rw);
                        built = true;
                    }
                    for (d, s) in out[o * n..(o + 1) * n].iter_mut().zip(&plane) {
                        *d += wgt * s;
                    }
                }
            }
        }
    }
    Ok(field.with_data(kernel.out_channels, out))
}

/// Reverse-mode rule for [`conv_periodic`]: given `grad_out = ∂L/∂out`,
/// returns `∂L/∂field` and `∂L/∂(weights, bias)`.
pub fn conv_periodic_backward(
    field: &GridField,
    kernel: &Kernel,
    grad_out: &GridField,
) -> Result<(GridField, KernelGrad)> {
    let grad_kernel = conv_kernel_grad(field, kernel, grad_out)?;
    let grad_field = conv_periodic(grad_out, &kernel.flipped_transpose())?;
    Ok((grad_field, grad_kernel))
}

/// The parameter half of [`conv_periodic_backward`].
pub fn conv_kernel_grad(field: &GridField, kernel: &Kernel, grad_out: &GridField) -> Result<KernelGrad> {
    let expected = Shape::new(kernel.out_channels, field.height(), field.width());
    if field.channels() != kernel.in_channels || grad_out.shape() != expected {
        return Err(Error::shape(
            "conv_periodic_backward",
            expected,
            grad_out.shape(),
        ));
    }
    let (h, w) = (field.height(), field.width());
    let n = h * w;
    let (rh, rw) = ((kernel.kh / 2) as isize, (kernel.kw / 2) as isize);
    let mut grad = KernelGrad::zeros_like(kernel);
    for o in 0..kernel.out_channels {
        grad.bias[o] = grad_out.channel(o).iter().sum();
    }
    let mut plane = vec![0.0; n];
    for c in 0..kernel.in_channels {
        let x = field.channel(c);
        for a in 0..kernel.kh {
            for b in 0..kernel.kw {
                shifted_plane(&mut plane, x, h, w, a as isize - rh, b as isize - rw);
                for o in 0..kernel.out_channels {
                    let g = grad_out.channel(o);
                    grad.weights[kernel.index(o, c, a, b)] =
                        g.iter().zip(&plane).map(|(p, q)| p * q).sum();
                }
            }
        }
    }
    Ok(grad)
}
