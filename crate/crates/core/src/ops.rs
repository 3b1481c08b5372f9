//! Layer kernels: convolution with folded batch normalization, activations,
//! pooling, the fully-connected head and the softmax cross-entropy loss.
//!
//! A convolutional layer computes, for output channel `j`,
//!
//! ```text
//! out_j = (sum_k in_k * K[:, :, k, j] - mu_j) / sigma_j * gamma_j + beta_j
//! ```
//!
//! where `mu`, `sigma` are running statistics (never trained by gradient) and
//! `gamma`, `beta` are the trainable scale and shift.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor4};

/// Lower bound applied to every `sigma` entry.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Parameters of one convolutional layer: the kernel plus the per-filter
/// normalization vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    /// `(kernel_h, kernel_w, c_in, c_out)`.
    pub kernel: Tensor4<T>,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> LayerParams<T> {
    /// Layer with identity normalization (`mu = 0`, `sigma = gamma = 1`, `beta = 0`).
    pub fn with_kernel(kernel: Tensor4<T>, stride: usize, padding: usize) -> Self {
        let c = kernel.shape()[3];
        LayerParams {
            kernel,
            mu: vec![T::zero(); c],
            sigma: vec![T::one(); c],
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    /// Rows of the reshaped weight matrix (`kh * kw * c_in`).
    pub fn fan_in(&self) -> usize {
        let [kh, kw, ci, _] = self.kernel.shape();
        kh * kw * ci
    }

    pub fn validate(&self, context: &str) -> Result<()> {
        let c = self.out_channels();
        for (name, v) in [
            ("mu", &self.mu),
            ("sigma", &self.sigma),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ] {
            if v.len() != c {
                return Err(Error::dim(format!("{context}: {name} length"), c, v.len()));
            }
        }
        if self.stride == 0 {
            return Err(Error::Input(format!("{context}: stride must be positive")));
        }
        if let Some(s) = self.sigma.iter().find(|s| s.as_f64() < SIGMA_FLOOR * (1.0 - 1e-6)) {
            return Err(Error::Input(format!(
                "{context}: sigma {s} below floor {SIGMA_FLOOR:e}"
            )));
        }
        Ok(())
    }

    /// Spatial output size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let [kh, kw, _, _] = self.kernel.shape();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < kh || wp < kw {
            return Err(Error::Shape(format!(
                "input {h}x{w} with padding {} smaller than kernel {kh}x{kw}",
                self.padding
            )));
        }
        Ok(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }

    /// Filter `j` of the kernel as a flat vector of length [`fan_in`](Self::fan_in).
    pub fn filter(&self, j: usize) -> Vec<T> {
        let c = self.out_channels();
        self.kernel.data().iter().skip(j).step_by(c).copied().collect()
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len() + 2 * self.out_channels()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        let cv = |v: &[T]| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        LayerParams {
            kernel: self.kernel.cast(),
            mu: cv(&self.mu),
            sigma: cv(&self.sigma),
            gamma: cv(&self.gamma),
            beta: cv(&self.beta),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Gradients of the trainable parts of a layer. `mu` and `sigma` have none.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T = f32> {
    pub kernel: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn zeros_like(layer: &LayerParams<T>) -> Self {
        let c = layer.out_channels();
        LayerGrads {
            kernel: Tensor4::zeros(layer.kernel.shape()),
            gamma: vec![T::zero(); c],
            beta: vec![T::zero(); c],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.kernel
            .data()
            .iter()
            .chain(&self.gamma)
            .chain(&self.beta)
            .map(|x| x.abs().as_f64())
            .fold(0.0, f64::max)
    }
}

/// Build the patch matrix of one batch item: rows are output pixels, columns are
/// `(ky, kx, c_in)` in kernel order.
fn im2col<T: Scalar>(
    item: &[T],
    (h, w, c): (usize, usize, usize),
    layer: &LayerParams<T>,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let [kh, kw, _, _] = layer.kernel.shape();
    let k = kh * kw * c;
    let mut cols = vec![T::zero(); oh * ow * k];
    let (s, p) = (layer.stride as isize, layer.padding as isize);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            for ky in 0..kh {
                let iy = oy as isize * s + ky as isize - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize * s + kx as isize - p;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * kw + kx) * c;
                    row[dst..dst + c].copy_from_slice(&item[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch-matrix gradient back onto the input grid.
fn col2im<T: Scalar>(
    cols: &[T],
    (h, w, c): (usize, usize, usize),
    layer: &LayerParams<T>,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let [kh, kw, _, _] = layer.kernel.shape();
    let k = kh * kw * c;
    let mut out = vec![T::zero(); h * w * c];
    let (s, p) = (layer.stride as isize, layer.padding as isize);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            for ky in 0..kh {
                let iy = oy as isize * s + ky as isize - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize * s + kx as isize - p;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * kw + kx) * c;
                    for ci in 0..c {
                        out[dst + ci] = out[dst + ci] + row[src + ci];
                    }
                }
            }
        }
    }
    out
}

fn check_conv_input<T: Scalar>(
    input: &Tensor4<T>,
    layer: &LayerParams<T>,
    context: &str,
) -> Result<(usize, usize)> {
    let [_, h, w, c] = input.shape();
    if c != layer.in_channels() {
        return Err(Error::dim(
            format!("{context}: input channels"),
            layer.in_channels(),
            c,
        ));
    }
    layer.output_hw(h, w)
}

/// Raw convolution `sum_k in_k * K[:, :, k, j]`, before normalization.
pub fn conv_forward<T: Scalar>(input: &Tensor4<T>, layer: &LayerParams<T>) -> Result<Tensor4<T>> {
    conv_forward_ctx(input, layer, "conv")
}

pub(crate) fn conv_forward_ctx<T: Scalar>(
    input: &Tensor4<T>,
    layer: &LayerParams<T>,
    context: &str,
) -> Result<Tensor4<T>> {
    let (oh, ow) = check_conv_input(input, layer, context)?;
    let [n, h, w, c] = input.shape();
    let cout = layer.out_channels();
    let k = layer.fan_in();
    let weights = layer.kernel.data();
    let items = par::map_range(n, |i| {
        let cols = im2col(input.item(i), (h, w, c), layer, (oh, ow));
        let mut out = vec![T::zero(); oh * ow * cout];
        T::gemm(
            oh * ow,
            k,
            cout,
            T::one(),
            &cols,
            (k as isize, 1),
            weights,
            (cout as isize, 1),
            T::zero(),
            &mut out,
            (cout as isize, 1),
        );
        out
    });
    Tensor4::from_vec([n, oh, ow, cout], items.concat())
}

/// Apply the folded normalization `(z - mu) / sigma * gamma + beta` per channel.
pub fn batch_norm_apply<T: Scalar>(z: &Tensor4<T>, layer: &LayerParams<T>) -> Tensor4<T> {
    normalize(z, &layer.mu, &layer.sigma, &layer.gamma, &layer.beta)
}

/// [`batch_norm_apply`] with explicit statistics.
pub fn normalize<T: Scalar>(z: &Tensor4<T>, mu: &[T], sigma: &[T], gamma: &[T], beta: &[T]) -> Tensor4<T> {
    let c = mu.len();
    let scale: Vec<T> = (0..c).map(|j| gamma[j] / sigma[j]).collect();
    let mut out = z.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let j = i % c;
        *v = (*v - mu[j]) * scale[j] + beta[j];
    }
    out
}

/// Convolution followed by the folded normalization.
pub fn conv_bn_forward<T: Scalar>(input: &Tensor4<T>, layer: &LayerParams<T>) -> Result<Tensor4<T>> {
    Ok(batch_norm_apply(&conv_forward(input, layer)?, layer))
}

/// Backward pass of [`conv_bn_forward`]. Returns the input gradient and the
/// kernel/gamma/beta gradients.
pub fn conv_bn_backward<T: Scalar>(
    input: &Tensor4<T>,
    layer: &LayerParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, LayerGrads<T>)> {
    let z = conv_forward(input, layer)?;
    conv_bn_backward_with_z(input, &z, layer, (&layer.mu, &layer.sigma, false), grad_out, "conv")
}

pub(crate) fn conv_bn_backward_with_z<T: Scalar>(
    input: &Tensor4<T>,
    z: &Tensor4<T>,
    layer: &LayerParams<T>,
    (mu, sigma, batch_stats): (&[T], &[T], bool),
    grad_out: &Tensor4<T>,
    context: &str,
) -> Result<(Tensor4<T>, LayerGrads<T>)> {
    let (oh, ow) = check_conv_input(input, layer, context)?;
    let [n, h, w, c] = input.shape();
    let cout = layer.out_channels();
    if grad_out.shape() != [n, oh, ow, cout] {
        return Err(Error::Shape(format!(
            "{context}: grad_out shape {:?}, forward output {:?}",
            grad_out.shape(),
            [n, oh, ow, cout]
        )));
    }
    let k = layer.fan_in();
    let weights = layer.kernel.data();
    let inv_sigma: Vec<T> = sigma.iter().map(|&s| T::one() / s).collect();
    let scale: Vec<T> = (0..cout).map(|j| layer.gamma[j] * inv_sigma[j]).collect();
    let normalized = |p: usize, zv: T| (zv - mu[p % cout]) * inv_sigma[p % cout];

    // gamma and beta gradients need the whole batch before the gradient with
    // respect to z can account for statistics computed from that batch.
    let mut gamma = vec![T::zero(); cout];
    let mut beta = vec![T::zero(); cout];
    for (p, (&gv, &zv)) in grad_out.data().iter().zip(z.data()).enumerate() {
        let j = p % cout;
        beta[j] = beta[j] + gv;
        gamma[j] = gamma[j] + gv * normalized(p, zv);
    }
    let m = T::of((n * oh * ow) as f64);
    let (mean_g, mean_gx): (Vec<T>, Vec<T>) = if batch_stats {
        (beta.iter().map(|&b| b / m).collect(), gamma.iter().map(|&g| g / m).collect())
    } else {
        (vec![T::zero(); cout], vec![T::zero(); cout])
    };

    struct ItemGrads<T> {
        kernel: Vec<T>,
        input: Vec<T>,
    }

    let items = par::map_range(n, |i| {
        let g = grad_out.item(i);
        let zi = z.item(i);
        let mut gz = vec![T::zero(); g.len()];
        for (p, (&gv, &zv)) in g.iter().zip(zi).enumerate() {
            let j = p % cout;
            gz[p] = (gv - mean_g[j] - normalized(p, zv) * mean_gx[j]) * scale[j];
        }
        let cols = im2col(input.item(i), (h, w, c), layer, (oh, ow));
        let mut kernel = vec![T::zero(); k * cout];
        // dW = cols^T * gz
        T::gemm(
            k,
            oh * ow,
            cout,
            T::one(),
            &cols,
            (1, k as isize),
            &gz,
            (cout as isize, 1),
            T::zero(),
            &mut kernel,
            (cout as isize, 1),
        );
        // dcols = gz * W^T
        let mut dcols = vec![T::zero(); oh * ow * k];
        T::gemm(
            oh * ow,
            cout,
            k,
            T::one(),
            &gz,
            (cout as isize, 1),
            weights,
            (1, cout as isize),
            T::zero(),
            &mut dcols,
            (k as isize, 1),
        );
        let input = col2im(&dcols, (h, w, c), layer, (oh, ow));
        ItemGrads { kernel, input }
    });

    let mut grads = LayerGrads::zeros_like(layer);
    grads.gamma = gamma;
    grads.beta = beta;
    let mut grad_input = Vec::with_capacity(n * h * w * c);
    for item in items {
        for (a, b) in grads.kernel.data_mut().iter_mut().zip(&item.kernel) {
            *a = *a + *b;
        }
        grad_input.extend(item.input);
    }
    Ok((Tensor4::from_vec([n, h, w, c], grad_input)?, grads))
}

/// Per-channel mean and standard deviation of a pre-normalization map.
pub fn channel_stats<T: Scalar>(z: &Tensor4<T>) -> (Vec<f64>, Vec<f64>) {
    let c = z.shape()[3];
    let count = (z.len() / c.max(1)).max(1) as f64;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, &v) in z.data().iter().enumerate() {
        let v = v.as_f64();
        sum[i % c] += v;
        sq[i % c] += v * v;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
        .collect();
    (mean, std)
}

/// `max(x, 0)`; NaN passes through so that divergence stays visible.
pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() })
}

/// Gradient through a ReLU given the activation's input (or output; the masks agree).
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "relu backward: {:?} vs {:?}",
            x.shape(),
            grad.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

/// Non-overlapping `size x size` average pooling (trailing rows/columns dropped).
pub fn avgpool_forward<T: Scalar>(x: &Tensor4<T>, size: usize) -> Result<Tensor4<T>> {
    let [n, h, w, c] = x.shape();
    if size == 0 || h < size || w < size {
        return Err(Error::Shape(format!(
            "avgpool window {size} on {h}x{w} input"
        )));
    }
    let (oh, ow) = (h / size, w / size);
    let inv = T::one() / T::of((size * size) as f64);
    Ok(Tensor4::from_fn([n, oh, ow, c], |[b, y, xx, ch]| {
        let mut s = T::zero();
        for dy in 0..size {
            for dx in 0..size {
                s = s + x.get([b, y * size + dy, xx * size + dx, ch]);
            }
        }
        s * inv
    }))
}

pub fn avgpool_backward<T: Scalar>(
    grad: &Tensor4<T>,
    input_shape: [usize; 4],
    size: usize,
) -> Result<Tensor4<T>> {
    let [n, h, w, c] = input_shape;
    if size == 0 || grad.shape() != [n, h / size, w / size, c] {
        return Err(Error::Shape(format!(
            "avgpool backward: grad {:?} for input {:?}",
            grad.shape(),
            input_shape
        )));
    }
    let inv = T::one() / T::of((size * size) as f64);
    Ok(Tensor4::from_fn(input_shape, |[b, y, x, ch]| {
        if y / size < h / size && x / size < w / size {
            grad.get([b, y / size, x / size, ch]) * inv
        } else {
            T::zero()
        }
    }))
}

/// Spatial mean per channel: `(n, h, w, c) -> (n, 1, 1, c)`.
pub fn global_avgpool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, h, w, c] = x.shape();
    let inv = T::one() / T::of((h * w).max(1) as f64);
    let mut out = Tensor4::zeros([n, 1, 1, c]);
    for b in 0..n {
        let item = x.item(b);
        for (p, &v) in item.iter().enumerate() {
            let o = b * c + p % c;
            out.data_mut()[o] = out.data()[o] + v;
        }
    }
    out.map(|v| v * inv)
}

pub fn global_avgpool_backward<T: Scalar>(
    grad: &Tensor4<T>,
    input_shape: [usize; 4],
) -> Result<Tensor4<T>> {
    let [n, h, w, c] = input_shape;
    if grad.shape() != [n, 1, 1, c] {
        return Err(Error::Shape(format!(
            "global pool backward: grad {:?} for input {:?}",
            grad.shape(),
            input_shape
        )));
    }
    let inv = T::one() / T::of((h * w).max(1) as f64);
    Ok(Tensor4::from_fn(input_shape, |[b, _, _, ch]| {
        grad.get([b, 0, 0, ch]) * inv
    }))
}

/// Fully-connected layer on `(n, 1, 1, f)` features with weights `(1, 1, f, out)`.
pub fn fc_forward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
) -> Result<Tensor4<T>> {
    let [n, ih, iw, f] = input.shape();
    let [_, _, wf, out] = weight.shape();
    if ih != 1 || iw != 1 {
        return Err(Error::Shape(format!("fc input must be n x 1 x 1 x f, got {:?}", input.shape())));
    }
    if wf != f {
        return Err(Error::dim("fc: input features", wf, f));
    }
    if bias.len() != out {
        return Err(Error::dim("fc: bias length", out, bias.len()));
    }
    let mut data = Vec::with_capacity(n * out);
    for _ in 0..n {
        data.extend_from_slice(bias);
    }
    T::gemm(
        n,
        f,
        out,
        T::one(),
        input.data(),
        (f as isize, 1),
        weight.data(),
        (out as isize, 1),
        T::one(),
        &mut data,
        (out as isize, 1),
    );
    Tensor4::from_vec([n, 1, 1, out], data)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn fc_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let [n, _, _, f] = input.shape();
    let out = weight.shape()[3];
    if grad_out.shape() != [n, 1, 1, out] {
        return Err(Error::Shape(format!(
            "fc backward: grad {:?}, expected {:?}",
            grad_out.shape(),
            [n, 1, 1, out]
        )));
    }
    let mut gw = vec![T::zero(); f * out];
    T::gemm(
        f,
        n,
        out,
        T::one(),
        input.data(),
        (1, f as isize),
        grad_out.data(),
        (out as isize, 1),
        T::zero(),
        &mut gw,
        (out as isize, 1),
    );
    let mut gi = vec![T::zero(); n * f];
    T::gemm(
        n,
        out,
        f,
        T::one(),
        grad_out.data(),
        (out as isize, 1),
        weight.data(),
        (1, out as isize),
        T::zero(),
        &mut gi,
        (f as isize, 1),
    );
    let mut gb = vec![T::zero(); out];
    for b in 0..n {
        for (j, g) in gb.iter_mut().enumerate() {
            *g = *g + grad_out.get([b, 0, 0, j]);
        }
    }
    Ok((
        Tensor4::from_vec([n, 1, 1, f], gi)?,
        Tensor4::from_vec(weight.shape(), gw)?,
        gb,
    ))
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &[usize],
) -> Result<(T, Tensor4<T>)> {
    let [n, _, _, classes] = logits.shape();
    if labels.len() != n {
        return Err(Error::dim("softmax: label count", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let inv_n = T::one() / T::of(n.max(1) as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * classes);
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.item(b);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        loss = loss + (sum.ln() + max - row[label]);
        for (j, e) in exps.iter().enumerate() {
            let p = *e / sum;
            let t = if j == label { T::one() } else { T::zero() };
            grad.push((p - t) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor4::from_vec(logits.shape(), grad)?))
}
