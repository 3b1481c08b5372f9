//! Central finite-difference check of backprop gradients.
//!
//! The numeric side always runs on an `f64` copy of the network so that the
//! reference is accurate regardless of the precision under test. Perturbations
//! that move any ReLU input across zero are skipped: the loss is not
//! differentiable there and the difference quotient is meaningless.

use crate::error::{Error, Result};
use crate::network::{Gradients, Network, Norm, OpKind};
use crate::ops;
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced entries of each parameter tensor.
    pub max_per_tensor: Option<usize>,
    /// Statistics the network normalizes with; in batch mode the reference
    /// loss recomputes them for every perturbation.
    pub norm: Norm,
}

impl GradCheckConfig {
    /// Defaults matched to the precision of `T`.
    pub fn for_scalar<T: Scalar>() -> Self {
        GradCheckConfig {
            step: 1e-6,
            tolerance: if T::BITS == 64 { 1e-6 } else { 1e-3 },
            floor: 1e-3,
            max_per_tensor: None,
            norm: Norm::Running,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation crossed a ReLU kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn worst_layer(&self) -> Option<&LayerCheck> {
        self.layers
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn checked(&self) -> usize {
        self.layers.iter().map(|l| l.checked).sum()
    }
}

/// Check `net.backward` against finite differences.
pub fn grad_check<T: Scalar>(
    net: &Network<T>,
    images: &Tensor4<T>,
    labels: &[usize],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    grad_check_with(net, images, labels, cfg, |n, x, y| Ok(n.backward_with(x, y, cfg.norm)?.grads))
}

/// Check an arbitrary analytic gradient routine against finite differences.
pub fn grad_check_with<T: Scalar>(
    net: &Network<T>,
    images: &Tensor4<T>,
    labels: &[usize],
    cfg: GradCheckConfig,
    analytic: impl Fn(&Network<T>, &Tensor4<T>, &[usize]) -> Result<Gradients<T>>,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::Input(format!("finite-difference step {} must be positive", cfg.step)));
    }
    let grads = analytic(net, images, labels)?;
    let reference: Network<f64> = net.cast();
    let x: Tensor4<f64> = images.cast();
    let base = reference.forward_cached_with(&x, cfg.norm)?.relu_signature(&reference);

    let mut layers = Vec::new();
    for l in 0..net.layers().len() {
        let kind = net.layer(l).kind;
        let g = &grads.layers[l];
        let mut check = LayerCheck {
            layer: l,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        let mut tensors: Vec<(usize, &[T])> = vec![(0, g.kernel.data())];
        if kind != OpKind::Fc {
            tensors.push((1, &g.gamma));
        }
        tensors.push((2, &g.beta));
        for (which, analytic) in tensors {
            let stride = match cfg.max_per_tensor {
                Some(m) if m > 0 => analytic.len().div_ceil(m).max(1),
                _ => 1,
            };
            for (i, &a) in analytic.iter().enumerate().step_by(stride) {
                let eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
                    let mut p = reference.clone();
                    let params = p.params_mut(l);
                    let slot = match which {
                        0 => &mut params.kernel.data_mut()[i],
                        1 => &mut params.gamma[i],
                        _ => &mut params.beta[i],
                    };
                    *slot += delta;
                    let cache = p.forward_cached_with(&x, cfg.norm)?;
                    let (loss, _) = ops::softmax_cross_entropy(cache.logits(), labels)?;
                    Ok((loss, cache.relu_signature(&p)))
                };
                let (plus, sig_plus) = eval(cfg.step)?;
                let (minus, sig_minus) = eval(-cfg.step)?;
                if sig_plus != base || sig_minus != base {
                    check.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let a = a.as_f64();
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
                check.max_rel_error = check.max_rel_error.max(rel);
                check.checked += 1;
            }
        }
        layers.push(check);
    }
    Ok(GradCheckReport {
        layers,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NetworkSpec, PlainSpec};

    fn setup() -> (Network<f64>, Tensor4<f64>, Vec<usize>) {
        let net = build_network(
            &NetworkSpec::Plain(PlainSpec {
                input_channels: 1,
                widths: vec![3],
                strides: vec![],
                kernel: 3,
                classes: 2,
            }),
            11,
        )
        .unwrap();
        let x = Tensor4::from_fn([2, 4, 4, 1], |[n, h, w, _]| ((n * 7 + h * 3 + w) as f64 * 0.37).sin());
        (net, x, vec![0, 1])
    }

    #[test]
    fn backprop_passes() {
        let (net, x, y) = setup();
        let r = grad_check(&net, &x, &y, GradCheckConfig::for_scalar::<f64>()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.checked() > 0);
    }

    #[test]
    fn batch_statistics_backprop_passes() {
        let (net, x, y) = setup();
        let cfg = GradCheckConfig {
            norm: Norm::Batch,
            ..GradCheckConfig::for_scalar::<f64>()
        };
        let r = grad_check(&net, &x, &y, cfg).unwrap();
        assert!(r.passed(), "{r:?}");
        // Holding the batch statistics fixed gives a different gradient.
        let r = grad_check_with(&net, &x, &y, cfg, |n, x, y| Ok(n.backward(x, y)?.grads)).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn sign_flip_is_caught() {
        let (net, x, y) = setup();
        let r = grad_check_with(&net, &x, &y, GradCheckConfig::for_scalar::<f64>(), |n, x, y| {
            let mut g = n.backward(x, y)?.grads;
            let k = g.layers[0].kernel.data_mut();
            k[0] = -k[0] + 1.0;
            Ok(g)
        })
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst_layer().unwrap().layer, 0);
    }
}
