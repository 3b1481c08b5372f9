//! Layer kernels and whole networks against independent naive references.

mod common;

use common::{random_clusters, random_input, random_network, Topology, TOPOLOGIES};
use csgd_core::network::{build_network, NetworkSpec, PlainSpec};
use csgd_core::ops::{conv_bn_forward, softmax_cross_entropy, LayerParams};
use csgd_core::trim::{collapse, trim_network, Collapse};
use csgd_core::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Six nested loops straight from the definition of a padded, strided convolution.
fn naive_conv_bn(x: &Tensor4<f64>, p: &LayerParams<f64>) -> Tensor4<f64> {
    let [n, h, w, ci] = x.shape();
    let [kh, kw, _, co] = p.kernel.shape();
    let (s, pad) = (p.stride, p.padding);
    let oh = (h + 2 * pad - kh) / s + 1;
    let ow = (w + 2 * pad - kw) / s + 1;
    Tensor4::from_fn([n, oh, ow, co], |[b, y, xo, j]| {
        let mut z = 0.0;
        for a in 0..kh {
            for c in 0..kw {
                let (iy, ix) = ((y * s + a) as isize - pad as isize, (xo * s + c) as isize - pad as isize);
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                    continue;
                }
                for k in 0..ci {
                    z += x.get([b, iy as usize, ix as usize, k]) * p.kernel.get([a, c, k, j]);
                }
            }
        }
        (z - p.mu[j]) / p.sigma[j] * p.gamma[j] + p.beta[j]
    })
}

fn random_layer(rng: &mut ChaCha8Rng, k: usize, ci: usize, co: usize, stride: usize, padding: usize) -> LayerParams<f64> {
    let kernel = Tensor4::from_fn([k, k, ci, co], |_| rng.random_range(-1.0..1.0));
    let mut p = LayerParams::with_kernel(kernel, stride, padding);
    for j in 0..co {
        p.mu[j] = rng.random_range(-0.5..0.5);
        p.sigma[j] = rng.random_range(0.5..2.0);
        p.gamma[j] = rng.random_range(-1.5..1.5);
        p.beta[j] = rng.random_range(-0.5..0.5);
    }
    p
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, stride, padding) in [(3, 1, 1), (3, 2, 1), (3, 1, 0), (1, 1, 0), (1, 2, 0), (3, 2, 0)] {
        let x = Tensor4::from_fn([2, 5, 5, 3], |_| rng.random_range(-1.0..1.0));
        let p = random_layer(&mut rng, k, 3, 4, stride, padding);
        let fast = conv_bn_forward(&x, &p).unwrap();
        let slow = naive_conv_bn(&x, &p);
        assert_eq!(fast.shape(), slow.shape(), "k {k} s {stride} p {padding}");
        let d = fast.max_abs_diff(&slow).unwrap();
        assert!(d < 1e-12, "k {k} s {stride} p {padding}: {d}");

        let fast32 = conv_bn_forward(&x.cast::<f32>(), &p.cast::<f32>()).unwrap();
        let d = fast32.cast::<f64>().max_abs_diff(&slow).unwrap();
        assert!(d < 1e-5, "f32 k {k} s {stride} p {padding}: {d}");
    }
}

#[test]
fn uniform_logits_cost_log_classes() {
    for c in [2usize, 3, 10] {
        let logits = Tensor4::<f64>::filled([4, 1, 1, c], 0.7);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 0, 1]).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-12);
        // Each row of the gradient sums to zero.
        for b in 0..4 {
            let s: f64 = grad.item(b).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }
}

#[test]
fn consumer_map_covers_every_input_channel_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for topology in TOPOLOGIES {
        for _ in 0..20 {
            let net = random_network::<f32>(topology, &mut rng, 3);
            let map = net.consumer_map();
            for l in 0..net.layers().len() {
                let cov = map.coverage(&net, l);
                assert!(cov.iter().all(|&c| c == 1), "{topology:?} layer {l}: {cov:?}");
            }
        }
    }
}

#[test]
fn hand_built_plain_net_matches_layer_by_layer_oracle() {
    let spec = NetworkSpec::Plain(PlainSpec {
        input_channels: 2,
        widths: vec![3, 4],
        strides: vec![1, 2],
        kernel: 3,
        classes: 3,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = build_network::<f64>(&spec, 5).unwrap();
    common::randomize_norm(&mut net, &mut rng);
    let x = random_input(&net, 3, 6, &mut rng);

    let relu = |t: Tensor4<f64>| t.map(|v| v.max(0.0));
    let convs: Vec<usize> = net.conv_layers().collect();
    let mut a = x.clone();
    for &l in &convs {
        a = relu(naive_conv_bn(&a, &net.layer(l).params));
    }
    let [n, h, w, c] = a.shape();
    let head = &net.layer(net.head()).params;
    let classes = head.out_channels();
    let expected = Tensor4::from_fn([n, 1, 1, classes], |[b, _, _, j]| {
        let mut s = head.beta[j];
        for k in 0..c {
            let mean = (0..h * w).map(|i| a.get([b, i / w, i % w, k])).sum::<f64>() / (h * w) as f64;
            s += mean * head.kernel.get([0, 0, k, j]) * head.gamma[j];
        }
        s
    });
    let got = net.forward(&x).unwrap();
    let d = got.max_abs_diff(&expected).unwrap();
    assert!(d < 1e-12, "{d}");
}

#[test]
fn forced_trim_is_lossless_in_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for topology in TOPOLOGIES {
        for case in 0..100 {
            let net = random_network::<f64>(topology, &mut rng, 3);
            let clusters = random_clusters(&net, &mut rng);
            // Collapse by hand first so the original and the trimmed network
            // compute the same function.
            let mut collapsed = net.clone();
            for (&l, cs) in &clusters {
                collapse(collapsed.params_mut(l), cs);
            }
            let trimmed = trim_network(&collapsed, &clusters, Collapse::verified::<f64>()).unwrap();
            let x = random_input(&net, 2, 8, &mut rng);
            let d = collapsed
                .forward(&x)
                .unwrap()
                .max_abs_diff(&trimmed.forward(&x).unwrap())
                .unwrap();
            assert!(d < 1e-9, "{topology:?} case {case}: {d}");

            let kept: usize = net
                .conv_layers()
                .map(|l| clusters.get(&l).map_or(net.layer(l).params.out_channels(), |c| c.len()))
                .sum();
            let widths: usize = trimmed.conv_layers().map(|l| trimmed.layer(l).params.out_channels()).sum();
            assert_eq!(kept, widths, "{topology:?} case {case}");
        }
    }
}

#[test]
fn trimmed_parameter_count_is_analytic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for topology in TOPOLOGIES {
        for _ in 0..30 {
            let net = random_network::<f64>(topology, &mut rng, 4);
            let clusters = random_clusters(&net, &mut rng);
            let trimmed = trim_network(&net, &clusters, Collapse::Forced).unwrap();
            // Each layer keeps one filter per cluster and reads the kept filters
            // of the producers that feed its input.
            let kept = |l: usize| clusters.get(&l).map_or(net.layer(l).params.out_channels(), |c| c.len());
            let map = net.consumer_map();
            let mut expected = 0;
            for l in 0..net.layers().len() {
                let [kh, kw, ci, _] = net.layer(l).params.kernel.shape();
                let inputs = if net.feeds(l).is_empty() {
                    ci
                } else {
                    (0..net.layers().len())
                        .map(|p| map.input_consumers(p).filter(|e| e.consumer == l).count() * kept(p))
                        .sum()
                };
                let per_filter = if net.layer(l).kind.is_conv() { 2 } else { 1 };
                expected += (kh * kw * inputs + per_filter) * kept(l);
            }
            assert_eq!(trimmed.num_params(), expected, "{topology:?}");
            assert!(trimmed.num_params() <= net.num_params());
        }
    }
}

#[test]
fn residual_sums_feed_trimmed_stage_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = random_network::<f64>(Topology::Residual, &mut rng, 2);
    let clusters = random_clusters(&net, &mut rng);
    for g in net.constraint_groups() {
        let reference = &clusters[&g.pacesetter];
        for f in &g.followers {
            assert!(clusters[f].same_partition(reference));
        }
    }
    let trimmed = trim_network(&net, &clusters, Collapse::Forced).unwrap();
    assert!(trimmed.infer_shapes(8, 8).is_ok());
}
