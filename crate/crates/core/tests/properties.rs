//! Invariants of the optimizer, clustering and trimming on random networks.

mod common;

use std::collections::BTreeMap;

use common::{random_clusters, random_input, random_network, Topology, TOPOLOGIES};
use csgd_core::cluster::{build_gamma, build_lambda, kmeans_clusters, propagate_constraints, ClusterMap, ClusterSet};
use csgd_core::network::{Gradients, Network};
use csgd_core::optim::{chi, csgd_step_direct, csgd_step_matrix, group_lasso_step, sgd_step, PruneSets};
use csgd_core::trim::{trim_network, Collapse};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn topology() -> impl Strategy<Value = Topology> {
    prop::sample::select(TOPOLOGIES.to_vec())
}

/// A random network, clusters and one batch gradient, all from `seed`.
fn setup(topology: Topology, seed: u64) -> (Network<f64>, ClusterMap, Gradients<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_network::<f64>(topology, &mut rng, 3);
    let clusters = random_clusters(&net, &mut rng);
    let x = random_input(&net, 3, 6, &mut rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
    let grads = net.backward_train(&x, &labels).unwrap().grads;
    (net, clusters, grads)
}

fn kernel_distance(a: &Network<f64>, b: &Network<f64>) -> f64 {
    (0..a.layers().len())
        .map(|l| {
            let (p, q) = (&a.layer(l).params, &b.layer(l).params);
            let d = p.kernel.max_abs_diff(&q.kernel).unwrap();
            let v = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            d.max(v(&p.gamma, &q.gamma)).max(v(&p.beta, &q.beta))
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matrix_form_equals_direct_form(
        topology in topology(),
        seed in any::<u64>(),
        tau in 1e-3..0.3f64,
        eta in 0.0..1e-2f64,
        eps in 0.0..5.0f64,
    ) {
        let (net, clusters, grads) = setup(topology, seed);
        let mut a = net.clone();
        let mut b = net;
        csgd_step_direct(&mut a, &grads, &clusters, tau, eta, eps).unwrap();
        csgd_step_matrix(&mut b, &grads, &clusters, tau, eta, eps).unwrap();
        prop_assert!(kernel_distance(&a, &b) < 1e-12);
    }

    #[test]
    fn deviation_shrinks_by_the_closed_form_factor(
        topology in topology(),
        seed in any::<u64>(),
        tau in 1e-3..0.1f64,
        eta in 0.0..1e-2f64,
        eps in 0.0..5.0f64,
    ) {
        let (mut net, clusters, grads) = setup(topology, seed);
        let before = chi(&net, &clusters);
        csgd_step_direct(&mut net, &grads, &clusters, tau, eta, eps).unwrap();
        let after = chi(&net, &clusters);
        let factor = (1.0 - tau * (eta + eps)).powi(2);
        prop_assert!((after - factor * before).abs() <= 1e-10 * before.max(1e-12), "{after} vs {}", factor * before);
    }

    #[test]
    fn singleton_clusters_are_sgd_bit_for_bit(
        topology in topology(),
        seed in any::<u64>(),
        tau in 1e-3..0.3f64,
        eta in 0.0..1e-2f64,
        eps in 0.0..5.0f64,
    ) {
        let (net, _, grads) = setup(topology, seed);
        let singles: ClusterMap = net
            .conv_layers()
            .map(|l| (l, ClusterSet::singletons(l, net.layer(l).params.out_channels())))
            .collect();
        let mut a = net.clone();
        let mut b = net;
        csgd_step_direct(&mut a, &grads, &singles, tau, eta, eps).unwrap();
        sgd_step(&mut b, &grads, tau, eta).unwrap();
        prop_assert_eq!(kernel_distance(&a, &b), 0.0);
    }

    #[test]
    fn identical_members_stay_identical_in_f32(topology in topology(), seed in any::<u64>()) {
        let (net, clusters, _) = setup(topology, seed);
        let mut net: Network<f32> = net.cast();
        for (&l, cs) in &clusters {
            csgd_core::trim::collapse(net.params_mut(l), cs);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..5 {
            let x = random_input(&net, 4, 6, &mut rng);
            let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let g = net.backward_train(&x, &y).unwrap().grads;
            csgd_step_direct(&mut net, &g, &clusters, 0.05, 1e-4, 3.0).unwrap();
        }
        prop_assert!(chi(&net, &clusters) < 1e-7);
    }

    #[test]
    fn lasso_never_grows_a_penalized_kernel_without_data(
        topology in topology(),
        seed in any::<u64>(),
        tau in 1e-3..0.5f64,
        strength in 0.0..10.0f64,
    ) {
        let (mut net, _, _) = setup(topology, seed);
        let prune: PruneSets = net
            .conv_layers()
            .map(|l| (l, (0..net.layer(l).params.out_channels()).step_by(2).collect()))
            .collect();
        let norms = |n: &Network<f64>| -> Vec<f64> {
            prune
                .iter()
                .flat_map(|(&l, js)| js.iter().map(move |&j| (l, j)))
                .map(|(l, j)| n.layer(l).params.filter(j).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        };
        let before = norms(&net);
        let zero = Gradients::zeros_like(&net);
        group_lasso_step(&mut net, &zero, &prune, tau, 0.0, strength).unwrap();
        for (a, b) in norms(&net).iter().zip(&before) {
            prop_assert!(*a <= *b + 1e-15, "{a} > {b}");
        }
    }

    #[test]
    fn trimming_singletons_changes_nothing(topology in topology(), seed in any::<u64>()) {
        let (net, _, _) = setup(topology, seed);
        let singles: ClusterMap = net
            .conv_layers()
            .map(|l| (l, ClusterSet::singletons(l, net.layer(l).params.out_channels())))
            .collect();
        let once = trim_network(&net, &singles, Collapse::verified::<f64>()).unwrap();
        prop_assert_eq!(&once, &net);
        let twice = trim_network(&once, &singles, Collapse::verified::<f64>()).unwrap();
        prop_assert_eq!(&twice, &net);
    }

    #[test]
    fn propagation_is_idempotent(topology in topology(), seed in any::<u64>()) {
        let (net, clusters, _) = setup(topology, seed);
        let again = propagate_constraints(&net.constraint_groups(), &clusters).unwrap();
        prop_assert_eq!(again, clusters);
    }

    #[test]
    fn gamma_and_lambda_are_consistent(
        width in 1usize..10,
        seed in any::<u64>(),
        eta in 0.0..1e-2f64,
        eps in 0.0..5.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs = common::random_partition(0, width, &mut rng);
        let g = build_gamma::<f64>(&cs);
        let lam = build_lambda::<f64>(&cs, eta, eps).unwrap();
        let gg = g.matmul(&g);
        for r in 0..width {
            let row: f64 = (0..width).map(|c| g.get(r, c)).sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
            for c in 0..width {
                prop_assert!((g.get(r, c) - g.get(c, r)).abs() < 1e-15);
                prop_assert!((gg.get(r, c) - g.get(r, c)).abs() < 1e-12);
                let same = cs.cluster_id(r) == cs.cluster_id(c);
                prop_assert_eq!(g.get(r, c) != 0.0, same);
                let id = if r == c { 1.0 } else { 0.0 };
                let expected = (eta + eps) * id - eps * g.get(r, c);
                prop_assert!((lam.get(r, c) - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn kmeans_is_deterministic_and_partitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = random_network::<f32>(Topology::Plain, &mut rng, 3);
    for l in net.conv_layers() {
        let width = net.layer(l).params.out_channels();
        for count in 1..=width {
            let a = kmeans_clusters(l, &net.layer(l).params.kernel, count, 11).unwrap();
            let b = kmeans_clusters(l, &net.layer(l).params.kernel, count, 11).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), count);
            let mut seen: Vec<usize> = a.clusters().concat();
            seen.sort_unstable();
            assert_eq!(seen, (0..width).collect::<Vec<_>>());
        }
    }
}

#[test]
fn followers_inherit_their_pacesetter_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for topology in [Topology::Residual, Topology::Dense] {
        for _ in 0..20 {
            let net = random_network::<f32>(topology, &mut rng, 3);
            let clusters = random_clusters(&net, &mut rng);
            for g in net.constraint_groups() {
                for f in &g.followers {
                    assert!(clusters[f].same_partition(&clusters[&g.pacesetter]));
                }
            }
            // Dropping a follower's set and propagating restores it.
            let partial: BTreeMap<_, _> = clusters
                .iter()
                .filter(|(l, _)| !net.constraint_groups().iter().any(|g| g.followers.contains(l)))
                .map(|(&l, c)| (l, c.clone()))
                .collect();
            assert_eq!(propagate_constraints(&net.constraint_groups(), &partial).unwrap(), clusters);
        }
    }
}
