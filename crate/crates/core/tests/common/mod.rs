//! Random networks, normalization states and cluster partitions shared by the
//! integration tests.
#![allow(dead_code)]

use csgd_core::cluster::{propagate_constraints, ClusterMap, ClusterSet};
use csgd_core::network::{build_network, DenseSpec, Network, NetworkSpec, PlainSpec, ResidualSpec};
use csgd_core::{Scalar, Tensor4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    Plain,
    Residual,
    Dense,
}

pub const TOPOLOGIES: [Topology; 3] = [Topology::Plain, Topology::Residual, Topology::Dense];

pub fn random_spec(topology: Topology, rng: &mut ChaCha8Rng, classes: usize) -> NetworkSpec {
    let input_channels = rng.random_range(1..=2);
    match topology {
        Topology::Plain => {
            let depth = rng.random_range(1..=3);
            NetworkSpec::Plain(PlainSpec {
                input_channels,
                widths: (0..depth).map(|_| rng.random_range(2..=7)).collect(),
                strides: (0..depth).map(|i| if i == 1 { 2 } else { 1 }).collect(),
                kernel: if rng.random_bool(0.7) { 3 } else { 1 },
                classes,
            })
        }
        Topology::Residual => NetworkSpec::Residual(ResidualSpec {
            input_channels,
            stage_widths: (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect(),
            blocks: rng.random_range(1..=2),
            kernel: 3,
            classes,
        }),
        Topology::Dense => {
            let stages = rng.random_range(1..=2);
            NetworkSpec::Dense(DenseSpec {
                input_channels,
                stem_width: rng.random_range(2..=5),
                growth: rng.random_range(2..=4),
                stage_layers: (0..stages).map(|_| rng.random_range(1..=3)).collect(),
                transition_widths: (1..stages).map(|_| rng.random_range(3..=6)).collect(),
                kernel: 3,
                classes,
            })
        }
    }
}

/// Move the normalization parameters away from identity so every path matters.
pub fn randomize_norm<T: Scalar>(net: &mut Network<T>, rng: &mut ChaCha8Rng) {
    for l in net.conv_layers().collect::<Vec<_>>() {
        let p = net.params_mut(l);
        for j in 0..p.out_channels() {
            p.mu[j] = T::of(rng.random_range(-0.2..0.2));
            p.sigma[j] = T::of(rng.random_range(0.5..1.5));
            p.gamma[j] = T::of(rng.random_range(0.5..1.5));
            p.beta[j] = T::of(rng.random_range(-0.2..0.2));
        }
    }
    let head = net.head();
    for b in &mut net.params_mut(head).beta {
        *b = T::of(rng.random_range(-0.1..0.1));
    }
}

pub fn random_network<T: Scalar>(topology: Topology, rng: &mut ChaCha8Rng, classes: usize) -> Network<T> {
    let spec = random_spec(topology, rng, classes);
    let mut net = build_network(&spec, rng.random()).expect("random spec is valid");
    randomize_norm(&mut net, rng);
    net
}

/// A random partition of `width` filters into between 1 and `width` clusters.
pub fn random_partition(layer: usize, width: usize, rng: &mut ChaCha8Rng) -> ClusterSet {
    let r = rng.random_range(1..=width);
    let mut order: Vec<usize> = (0..width).collect();
    order.shuffle(rng);
    let mut clusters = vec![Vec::new(); r];
    for (i, &j) in order.iter().enumerate() {
        let c = if i < r { i } else { rng.random_range(0..r) };
        clusters[c].push(j);
    }
    ClusterSet::new(layer, width, clusters).expect("partition")
}

/// Random clusters on every non-follower conv layer, propagated to followers.
pub fn random_clusters<T: Scalar>(net: &Network<T>, rng: &mut ChaCha8Rng) -> ClusterMap {
    let groups = net.constraint_groups();
    let mut sets = ClusterMap::new();
    for l in net.conv_layers() {
        if groups.iter().any(|g| g.followers.contains(&l)) {
            continue;
        }
        sets.insert(l, random_partition(l, net.layer(l).params.out_channels(), rng));
    }
    propagate_constraints(&groups, &sets).expect("pacesetters clustered")
}

pub fn random_input<T: Scalar>(net: &Network<T>, n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor4<T> {
    Tensor4::from_fn([n, size, size, net.input_channels()], |_| T::of(rng.random_range(0.0..1.0)))
}
