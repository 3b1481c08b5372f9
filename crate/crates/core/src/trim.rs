//! Lossless removal of identical filters, and the destructive magnitude baseline.
//!
//! Trimming a layer keeps the first filter of each cluster. Because the removed
//! filters produce the same channel as the survivor, every consumer kernel can
//! fold the input slices of a cluster into the survivor's slice and the
//! composed function is unchanged. Layers tied by residual additions share one
//! remaining set; dense consumers are patched at each producer's concat offset.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{ClusterMap, ClusterSet, ConstraintGroup};
use crate::error::{Error, Result};
use crate::network::{ConsumerMap, Network};
use crate::ops::LayerParams;
use crate::optim::PruneSets;
use crate::par;
use crate::tensor::{Scalar, Tensor4};

/// Sorted indices of the filters that survive in one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemainingSet {
    pub layer: usize,
    pub indices: Vec<usize>,
}

impl RemainingSet {
    pub fn all(layer: usize, width: usize) -> Self {
        RemainingSet {
            layer,
            indices: (0..width).collect(),
        }
    }
}

/// The minimum of every cluster.
pub fn remaining_set(cs: &ClusterSet) -> RemainingSet {
    let mut indices: Vec<usize> = cs.clusters().iter().map(|c| c[0]).collect();
    indices.sort_unstable();
    RemainingSet {
        layer: cs.layer(),
        indices,
    }
}

/// What to do about residual intra-cluster deviation before merging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Collapse {
    /// Refuse if any cluster deviates by more than `tolerance` (relative to the
    /// layer's largest magnitude), then write cluster means.
    Verified { tolerance: f64 },
    /// Write cluster means unconditionally.
    Forced,
    /// Merge as if the filters were identical. Only useful as a negative control.
    None,
}

impl Collapse {
    pub fn verified<T: Scalar>() -> Self {
        Collapse::Verified {
            tolerance: T::IDENTICAL_TOL,
        }
    }
}

fn trainable<T: Scalar>(p: &LayerParams<T>) -> [(&[T], usize); 3] {
    [(p.kernel.data(), p.fan_in()), (&p.gamma, 1), (&p.beta, 1)]
}

/// Largest deviation of a trainable component from its cluster mean, relative
/// to the component's largest magnitude (floored at one). Running statistics
/// are excluded: they are reconciled by the collapse.
pub fn max_deviation<T: Scalar>(params: &LayerParams<T>, cs: &ClusterSet) -> f64 {
    let cols = params.out_channels();
    let mut worst = 0.0f64;
    for (v, rows) in trainable(params) {
        let scale = v.iter().fold(1.0f64, |m, x| m.max(x.as_f64().abs()));
        for cluster in cs.clusters() {
            for r in 0..rows {
                let row = &v[r * cols..(r + 1) * cols];
                let mean = cluster.iter().map(|&j| row[j].as_f64()).sum::<f64>() / cluster.len() as f64;
                for &j in cluster {
                    worst = worst.max((row[j].as_f64() - mean).abs() / scale);
                }
            }
        }
    }
    worst
}

/// Replace every member of each cluster by the cluster mean, for the kernel,
/// `gamma`, `beta` and the running `mu`, `sigma`.
pub fn collapse<T: Scalar>(params: &mut LayerParams<T>, cs: &ClusterSet) {
    let cols = params.out_channels();
    let fan_in = params.fan_in();
    let mean_into = |v: &mut [T], rows: usize| {
        for cluster in cs.clusters().iter().filter(|c| c.len() > 1) {
            for r in 0..rows {
                let row = &mut v[r * cols..(r + 1) * cols];
                let mean = cluster.iter().map(|&j| row[j].as_f64()).sum::<f64>() / cluster.len() as f64;
                for &j in cluster {
                    row[j] = T::of(mean);
                }
            }
        }
    };
    mean_into(params.kernel.data_mut(), fan_in);
    mean_into(&mut params.gamma, 1);
    mean_into(&mut params.beta, 1);
    mean_into(&mut params.mu, 1);
    mean_into(&mut params.sigma, 1);
}

/// Fold the input-channel slices of each cluster of `layer` into the
/// surviving slice, in every consumer that reads the layer's channels.
pub fn merge_consumer_inputs<T: Scalar>(
    net: &mut Network<T>,
    map: &ConsumerMap,
    layer: usize,
    cs: &ClusterSet,
) -> Result<()> {
    if cs.filters() != net.layer(layer).params.out_channels() {
        return Err(Error::dim(
            format!("layer {layer} cluster width"),
            net.layer(layer).params.out_channels(),
            cs.filters(),
        ));
    }
    let entries: Vec<_> = map.input_consumers(layer).copied().collect();
    for e in entries {
        let kernel = &mut net.params_mut(e.consumer).kernel;
        let [kh, kw, cin, cout] = kernel.shape();
        let data = kernel.data_mut();
        for cluster in cs.clusters().iter().filter(|c| c.len() > 1) {
            let survivor = e.offset + cluster[0];
            for &k in &cluster[1..] {
                let from = e.offset + k;
                for uv in 0..kh * kw {
                    let base = uv * cin * cout;
                    for o in 0..cout {
                        let add = data[base + from * cout + o];
                        let dst = &mut data[base + survivor * cout + o];
                        *dst = *dst + add;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Keep only the filters in `rs` (all five components).
pub fn slice_layer<T: Scalar>(params: &LayerParams<T>, rs: &RemainingSet) -> Result<LayerParams<T>> {
    let pick = |v: &[T]| -> Result<Vec<T>> {
        rs.indices
            .iter()
            .map(|&i| {
                v.get(i).copied().ok_or_else(|| {
                    Error::Input(format!("layer {}: filter {i} out of range", rs.layer))
                })
            })
            .collect()
    };
    Ok(LayerParams {
        kernel: params.kernel.select(3, &rs.indices)?,
        mu: pick(&params.mu)?,
        sigma: pick(&params.sigma)?,
        gamma: pick(&params.gamma)?,
        beta: pick(&params.beta)?,
        stride: params.stride,
        padding: params.padding,
    })
}

/// Keep the consumer input channels `offset + i` for `i` in `rs`, together
/// with all channels outside `[offset, offset + width)`.
pub fn slice_consumer_inputs<T: Scalar>(
    params: &LayerParams<T>,
    rs: &RemainingSet,
    offset: usize,
    width: usize,
) -> Result<LayerParams<T>> {
    let cin = params.in_channels();
    if offset + width > cin {
        return Err(Error::Input(format!(
            "producer block [{offset}, {}) exceeds {cin} input channels",
            offset + width
        )));
    }
    if let Some(&bad) = rs.indices.iter().find(|&&i| i >= width) {
        return Err(Error::Input(format!("input channel {bad} out of range {width}")));
    }
    let keep: Vec<usize> = (0..offset)
        .chain(rs.indices.iter().map(|&i| offset + i))
        .chain(offset + width..cin)
        .collect();
    Ok(LayerParams {
        kernel: params.kernel.select(2, &keep)?,
        ..params.clone()
    })
}

fn check_clusters<T: Scalar>(net: &Network<T>, clusters: &ClusterMap) -> Result<()> {
    for (&l, cs) in clusters {
        let layer = net
            .layers()
            .get(l)
            .ok_or_else(|| Error::Structural(format!("clusters for missing layer {l}")))?;
        if !layer.kind.is_conv() {
            return Err(Error::Structural(format!("layer {l} is the head and cannot be trimmed")));
        }
        if cs.filters() != layer.params.out_channels() {
            return Err(Error::Structural(format!(
                "layer {l}: clusters cover {} filters, layer has {}",
                cs.filters(),
                layer.params.out_channels()
            )));
        }
    }
    Ok(())
}

fn check_groups(groups: &[ConstraintGroup], sets: &ClusterMap) -> Result<()> {
    for g in groups {
        let lead = sets.get(&g.pacesetter);
        for &f in &g.followers {
            let same = match (lead, sets.get(&f)) {
                (Some(a), Some(b)) => a.same_partition(b),
                (None, None) => true,
                (Some(a), None) | (None, Some(a)) => a.is_singletons(),
            };
            if !same {
                return Err(Error::Structural(format!(
                    "follower layer {f} clusters differ from pacesetter layer {}",
                    g.pacesetter
                )));
            }
        }
    }
    Ok(())
}

/// Slice every layer to its remaining set and every consumer to its producers'
/// remaining sets. `map` must describe `net`.
fn apply_remaining<T: Scalar>(
    net: &Network<T>,
    map: &ConsumerMap,
    remaining: &BTreeMap<usize, RemainingSet>,
) -> Result<Network<T>> {
    let n = net.layers().len();
    let mut params: Vec<LayerParams<T>> = Vec::with_capacity(n);
    for l in 0..n {
        let mut p = match remaining.get(&l) {
            Some(rs) => slice_layer(&net.layer(l).params, rs)?,
            None => net.layer(l).params.clone(),
        };
        // Input channels: concatenate each feed's kept block in feed order.
        let mut keep = Vec::new();
        let mut offset = 0;
        let feeds = net.feeds(l);
        if feeds.is_empty() {
            keep.extend(0..p.in_channels());
        }
        for &prod in feeds {
            let width = net.layer(prod).params.out_channels();
            match remaining.get(&prod) {
                Some(rs) => keep.extend(rs.indices.iter().map(|&i| offset + i)),
                None => keep.extend(offset..offset + width),
            }
            debug_assert!(map
                .consumers(prod)
                .iter()
                .any(|e| e.consumer == l && e.offset == offset));
            offset += width;
        }
        if keep.len() != p.in_channels() {
            p.kernel = p.kernel.select(2, &keep)?;
        }
        params.push(p);
    }
    net.with_params(params)
}

/// Collapse, merge and slice all clustered layers. The input network is not modified.
pub fn trim_network<T: Scalar>(net: &Network<T>, clusters: &ClusterMap, mode: Collapse) -> Result<Network<T>> {
    check_clusters(net, clusters)?;
    check_groups(&net.constraint_groups(), clusters)?;
    if let Collapse::Verified { tolerance } = mode {
        for (&l, cs) in clusters {
            let deviation = max_deviation(&net.layer(l).params, cs);
            if deviation > tolerance {
                return Err(Error::NotIdentical {
                    layer: l,
                    deviation,
                    tolerance,
                });
            }
        }
    }

    let map = net.consumer_map();
    let mut work = net.clone();
    if mode != Collapse::None {
        for (&l, cs) in clusters {
            collapse(work.params_mut(l), cs);
        }
    }
    for (&l, cs) in clusters {
        merge_consumer_inputs(&mut work, &map, l, cs)?;
    }
    let remaining: BTreeMap<usize, RemainingSet> = clusters
        .iter()
        .filter(|(_, cs)| !cs.is_singletons())
        .map(|(&l, cs)| (l, remaining_set(cs)))
        .collect();
    if remaining.is_empty() && mode == Collapse::None {
        return Ok(work);
    }
    apply_remaining(&work, &map, &remaining)
}

/// Remove the listed filters outright; consumer input channels are deleted,
/// not summed. Constraint-group members must list the same filters.
pub fn prune_filters<T: Scalar>(net: &Network<T>, prune: &PruneSets) -> Result<Network<T>> {
    let mut remaining = BTreeMap::new();
    for (&l, filters) in prune {
        let layer = net
            .layers()
            .get(l)
            .filter(|x| x.kind.is_conv())
            .ok_or_else(|| Error::Structural(format!("cannot prune non-conv layer {l}")))?;
        let c = layer.params.out_channels();
        if let Some(&bad) = filters.iter().find(|&&j| j >= c) {
            return Err(Error::Input(format!("layer {l}: filter {bad} out of range {c}")));
        }
        let indices: Vec<usize> = (0..c).filter(|j| !filters.contains(j)).collect();
        if indices.is_empty() {
            return Err(Error::Input(format!("layer {l}: cannot prune every filter")));
        }
        remaining.insert(l, RemainingSet { layer: l, indices });
    }
    for g in net.constraint_groups() {
        let lead = remaining.get(&g.pacesetter);
        for &f in &g.followers {
            if remaining.get(&f) != lead.map(|rs| RemainingSet { layer: f, ..rs.clone() }).as_ref() {
                return Err(Error::Structural(format!(
                    "follower layer {f} prune set differs from pacesetter layer {}",
                    g.pacesetter
                )));
            }
        }
    }
    apply_remaining(net, &net.consumer_map(), &remaining)
}

/// Keep the `counts[l]` filters of largest kernel norm in each listed layer.
/// Followers take the pacesetter's selection and may not carry their own count.
pub fn magnitude_prune<T: Scalar>(net: &Network<T>, counts: &BTreeMap<usize, usize>) -> Result<Network<T>> {
    let groups = net.constraint_groups();
    let mut prune = PruneSets::new();
    for (&l, &keep) in counts {
        let layer = net
            .layers()
            .get(l)
            .filter(|x| x.kind.is_conv())
            .ok_or_else(|| Error::config(format!("counts.{l}"), "not a conv layer"))?;
        if let Some(g) = groups.iter().find(|g| g.followers.contains(&l)) {
            if counts.get(&g.pacesetter) != Some(&keep) {
                return Err(Error::config(
                    format!("counts.{l}"),
                    format!("follower of layer {} inherits its count", g.pacesetter),
                ));
            }
            continue;
        }
        let c = layer.params.out_channels();
        if keep == 0 || keep > c {
            return Err(Error::config(format!("counts.{l}"), format!("keep {keep} not in 1..={c}")));
        }
        let p = &layer.params;
        let mut order: Vec<(f64, usize)> = (0..c)
            .map(|j| (p.filter(j).iter().map(|x| x.as_f64().powi(2)).sum::<f64>(), j))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut dropped: Vec<usize> = order[keep..].iter().map(|x| x.1).collect();
        dropped.sort_unstable();
        for g in groups.iter().filter(|g| g.pacesetter == l) {
            for &f in &g.followers {
                prune.insert(f, dropped.clone());
            }
        }
        prune.insert(l, dropped);
    }
    prune_filters(net, &prune)
}

/// Widths, parameter counts and multiply-accumulates of two networks.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureReport {
    pub widths_before: Vec<usize>,
    pub widths_after: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
}

impl StructureReport {
    pub fn new<T: Scalar>(before: &Network<T>, after: &Network<T>, h: usize, w: usize) -> Result<Self> {
        let widths = |n: &Network<T>| n.conv_layers().map(|l| n.layer(l).params.out_channels()).collect();
        Ok(StructureReport {
            widths_before: widths(before),
            widths_after: widths(after),
            params_before: before.num_params(),
            params_after: after.num_params(),
            flops_before: before.flops(h, w)?,
            flops_after: after.flops(h, w)?,
        })
    }

    pub fn param_reduction(&self) -> f64 {
        1.0 - self.params_after as f64 / self.params_before as f64
    }

    pub fn flop_reduction(&self) -> f64 {
        1.0 - self.flops_after as f64 / self.flops_before as f64
    }

    fn write_fields(&self, out: &mut String) {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "  \"widths_before\": [{}],", list(&self.widths_before));
        let _ = writeln!(out, "  \"widths_after\": [{}],", list(&self.widths_after));
        let _ = writeln!(out, "  \"params_before\": {},", self.params_before);
        let _ = writeln!(out, "  \"params_after\": {},", self.params_after);
        let _ = writeln!(out, "  \"param_reduction_pct\": {:.2},", 100.0 * self.param_reduction());
        let _ = writeln!(out, "  \"flops_before\": {},", self.flops_before);
        let _ = writeln!(out, "  \"flops_after\": {},", self.flops_after);
        let _ = write!(out, "  \"flop_reduction_pct\": {:.2}", 100.0 * self.flop_reduction());
    }

    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        self.write_fields(&mut s);
        s.push_str("\n}");
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub samples: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub structure: StructureReport,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"samples\": {},", self.samples);
        let _ = writeln!(s, "  \"max_abs_logit_diff\": {:e},", self.max_abs_diff);
        let _ = writeln!(s, "  \"tolerance\": {:e},", self.tolerance);
        let _ = writeln!(s, "  \"passed\": {},", self.passed);
        self.structure.write_fields(&mut s);
        s.push_str("\n}");
        s
    }
}

/// Options for [`verify_equivalence`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyConfig {
    pub samples: usize,
    pub tolerance: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Samples per forward pass; batches are evaluated in parallel.
    pub batch: usize,
}

impl VerifyConfig {
    pub fn new(samples: usize, tolerance: f64, height: usize, width: usize) -> Self {
        VerifyConfig {
            samples,
            tolerance,
            height,
            width,
            seed: 0,
            batch: 16,
        }
    }
}

/// Largest absolute logit difference between two networks on uniform random inputs.
pub fn verify_equivalence<T: Scalar>(
    original: &Network<T>,
    trimmed: &Network<T>,
    cfg: VerifyConfig,
) -> Result<VerifyReport> {
    if original.input_channels() != trimmed.input_channels() {
        return Err(Error::dim(
            "trimmed network input channels",
            original.input_channels(),
            trimmed.input_channels(),
        ));
    }
    let structure = StructureReport::new(original, trimmed, cfg.height, cfg.width)?;
    let c = original.input_channels();
    let batch = cfg.batch.max(1);
    let chunks = cfg.samples.div_ceil(batch);
    let diffs = par::map_range(chunks, |i| -> Result<f64> {
        let n = batch.min(cfg.samples - i * batch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let x = Tensor4::from_fn([n, cfg.height, cfg.width, c], |_| T::of(rng.random::<f64>()));
        let a = original.forward(&x)?;
        let b = trimmed.forward(&x)?;
        if !a.is_finite() || !b.is_finite() {
            return Ok(f64::INFINITY);
        }
        a.max_abs_diff(&b)
    });
    let mut max_abs_diff = 0.0f64;
    for d in diffs {
        max_abs_diff = max_abs_diff.max(d?);
    }
    Ok(VerifyReport {
        samples: cfg.samples,
        max_abs_diff,
        tolerance: cfg.tolerance,
        passed: max_abs_diff <= cfg.tolerance,
        structure,
    })
}

/// Whether a network is a valid trim target for `clusters` without altering
/// it: every group shares one partition. Exposed for the CLI's early checks.
pub fn check_constraints<T: Scalar>(net: &Network<T>, clusters: &ClusterMap) -> Result<()> {
    check_clusters(net, clusters)?;
    check_groups(&net.constraint_groups(), clusters)
}
