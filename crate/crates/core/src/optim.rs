//! Parameter updates: centripetal SGD (direct and matrix form), plain SGD with
//! weight decay and the group-Lasso baseline, plus the redundancy metrics.
//!
//! For filter `j` in cluster `H(j)` the centripetal step is
//!
//! ```text
//! F_j <- F_j + tau * ( -mean_{k in H(j)} dL/dF_k  -  eta F_j  +  eps (mean_{k in H(j)} F_k - F_j) )
//! ```
//!
//! applied to the kernel column and to `gamma`/`beta` of every filter. The
//! running statistics `mu`/`sigma` are not touched. The merged gradient term is
//! identical for all members of a cluster, so the deviation of each member from
//! the cluster mean shrinks by exactly `1 - tau (eta + eps)` per step.

use std::collections::BTreeMap;

use crate::cluster::{build_gamma, build_lambda, ClusterMap, ClusterSet, ConstraintGroup};
use crate::error::{Error, Result};
use crate::network::{Gradients, Network, OpKind};
use crate::ops::LayerParams;
use crate::tensor::Scalar;

/// Filters targeted by zeroing-out regularization, keyed by layer id.
pub type PruneSets = BTreeMap<usize, Vec<usize>>;

/// Piecewise-constant learning rate: `(first epoch, value)` pairs, sorted by epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    points: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(mut points: Vec<(usize, f64)>) -> Result<Self> {
        points.sort_by_key(|p| p.0);
        if points.first().map(|p| p.0) != Some(0) {
            return Err(Error::config("optimizer.lr", "schedule must start at epoch 0"));
        }
        if let Some(p) = points.iter().find(|p| !(p.1 > 0.0 && p.1.is_finite())) {
            return Err(Error::config(
                "optimizer.lr",
                format!("learning rate {} at epoch {} must be positive", p.1, p.0),
            ));
        }
        Ok(LrSchedule { points })
    }

    pub fn constant(tau: f64) -> Self {
        LrSchedule {
            points: vec![(0, tau)],
        }
    }

    /// `initial`, multiplied by `factor` at each listed epoch.
    pub fn step_decay(initial: f64, milestones: &[usize], factor: f64) -> Result<Self> {
        let mut points = vec![(0, initial)];
        let mut v = initial;
        let mut ms = milestones.to_vec();
        ms.sort_unstable();
        for m in ms {
            v *= factor;
            points.push((m, v));
        }
        Self::new(points)
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.points
            .iter()
            .rev()
            .find(|p| p.0 <= epoch)
            .map(|p| p.1)
            .expect("schedule starts at epoch 0")
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sgd,
    CsgdDirect,
    CsgdMatrix,
    GroupLasso,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sgd" => Mode::Sgd,
            "csgd-direct" | "csgd" => Mode::CsgdDirect,
            "csgd-matrix" => Mode::CsgdMatrix,
            "group-lasso" | "lasso" => Mode::GroupLasso,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sgd => "sgd",
            Mode::CsgdDirect => "csgd-direct",
            Mode::CsgdMatrix => "csgd-matrix",
            Mode::GroupLasso => "group-lasso",
        }
    }

    pub fn is_csgd(self) -> bool {
        matches!(self, Mode::CsgdDirect | Mode::CsgdMatrix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub schedule: LrSchedule,
    /// Weight decay.
    pub eta: f64,
    /// Centripetal strength.
    pub eps: f64,
    pub mode: Mode,
    pub lasso_strength: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            schedule: LrSchedule::step_decay(3e-2, &[30, 50], 0.1).expect("valid default"),
            eta: 1e-4,
            eps: 3e-3,
            mode: Mode::Sgd,
            lasso_strength: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, v) in [
            ("optimizer.weight_decay", self.eta),
            ("optimizer.centripetal", self.eps),
            ("optimizer.lasso_strength", self.lasso_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(path, format!("{v} must be non-negative")));
            }
        }
        Ok(())
    }

    /// One update of `net` according to the configured mode.
    pub fn step<T: Scalar>(
        &self,
        net: &mut Network<T>,
        grads: &Gradients<T>,
        tau: f64,
        clusters: &ClusterMap,
        prune: &PruneSets,
    ) -> Result<()> {
        match self.mode {
            Mode::Sgd => sgd_step(net, grads, tau, self.eta),
            Mode::CsgdDirect => csgd_step_direct(net, grads, clusters, tau, self.eta, self.eps),
            Mode::CsgdMatrix => csgd_step_matrix(net, grads, clusters, tau, self.eta, self.eps),
            Mode::GroupLasso => {
                group_lasso_step(net, grads, prune, tau, self.eta, self.lasso_strength)
            }
        }
    }
}

fn check_grads<T: Scalar>(net: &Network<T>, grads: &Gradients<T>) -> Result<()> {
    if grads.layers.len() != net.layers().len() {
        return Err(Error::Structural(format!(
            "gradients for {} layers, network has {}",
            grads.layers.len(),
            net.layers().len()
        )));
    }
    for (l, (layer, g)) in net.layers().iter().zip(&grads.layers).enumerate() {
        if g.kernel.shape() != layer.params.kernel.shape()
            || g.gamma.len() != layer.params.out_channels()
            || g.beta.len() != layer.params.out_channels()
        {
            return Err(Error::Structural(format!(
                "layer {l}: gradient shapes do not match parameters"
            )));
        }
    }
    Ok(())
}

fn check_clusters<T: Scalar>(net: &Network<T>, clusters: &ClusterMap) -> Result<()> {
    for (&l, cs) in clusters {
        let layer = net
            .layers()
            .get(l)
            .ok_or_else(|| Error::Structural(format!("clusters given for missing layer {l}")))?;
        if !layer.kind.is_conv() {
            return Err(Error::Structural(format!("layer {l} is the head and cannot be clustered")));
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

/// The trainable tensors of a layer viewed as `rows x cols` matrices whose
/// column `j` belongs to filter `j`. The head's `gamma` is frozen.
fn trainable<'a, T: Scalar>(
    kind: OpKind,
    params: &'a mut LayerParams<T>,
) -> Vec<(&'a mut [T], usize)> {
    let rows = params.fan_in();
    let mut out = vec![(params.kernel.data_mut(), rows)];
    if kind != OpKind::Fc {
        out.push((params.gamma.as_mut_slice(), 1));
    }
    out.push((params.beta.as_mut_slice(), 1));
    out
}

fn grad_slices<T: Scalar>(kind: OpKind, g: &crate::ops::LayerGrads<T>) -> Vec<&[T]> {
    let mut out = vec![g.kernel.data()];
    if kind != OpKind::Fc {
        out.push(g.gamma.as_slice());
    }
    out.push(g.beta.as_slice());
    out
}

/// `F <- F - tau (g + eta F)` on every trainable parameter.
pub fn sgd_step<T: Scalar>(net: &mut Network<T>, grads: &Gradients<T>, tau: f64, eta: f64) -> Result<()> {
    check_grads(net, grads)?;
    let (tau, eta) = (T::of(tau), T::of(eta));
    for l in 0..net.layers().len() {
        let kind = net.layer(l).kind;
        let gs = grad_slices(kind, &grads.layers[l]);
        for ((w, _), g) in trainable(kind, net.params_mut(l)).into_iter().zip(gs) {
            for (x, &gx) in w.iter_mut().zip(g) {
                *x = *x - tau * (gx + eta * *x);
            }
        }
    }
    Ok(())
}

fn direct_update<T: Scalar>(
    w: &mut [T],
    g: &[T],
    rows: usize,
    cs: &ClusterSet,
    tau: T,
    eta: T,
    eps: T,
) {
    let cols = cs.filters();
    debug_assert_eq!(w.len(), rows * cols);
    for cluster in cs.clusters() {
        let inv = T::one() / T::of(cluster.len() as f64);
        for r in 0..rows {
            let row = r * cols;
            let mut g_sum = T::zero();
            let mut f_sum = T::zero();
            for &k in cluster {
                g_sum = g_sum + g[row + k];
                f_sum = f_sum + w[row + k];
            }
            let (g_mean, f_mean) = (g_sum * inv, f_sum * inv);
            for &j in cluster {
                let f = w[row + j];
                let delta = -g_mean - eta * f + eps * (f_mean - f);
                w[row + j] = f + tau * delta;
            }
        }
    }
}

/// Centripetal step in its per-filter form. Layers without clusters (and the
/// head) are treated as all-singleton clusters, which reduces to SGD with decay.
pub fn csgd_step_direct<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    clusters: &ClusterMap,
    tau: f64,
    eta: f64,
    eps: f64,
) -> Result<()> {
    check_grads(net, grads)?;
    check_clusters(net, clusters)?;
    let (tau, eta, eps) = (T::of(tau), T::of(eta), T::of(eps));
    for l in 0..net.layers().len() {
        let kind = net.layer(l).kind;
        let cout = net.layer(l).params.out_channels();
        let singles;
        let cs = match clusters.get(&l) {
            Some(cs) => cs,
            None => {
                singles = ClusterSet::singletons(l, cout);
                &singles
            }
        };
        let gs = grad_slices(kind, &grads.layers[l]);
        for ((w, rows), g) in trainable(kind, net.params_mut(l)).into_iter().zip(gs) {
            direct_update(w, g, rows, cs, tau, eta, eps);
        }
    }
    Ok(())
}

/// Centripetal step as `W <- W - tau (dL/dW * Gamma + W * Lambda)` with each
/// trainable tensor reshaped to `rows x c_out`.
pub fn csgd_step_matrix<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    clusters: &ClusterMap,
    tau: f64,
    eta: f64,
    eps: f64,
) -> Result<()> {
    check_grads(net, grads)?;
    check_clusters(net, clusters)?;
    let tau_t = T::of(tau);
    for l in 0..net.layers().len() {
        let kind = net.layer(l).kind;
        let cout = net.layer(l).params.out_channels();
        let cs = clusters
            .get(&l)
            .cloned()
            .unwrap_or_else(|| ClusterSet::singletons(l, cout));
        let gamma = build_gamma::<T>(&cs);
        let lambda = build_lambda::<T>(&cs, eta, eps)?;
        let gs = grad_slices(kind, &grads.layers[l]);
        for ((w, rows), g) in trainable(kind, net.params_mut(l)).into_iter().zip(gs) {
            let strides = (cout as isize, 1);
            let mut avg = vec![T::zero(); rows * cout];
            T::gemm(rows, cout, cout, T::one(), g, strides, &gamma.data, strides, T::zero(), &mut avg, strides);
            let mut decay = vec![T::zero(); rows * cout];
            T::gemm(rows, cout, cout, T::one(), w, strides, &lambda.data, strides, T::zero(), &mut decay, strides);
            for ((x, a), d) in w.iter_mut().zip(&avg).zip(&decay) {
                *x = *x - tau_t * (*a + *d);
            }
        }
    }
    Ok(())
}

/// SGD with decay plus the group-Lasso sub-gradient `strength * K_j / |K_j|` on
/// the kernels of the filters in `prune`. The penalty never carries a kernel
/// past the origin: its magnitude is capped at `|K_j| / tau`, and a zero kernel
/// receives none.
pub fn group_lasso_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    prune: &PruneSets,
    tau: f64,
    eta: f64,
    strength: f64,
) -> Result<()> {
    check_grads(net, grads)?;
    check_prune_sets(net, prune)?;
    let mut penalties: Vec<(usize, usize, Vec<T>)> = Vec::new();
    for (&l, filters) in prune {
        let p = &net.layer(l).params;
        for &j in filters {
            let k = p.filter(j);
            let norm = k.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let coef = strength.min(norm / tau) / norm;
            penalties.push((l, j, k.iter().map(|&x| x * T::of(coef)).collect()));
        }
    }
    let mut penalized = grads.clone();
    for (l, j, pen) in penalties {
        let cout = net.layer(l).params.out_channels();
        let g = penalized.layers[l].kernel.data_mut();
        for (r, v) in pen.into_iter().enumerate() {
            g[r * cout + j] = g[r * cout + j] + v;
        }
    }
    sgd_step(net, &penalized, tau, eta)
}

fn check_prune_sets<T: Scalar>(net: &Network<T>, prune: &PruneSets) -> Result<()> {
    for (&l, filters) in prune {
        let layer = net
            .layers()
            .get(l)
            .filter(|layer| layer.kind.is_conv())
            .ok_or_else(|| Error::Structural(format!("prune set for non-conv layer {l}")))?;
        if let Some(&bad) = filters.iter().find(|&&j| j >= layer.params.out_channels()) {
            return Err(Error::Structural(format!(
                "layer {l}: prune index {bad} out of range"
            )));
        }
    }
    Ok(())
}

/// Prune sets for the Lasso baseline: the last `round(fraction * width)`
/// filters of every conv layer outside constraint groups and of every
/// pacesetter; followers mirror their pacesetter.
pub fn lasso_prune_sets<T: Scalar>(
    net: &Network<T>,
    groups: &[ConstraintGroup],
    fraction: f64,
) -> PruneSets {
    let mut out = PruneSets::new();
    for l in net.conv_layers() {
        if groups.iter().any(|g| g.followers.contains(&l)) {
            continue;
        }
        let c = net.layer(l).params.out_channels();
        let n = ((c as f64 * fraction).round() as usize).min(c.saturating_sub(1));
        let set: Vec<usize> = (c - n..c).collect();
        for g in groups.iter().filter(|g| g.pacesetter == l) {
            for &f in &g.followers {
                out.insert(f, set.clone());
            }
        }
        out.insert(l, set);
    }
    out
}

/// Sum over clustered layers and filters of `|K_j - mean_{H(j)} K|^2`.
pub fn chi<T: Scalar>(net: &Network<T>, clusters: &ClusterMap) -> f64 {
    let mut total = 0.0;
    for (&l, cs) in clusters {
        let k = net.layer(l).params.kernel.data();
        let cols = cs.filters();
        let rows = k.len() / cols.max(1);
        for cluster in cs.clusters() {
            for r in 0..rows {
                let row = &k[r * cols..(r + 1) * cols];
                let mean = cluster.iter().map(|&j| row[j].as_f64()).sum::<f64>() / cluster.len() as f64;
                total += cluster
                    .iter()
                    .map(|&j| (row[j].as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
        }
    }
    total
}

/// Sum of squared kernel magnitudes of the filters in `prune`.
pub fn phi<T: Scalar>(net: &Network<T>, prune: &PruneSets) -> f64 {
    prune
        .iter()
        .flat_map(|(&l, filters)| {
            let p = &net.layer(l).params;
            filters
                .iter()
                .map(move |&j| p.filter(j).iter().map(|x| x.as_f64().powi(2)).sum::<f64>())
        })
        .fold(0.0, |a, b| a + b)
}

/// Parameters of the two-point simulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoPointConfig {
    pub tau: f64,
    pub eta: f64,
    pub eps: f64,
    pub steps: usize,
    /// Replace both raw gradients by their mean before stepping.
    pub merged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPointStep {
    /// `delta_a - delta_b` as computed by the update.
    pub delta_diff: Vec<f64>,
    /// `(eta + eps)(b - a)`.
    pub predicted: Vec<f64>,
    /// `|a - b|` before the step.
    pub distance: f64,
    /// Largest sum of term magnitudes in any component of `delta_a` or
    /// `delta_b`; the scale of their rounding error.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPointTrajectory {
    pub steps: Vec<TwoPointStep>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl TwoPointTrajectory {
    /// Largest `|delta_diff - predicted|` over all steps and coordinates.
    pub fn max_identity_residual(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.delta_diff.iter().zip(&s.predicted).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Identity residual relative to the magnitude of the update terms, in
    /// units of machine epsilon.
    pub fn max_identity_ulps(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| {
                let scale = s.scale.max(f64::MIN_POSITIVE);
                s.delta_diff
                    .iter()
                    .zip(&s.predicted)
                    .map(move |(x, y)| (x - y).abs() / scale / f64::EPSILON)
            })
            .fold(0.0, f64::max)
    }

    /// `|a - b|` after each step divided by `|a - b|` before it.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.steps.iter().map(|s| s.distance).collect();
        d.push(dist(&self.a, &self.b));
        d.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Simulate two points pulled toward their midpoint. `grad(a, b)` returns the
/// objective's gradients with respect to `a` and `b`.
pub fn two_point_simulation(
    a0: &[f64],
    b0: &[f64],
    cfg: TwoPointConfig,
    mut grad: impl FnMut(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>),
) -> Result<TwoPointTrajectory> {
    if a0.len() != b0.len() {
        return Err(Error::dim("two-point dimension", a0.len(), b0.len()));
    }
    let (mut a, mut b) = (a0.to_vec(), b0.to_vec());
    let mut steps = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (mut ga, mut gb) = grad(&a, &b);
        if cfg.merged {
            let m: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| 0.5 * (x + y)).collect();
            ga.clone_from(&m);
            gb = m;
        }
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let da: Vec<f64> = (0..a.len())
            .map(|i| -ga[i] - cfg.eta * a[i] + cfg.eps * (mid[i] - a[i]))
            .collect();
        let db: Vec<f64> = (0..b.len())
            .map(|i| -gb[i] - cfg.eta * b[i] + cfg.eps * (mid[i] - b[i]))
            .collect();
        steps.push(TwoPointStep {
            delta_diff: da.iter().zip(&db).map(|(x, y)| x - y).collect(),
            predicted: a.iter().zip(&b).map(|(x, y)| (cfg.eta + cfg.eps) * (y - x)).collect(),
            distance: dist(&a, &b),
            scale: (0..a.len())
                .map(|i| {
                    let terms = |g: f64, x: f64| g.abs() + cfg.eta * x.abs() + cfg.eps * (mid[i] - x).abs();
                    terms(ga[i], a[i]).max(terms(gb[i], b[i]))
                })
                .fold(0.0, f64::max),
        });
        for i in 0..a.len() {
            a[i] += cfg.tau * da[i];
            b[i] += cfg.tau * db[i];
        }
    }
    Ok(TwoPointTrajectory { steps, a, b })
}
