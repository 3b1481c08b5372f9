//! Experiment configuration: a flat `key = value` file with dotted sections.
//!
//! ```text
//! # comments run to end of line
//! network.topology = resnet
//! network.widths = 8, 16, 32
//! optimizer.mode = csgd-direct
//! optimizer.lr = 0:0.03, 30:0.003, 50:0.0003
//! cluster.counts = 5/8
//! run.precision = f64
//! ```
//!
//! Unknown keys are rejected, and every error names the offending key.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::cluster::{even_clusters, kmeans_clusters, propagate_constraints, ClusterMap};
use crate::error::{Error, Result};
use crate::network::{DenseSpec, Network, NetworkSpec, PlainSpec, ResidualSpec};
use crate::optim::{LrSchedule, Mode, OptimizerConfig};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterMethod {
    Even,
    Kmeans,
}

impl FromStr for ClusterMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "even" => Ok(ClusterMethod::Even),
            "kmeans" | "k-means" => Ok(ClusterMethod::Kmeans),
            _ => Err(format!("unknown method `{s}` (expected even or kmeans)")),
        }
    }
}

/// Per-layer filter counts: a uniform ratio such as `5/8`, or explicit
/// `layer:count` pairs such as `0:5, 3:10`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Counts {
    Ratio(usize, usize),
    Explicit(BTreeMap<usize, usize>),
}

impl FromStr for Counts {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if let Some((p, q)) = s.split_once('/') {
            let p: usize = p.trim().parse().map_err(|_| format!("bad ratio `{s}`"))?;
            let q: usize = q.trim().parse().map_err(|_| format!("bad ratio `{s}`"))?;
            if p == 0 || q == 0 || p > q {
                return Err(format!("ratio `{s}` must lie in (0, 1]"));
            }
            return Ok(Counts::Ratio(p, q));
        }
        let mut map = BTreeMap::new();
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let (l, c) = item
                .split_once(':')
                .ok_or_else(|| format!("expected `layer:count`, got `{item}`"))?;
            let l: usize = l.trim().parse().map_err(|_| format!("bad layer id in `{item}`"))?;
            let c: usize = c.trim().parse().map_err(|_| format!("bad count in `{item}`"))?;
            if map.insert(l, c).is_some() {
                return Err(format!("layer {l} listed twice"));
            }
        }
        if map.is_empty() {
            return Err("no counts given".into());
        }
        Ok(Counts::Explicit(map))
    }
}

impl Counts {
    /// Concrete counts for every affected conv layer. Followers inherit from
    /// their pacesetter and may not be listed. `path` labels errors.
    pub fn resolve<T: Scalar>(&self, net: &Network<T>, path: &str) -> Result<BTreeMap<usize, usize>> {
        let groups = net.constraint_groups();
        let is_follower = |l: usize| groups.iter().any(|g| g.followers.contains(&l));
        let mut out = BTreeMap::new();
        match self {
            Counts::Ratio(p, q) => {
                for l in net.conv_layers().filter(|&l| !is_follower(l)) {
                    let c = net.layer(l).params.out_channels();
                    let n = ((c * p) as f64 / *q as f64).round() as usize;
                    out.insert(l, n.clamp(1, c));
                }
            }
            Counts::Explicit(map) => {
                for (&l, &n) in map {
                    let layer = net
                        .layers()
                        .get(l)
                        .filter(|x| x.kind.is_conv())
                        .ok_or_else(|| Error::config(path, format!("layer {l} is not a conv layer")))?;
                    if is_follower(l) {
                        return Err(Error::config(
                            path,
                            format!("layer {l} is a follower; its count is inherited"),
                        ));
                    }
                    let c = layer.params.out_channels();
                    if n == 0 || n > c {
                        return Err(Error::config(
                            path,
                            format!("layer {l}: count {n} exceeds width {c} or is zero"),
                        ));
                    }
                    out.insert(l, n);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub method: ClusterMethod,
    pub counts: Counts,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            method: ClusterMethod::Even,
            counts: Counts::Ratio(5, 8),
            seed: 0,
        }
    }
}

impl ClusterConfig {
    /// Cluster every counted layer's initial kernels and propagate to followers.
    pub fn build<T: Scalar>(&self, net: &Network<T>) -> Result<ClusterMap> {
        let counts = self.counts.resolve(net, "cluster.counts")?;
        let mut sets = ClusterMap::new();
        for (&l, &n) in &counts {
            let p = &net.layer(l).params;
            let cs = match self.method {
                ClusterMethod::Even => even_clusters(l, p.out_channels(), n)?,
                ClusterMethod::Kmeans => kmeans_clusters(l, &p.kernel, n, self.seed)?,
            };
            sets.insert(l, cs);
        }
        propagate_constraints(&net.constraint_groups(), &sets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub size: usize,
    pub classes: usize,
    pub samples: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            size: 12,
            classes: 4,
            samples: 400,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub output_dir: PathBuf,
    pub precision: Precision,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 60,
            batch_size: 64,
            eval_interval: 1,
            output_dir: PathBuf::from("out"),
            precision: Precision::F32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub network_seed: u64,
    pub optimizer: OptimizerConfig,
    /// Fraction of each layer's filters targeted by the Lasso baseline.
    pub prune_fraction: f64,
    pub cluster: ClusterConfig,
    pub data: DataConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        ExperimentConfig {
            network: NetworkSpec::toy_resnet(1, data.classes),
            network_seed: 0,
            optimizer: OptimizerConfig::default(),
            prune_fraction: 3.0 / 8.0,
            cluster: ClusterConfig::default(),
            data,
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("data.classes", "must be at least 2"));
        }
        if d.classes > super::data::MAX_CLASSES {
            return Err(Error::config(
                "data.classes",
                format!("at most {} pattern families exist", super::data::MAX_CLASSES),
            ));
        }
        if d.samples < d.classes {
            return Err(Error::config("data.samples", "must be at least data.classes"));
        }
        if d.size < 4 {
            return Err(Error::config("data.size", "must be at least 4"));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be non-negative"));
        }
        if self.run.batch_size == 0 {
            return Err(Error::config("run.batch_size", "must be positive"));
        }
        if self.run.eval_interval == 0 {
            return Err(Error::config("run.eval_interval", "must be positive"));
        }
        if !(self.prune_fraction >= 0.0 && self.prune_fraction < 1.0) {
            return Err(Error::config("optimizer.prune_fraction", "must lie in [0, 1)"));
        }
        self.network.validate()?;
        self.optimizer.validate()
    }
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), "expected `key = value`"))?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::config(k, "given more than once"));
            }
        }
        Ok(Entries { map })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|v| v.0)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::config(key, format!("`{v}`: {e}"))))
            .transpose()
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .enumerate()
            .map(|(i, s)| {
                s.parse::<T>()
                    .map_err(|e| Error::config(format!("{key}[{i}]"), format!("`{s}`: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            Some((k, (_, line))) => Err(Error::config(k, format!("unknown key (line {line})"))),
            None => Ok(()),
        }
    }
}

fn parse_schedule(key: &str, v: &str) -> Result<LrSchedule> {
    if let Ok(tau) = v.parse::<f64>() {
        return LrSchedule::new(vec![(0, tau)]).map_err(|_| Error::config(key, "must be positive"));
    }
    let mut points = Vec::new();
    for item in v.split(',').map(str::trim) {
        let parsed = item
            .split_once(':')
            .and_then(|(e, t)| Some((e.trim().parse::<usize>().ok()?, t.trim().parse::<f64>().ok()?)));
        points.push(parsed.ok_or_else(|| Error::config(key, format!("expected `epoch:lr`, got `{item}`")))?);
    }
    LrSchedule::new(points).map_err(|e| match e {
        Error::Config { message, .. } => Error::config(key, message),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut e = Entries::parse(text)?;
    let mut cfg = ExperimentConfig::default();

    if let Some(v) = e.get("data.seed")? {
        cfg.data.seed = v;
    }
    if let Some(v) = e.get("data.size")? {
        cfg.data.size = v;
    }
    if let Some(v) = e.get("data.classes")? {
        cfg.data.classes = v;
    }
    if let Some(v) = e.get("data.samples")? {
        cfg.data.samples = v;
    }
    if let Some(v) = e.get("data.noise")? {
        cfg.data.noise = v;
    }

    let classes = cfg.data.classes;
    let kernel: usize = e.get("network.kernel")?.unwrap_or(3);
    let topology = e.raw("network.topology").unwrap_or_else(|| "resnet".into());
    cfg.network = match topology.as_str() {
        "plain" => NetworkSpec::Plain(PlainSpec {
            input_channels: 1,
            widths: e.list("network.widths")?.unwrap_or_else(|| vec![8, 16]),
            strides: e.list("network.strides")?.unwrap_or_default(),
            kernel,
            classes,
        }),
        "resnet" => NetworkSpec::Residual(ResidualSpec {
            input_channels: 1,
            stage_widths: e.list("network.widths")?.unwrap_or_else(|| vec![8, 16, 32]),
            blocks: e.get("network.blocks")?.unwrap_or(2),
            kernel,
            classes,
        }),
        "densenet" => NetworkSpec::Dense(DenseSpec {
            input_channels: 1,
            stem_width: e.get("network.stem_width")?.unwrap_or(8),
            growth: e.get("network.growth")?.unwrap_or(4),
            stage_layers: e.list("network.stage_layers")?.unwrap_or_else(|| vec![3, 3]),
            transition_widths: e.list("network.transition_widths")?.unwrap_or_else(|| vec![10]),
            kernel,
            classes,
        }),
        other => {
            return Err(Error::config(
                "network.topology",
                format!("unknown topology `{other}` (expected plain, resnet or densenet)"),
            ))
        }
    };
    if let Some(v) = e.get("network.seed")? {
        cfg.network_seed = v;
    }

    if let Some(v) = e.raw("optimizer.mode") {
        cfg.optimizer.mode = Mode::parse(&v).ok_or_else(|| {
            Error::config(
                "optimizer.mode",
                format!("unknown mode `{v}` (expected sgd, csgd-direct, csgd-matrix or group-lasso)"),
            )
        })?;
    }
    if let Some(v) = e.raw("optimizer.lr") {
        cfg.optimizer.schedule = parse_schedule("optimizer.lr", &v)?;
    }
    if let Some(v) = e.get("optimizer.weight_decay")? {
        cfg.optimizer.eta = v;
    }
    if let Some(v) = e.get("optimizer.centripetal")? {
        cfg.optimizer.eps = v;
    }
    if let Some(v) = e.get("optimizer.lasso_strength")? {
        cfg.optimizer.lasso_strength = v;
    }
    if let Some(v) = e.get("optimizer.prune_fraction")? {
        cfg.prune_fraction = v;
    }

    if let Some(v) = e.get("cluster.method")? {
        cfg.cluster.method = v;
    }
    if let Some(v) = e.get("cluster.counts")? {
        cfg.cluster.counts = v;
    }
    if let Some(v) = e.get("cluster.seed")? {
        cfg.cluster.seed = v;
    }

    if let Some(v) = e.get("run.epochs")? {
        cfg.run.epochs = v;
    }
    if let Some(v) = e.get("run.batch_size")? {
        cfg.run.batch_size = v;
    }
    if let Some(v) = e.get("run.eval_interval")? {
        cfg.run.eval_interval = v;
    }
    if let Some(v) = e.raw("run.output_dir") {
        cfg.run.output_dir = PathBuf::from(v);
    }
    if let Some(v) = e.raw("run.precision") {
        cfg.run.precision = match v.as_str() {
            "f32" | "32" => Precision::F32,
            "f64" | "64" => Precision::F64,
            _ => return Err(Error::config("run.precision", format!("`{v}`: expected f32 or f64"))),
        };
    }
    if let Some(v) = e.get("run.seed")? {
        cfg.run.seed = v;
    }

    e.finish()?;
    cfg.validate()?;
    Ok(cfg)
}
