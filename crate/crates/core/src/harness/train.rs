//! Training loop and metrics log.
//!
//! Training is sequential and deterministic: one fixed-seed shuffle per epoch,
//! batches processed in order, running normalization statistics folded in
//! after every step. Evaluation is pure and may run batches in parallel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::data::{generate_dataset, Split, SyntheticDataset};
use super::model_io::save_model;
use crate::cluster::{write_manifest, ClusterMap};
use crate::error::{Error, Result};
use crate::network::{build_network, Network, BN_MOMENTUM};
use crate::optim::{chi, lasso_prune_sets, phi, Mode, OptimizerConfig, PruneSets};
use crate::par;
use crate::tensor::{Scalar, Tensor4};

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iteration: usize,
    pub loss: f64,
    pub train_acc: f64,
    /// Held-out accuracy; absent on epochs between evaluations.
    pub eval_acc: Option<f64>,
    pub chi: f64,
    pub phi: f64,
    pub tau: f64,
}

pub const METRICS_HEADER: &str = "epoch,iteration,loss,train_acc,eval_acc,chi,phi,tau";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let eval = r.eval_acc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{:e},{}",
            r.epoch, r.iteration, r.loss, r.train_acc, eval, r.chi, r.phi, r.tau
        );
    }
    s
}

/// Number of rows whose arg-max logit equals the label (ties resolve to the lower class).
pub fn correct<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> usize {
    let classes = logits.shape()[3];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count()
}

/// Accuracy of `net` on `split`.
pub fn evaluate<T: Scalar>(net: &Network<T>, split: &Split, batch: usize) -> Result<f64> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let batch = batch.max(1);
    let chunks = split.len().div_ceil(batch);
    let hits = par::map_range(chunks, |i| -> Result<usize> {
        let idx: Vec<usize> = (i * batch..((i + 1) * batch).min(split.len())).collect();
        let (x, y) = split.batch::<T>(&idx);
        Ok(correct(&net.forward(&x)?, &y))
    });
    let mut total = 0;
    for h in hits {
        total += h?;
    }
    Ok(total as f64 / split.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
}

/// A network bound to its optimizer, clusters and prune sets.
#[derive(Clone, Debug)]
pub struct Trainer<T = f32> {
    pub net: Network<T>,
    pub optimizer: OptimizerConfig,
    pub clusters: ClusterMap,
    pub prune: PruneSets,
    pub iteration: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, optimizer: OptimizerConfig, clusters: ClusterMap, prune: PruneSets) -> Result<Self> {
        optimizer.validate()?;
        Ok(Trainer {
            net,
            optimizer,
            clusters,
            prune,
            iteration: 0,
        })
    }

    /// One optimizer step on a batch.
    pub fn step(&mut self, x: &Tensor4<T>, y: &[usize], tau: f64) -> Result<StepStats> {
        let bp = self.net.backward_train(x, y)?;
        let loss = bp.loss.as_f64();
        let grads_finite = bp
            .grads
            .layers
            .iter()
            .all(|g| g.kernel.is_finite() && g.gamma.iter().chain(&g.beta).all(|v| v.is_finite()));
        if !loss.is_finite() || !grads_finite {
            let at = match self.net.first_non_finite_layer(x) {
                Some(l) => format!("layer {l}"),
                None => "the loss".to_string(),
            };
            return Err(Error::NonFinite(format!(
                "{at} at iteration {} (loss {loss})",
                self.iteration
            )));
        }
        let stats = StepStats {
            loss,
            correct: correct(&bp.logits, y),
            samples: y.len(),
        };
        self.optimizer
            .step(&mut self.net, &bp.grads, tau, &self.clusters, &self.prune)?;
        self.net.update_running_stats(&bp.batch_stats, BN_MOMENTUM);
        self.iteration += 1;
        Ok(stats)
    }

    /// One pass over `split` in a shuffled order; returns mean loss and accuracy.
    pub fn epoch(&mut self, split: &Split, batch: usize, tau: f64, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..split.len()).collect();
        order.shuffle(rng);
        let (mut loss, mut hits) = (0.0, 0);
        for idx in order.chunks(batch.max(1)) {
            let (x, y) = split.batch::<T>(idx);
            let s = self.step(&x, &y, tau)?;
            loss += s.loss * s.samples as f64;
            hits += s.correct;
        }
        let n = split.len().max(1) as f64;
        Ok((loss / n, hits as f64 / n))
    }

    pub fn chi(&self) -> f64 {
        chi(&self.net, &self.clusters)
    }

    pub fn phi(&self) -> f64 {
        phi(&self.net, &self.prune)
    }
}

pub struct TrainOutcome<T = f32> {
    pub network: Network<T>,
    /// Clusters used for training; empty unless a centripetal mode ran.
    pub clusters: ClusterMap,
    /// Lasso targets; empty unless the Lasso baseline ran.
    pub prune: PruneSets,
    pub metrics: Vec<MetricsRow>,
    pub dataset: SyntheticDataset,
}

/// Build the network and data described by `cfg` and train for `cfg.run.epochs`.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.data)?;
    let net: Network<T> = build_network(&cfg.network, cfg.network_seed)?;
    let clusters = if cfg.optimizer.mode.is_csgd() {
        cfg.cluster.build(&net)?
    } else {
        ClusterMap::new()
    };
    let prune = if cfg.optimizer.mode == Mode::GroupLasso {
        lasso_prune_sets(&net, &net.constraint_groups(), cfg.prune_fraction)
    } else {
        PruneSets::new()
    };
    let mut trainer = Trainer::new(net, cfg.optimizer.clone(), clusters, prune)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut metrics = Vec::with_capacity(cfg.run.epochs);
    for epoch in 0..cfg.run.epochs {
        let tau = cfg.optimizer.schedule.at(epoch);
        let (loss, train_acc) = trainer.epoch(&dataset.train, cfg.run.batch_size, tau, &mut rng)?;
        let last = epoch + 1 == cfg.run.epochs;
        let eval_acc = if (epoch + 1) % cfg.run.eval_interval == 0 || last {
            Some(evaluate(&trainer.net, &dataset.test, cfg.run.batch_size)?)
        } else {
            None
        };
        metrics.push(MetricsRow {
            epoch,
            iteration: trainer.iteration,
            loss,
            train_acc,
            eval_acc,
            chi: trainer.chi(),
            phi: trainer.phi(),
            tau,
        });
    }
    Ok(TrainOutcome {
        network: trainer.net,
        clusters: trainer.clusters,
        prune: trainer.prune,
        metrics,
        dataset,
    })
}

/// Write `model.csgd`, `metrics.csv` and (when clustered) `clusters.txt` into `dir`.
pub fn write_outputs<T: Scalar>(outcome: &TrainOutcome<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_model(&outcome.network, &dir.join("model.csgd"))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    if !outcome.clusters.is_empty() {
        fs::write(dir.join("clusters.txt"), write_manifest(&outcome.clusters))?;
    }
    if !outcome.prune.is_empty() {
        let mut s = String::new();
        for (l, set) in &outcome.prune {
            let items: Vec<String> = set.iter().map(|j| j.to_string()).collect();
            let _ = writeln!(s, "{l}: {}", items.join(","));
        }
        fs::write(dir.join("prune.txt"), s)?;
    }
    Ok(())
}

/// Parse `layer: i,j,...` lines as written to `prune.txt`.
pub fn parse_prune_sets(text: &str) -> Result<PruneSets> {
    let mut out = PruneSets::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let bad = || Error::Input(format!("prune manifest line `{line}`"));
        let (l, rest) = line.split_once(':').ok_or_else(bad)?;
        let l: usize = l.trim().parse().map_err(|_| bad())?;
        let set = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        out.insert(l, set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{parse_config, DataConfig};

    fn tiny_config(mode: &str) -> ExperimentConfig {
        parse_config(&format!(
            "network.topology = plain\nnetwork.widths = 4, 4\noptimizer.mode = {mode}\n\
             optimizer.lr = 0.05\noptimizer.centripetal = 0.5\noptimizer.lasso_strength = 0.1\n\
             cluster.counts = 1/2\ndata.samples = 40\ndata.size = 6\nrun.epochs = 2\nrun.batch_size = 8\n\
             run.precision = f64\n"
        ))
        .unwrap()
    }

    #[test]
    fn deterministic_metrics() {
        for mode in ["sgd", "csgd-direct", "group-lasso"] {
            let cfg = tiny_config(mode);
            let a = run_experiment::<f64>(&cfg).unwrap();
            let b = run_experiment::<f64>(&cfg).unwrap();
            assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
            assert_eq!(a.metrics.len(), 2);
            assert_eq!(a.metrics[1].iteration, 2 * 4);
        }
    }

    #[test]
    fn csv_shape() {
        let out = run_experiment::<f64>(&tiny_config("csgd-matrix")).unwrap();
        let csv = metrics_csv(&out.metrics);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert!(lines.all(|l| l.split(',').count() == 8));
        assert!(out.metrics[1].chi < out.metrics[0].chi);
    }

    #[test]
    fn nan_names_a_layer() {
        let cfg = tiny_config("sgd");
        let data = generate_dataset(&DataConfig { samples: 8, size: 6, ..cfg.data.clone() }).unwrap();
        let mut net: Network<f64> = build_network(&cfg.network, 0).unwrap();
        net.params_mut(1).kernel.data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(net, cfg.optimizer.clone(), ClusterMap::new(), PruneSets::new()).unwrap();
        let (x, y) = data.train.batch::<f64>(&[0, 1]);
        match t.step(&x, &y, 0.1) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("layer 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prune_manifest_round_trip() {
        let text = "0: 5,6,7\n3: 1\n";
        let p = parse_prune_sets(text).unwrap();
        assert_eq!(p[&0], vec![5, 6, 7]);
        assert!(parse_prune_sets("x: 1").is_err());
    }
}
