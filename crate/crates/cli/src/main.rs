use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use csgd_core::cluster::{parse_manifest, write_manifest, ClusterMap};
use csgd_core::gradcheck::{grad_check, GradCheckConfig};
use csgd_core::harness::{
    generate_dataset, load_model, parse_config, parse_prune_sets, run_experiment, save_model, write_outputs,
    ClusterConfig, ClusterMethod, Counts, ExperimentConfig, Precision,
};
use csgd_core::network::{build_network, Network};
use csgd_core::optim::{chi, phi};
use csgd_core::trim::{check_constraints, magnitude_prune, trim_network, verify_equivalence, Collapse, StructureReport, VerifyConfig};
use csgd_core::Scalar;

#[derive(Parser)]
#[command(name = "csgd", version, about = "Centripetal SGD: train, cluster, trim and verify small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster a model's filters and write a manifest (followers inherit their pacesetter's clusters).
    Cluster {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "even")]
        method: String,
        /// `5/8` or `layer:count,...`.
        #[arg(long)]
        counts: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove identical filters; refuses unless clusters are identical or `--force` is given.
    Trim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Collapse clusters to their mean instead of checking they already agree.
        #[arg(long)]
        force: bool,
        /// Input image side used for the FLOP report.
        #[arg(long, default_value_t = 12)]
        size: usize,
    },
    /// Keep the largest-norm filters per layer (destructive baseline).
    PruneMagnitude {
        #[arg(long)]
        model: PathBuf,
        /// Kept filters per layer: `5/8` or `layer:count,...`.
        #[arg(long)]
        counts: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        size: usize,
    },
    /// Compare two models on random inputs; exit status 0 iff they agree within `--tol`.
    Verify {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        trimmed: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 12)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of backprop on the configured network.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Entries checked per parameter tensor (0 = all).
        #[arg(long, default_value_t = 64)]
        per_tensor: usize,
        /// Batch size of the probe batch.
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Print the cluster deviation (and the penalized-filter magnitude given `--prune`).
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        prune: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load(path: &Path) -> Result<Network> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn load_clusters(path: &Path) -> Result<ClusterMap> {
    parse_manifest(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn parse_counts(s: &str) -> Result<Counts> {
    s.parse::<Counts>()
        .map_err(|e| anyhow::anyhow!("config error at `counts`: {e}"))
}

fn train<T: Scalar>(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let outcome = run_experiment::<T>(cfg)?;
    write_outputs(&outcome, dir)?;
    let last = outcome.metrics.last();
    println!(
        "trained {} epochs: loss {:.4}, eval accuracy {:.4}, chi {:e}, phi {:e}; wrote {}",
        outcome.metrics.len(),
        last.map_or(f64::NAN, |m| m.loss),
        last.and_then(|m| m.eval_acc).unwrap_or(f64::NAN),
        last.map_or(0.0, |m| m.chi),
        last.map_or(0.0, |m| m.phi),
        dir.display()
    );
    Ok(())
}

fn gradcheck<T: Scalar>(cfg: &ExperimentConfig, per_tensor: usize, batch: usize) -> Result<bool> {
    let net: Network<T> = build_network(&cfg.network, cfg.network_seed)?;
    let data = generate_dataset(&cfg.data)?;
    let idx: Vec<usize> = (0..batch.min(data.train.len()).max(1)).collect();
    let (x, y) = data.train.batch::<T>(&idx);
    let mut gc = GradCheckConfig::for_scalar::<T>();
    gc.max_per_tensor = (per_tensor > 0).then_some(per_tensor);
    let report = grad_check(&net, &x, &y, gc)?;
    for l in &report.layers {
        println!(
            "layer {:>3}: max rel error {:.3e} ({} checked, {} skipped at kinks)",
            l.layer, l.max_rel_error, l.checked, l.skipped
        );
    }
    println!(
        "{}: max rel error {:.3e}, tolerance {:.0e}",
        if report.passed() { "PASS" } else { "FAIL" },
        report.max_rel_error(),
        report.tolerance
    );
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = parse_config(&read(&config)?)?;
            let dir = out.unwrap_or_else(|| cfg.run.output_dir.clone());
            match cfg.run.precision {
                Precision::F32 => train::<f32>(&cfg, &dir),
                Precision::F64 => train::<f64>(&cfg, &dir),
            }
        }
        Command::Cluster {
            model,
            method,
            counts,
            seed,
            out,
        } => {
            let net = load(&model)?;
            let method: ClusterMethod = method
                .parse()
                .map_err(|e| anyhow::anyhow!("config error at `method`: {e}"))?;
            let cfg = ClusterConfig {
                method,
                counts: parse_counts(&counts)?,
                seed,
            };
            let sets = cfg.build(&net)?;
            fs::write(&out, write_manifest(&sets))?;
            println!("wrote clusters for {} layers to {}", sets.len(), out.display());
            Ok(())
        }
        Command::Trim {
            model,
            clusters,
            out,
            force,
            size,
        } => {
            let net = load(&model)?;
            let sets = load_clusters(&clusters)?;
            let mode = if force { Collapse::Forced } else { Collapse::verified::<f32>() };
            let trimmed = trim_network(&net, &sets, mode)?;
            save_model(&trimmed, &out)?;
            println!("{}", StructureReport::new(&net, &trimmed, size, size)?.to_json());
            Ok(())
        }
        Command::PruneMagnitude {
            model,
            counts,
            out,
            size,
        } => {
            let net = load(&model)?;
            let keep: BTreeMap<usize, usize> = parse_counts(&counts)?.resolve(&net, "counts")?;
            let pruned = magnitude_prune(&net, &keep)?;
            save_model(&pruned, &out)?;
            println!("{}", StructureReport::new(&net, &pruned, size, size)?.to_json());
            Ok(())
        }
        Command::Verify {
            original,
            trimmed,
            samples,
            tol,
            size,
            seed,
        } => {
            let a = load(&original)?;
            let b = load(&trimmed)?;
            let cfg = VerifyConfig {
                seed,
                ..VerifyConfig::new(samples, tol, size, size)
            };
            let report = verify_equivalence(&a, &b, cfg)?;
            println!("{}", report.to_json());
            if !report.passed {
                bail!(
                    "verification failed: max logit difference {:e} exceeds {:e}",
                    report.max_abs_diff,
                    tol
                );
            }
            Ok(())
        }
        Command::Gradcheck {
            config,
            per_tensor,
            batch,
        } => {
            let cfg = parse_config(&read(&config)?)?;
            let passed = match cfg.run.precision {
                Precision::F32 => gradcheck::<f32>(&cfg, per_tensor, batch)?,
                Precision::F64 => gradcheck::<f64>(&cfg, per_tensor, batch)?,
            };
            if !passed {
                bail!("gradient check failed");
            }
            Ok(())
        }
        Command::Metrics { model, clusters, prune } => {
            let net = load(&model)?;
            let sets = load_clusters(&clusters)?;
            check_constraints(&net, &sets)?;
            println!("chi {:e}", chi(&net, &sets));
            if let Some(p) = prune {
                let prune = parse_prune_sets(&read(&p)?)?;
                for (&l, set) in &prune {
                    let width = net
                        .layers()
                        .get(l)
                        .filter(|x| x.kind.is_conv())
                        .map(|x| x.params.out_channels())
                        .with_context(|| format!("prune set for non-conv layer {l}"))?;
                    if let Some(j) = set.iter().find(|&&j| j >= width) {
                        bail!("prune set for layer {l}: filter {j} out of range {width}");
                    }
                }
                println!("phi {:e}", phi(&net, &prune));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
