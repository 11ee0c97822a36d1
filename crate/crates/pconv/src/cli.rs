//! Command-line interface. `main` only parses arguments and maps errors to
//! exit codes; everything else lives here so tests can drive it directly.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pconv_core::admm::admm_prune;
use pconv_core::compiler::compile_network;
use pconv_core::data::{synthetic_split, CHANNELS, CLASSES, SIDE};
use pconv_core::exec::run_network;
use pconv_core::model::{forward_reference, Shape3};
use pconv_core::prune::{compression_stats, magnitude_prune, CompressionReport, KeepRatio, PruneMethod};
use pconv_core::util::max_rel_diff;

use crate::bench::{run_bench_with, BenchConfig, Suite};
use crate::config::{read_prune_config, DataConfig};
use crate::error::{write_file, Error, Result};
use crate::format::{read_model, write_model};
use crate::patterns::{derive_patterns, read_patterns, write_patterns};
use crate::plan_io::{emit_plan_text, read_plan, write_plan};
use crate::tensor_io::{random_tensor, read_tensor, write_tensor};
use crate::zoo::{build_model, Arch};

#[derive(Debug, Parser)]
#[command(name = "pconv", version, about = "Pattern-sparse convolution: prune, compile, run and benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ThreadArgs {
    /// Executor worker count [env: PCONV_THREADS; default: available CPUs].
    #[arg(long, env = "PCONV_THREADS", hide_env = true)]
    pub threads: Option<usize>,
}

impl ThreadArgs {
    fn resolve(&self) -> Result<usize> {
        match self.threads {
            Some(0) => Err(pconv_core::Error::Config("--threads must be positive".into()).into()),
            Some(t) => Ok(t),
            None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the pattern library for K patterns as a TOML manifest.
    DerivePatterns {
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a randomly initialized dense model.
    Init {
        /// toy, vgg16 or vgg16-small.
        #[arg(long, default_value = "toy")]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pattern- and connectivity-prune every dense 3x3 conv of a model.
    Prune {
        #[arg(long)]
        model: PathBuf,
        /// Pattern manifest; defaults to the config's pattern_count (4).
        #[arg(long)]
        patterns: Option<PathBuf>,
        /// Fraction of kernels kept, as "a/b" or a decimal.
        #[arg(long)]
        connectivity: Option<String>,
        /// Keep the same number of kernels in every filter.
        #[arg(long)]
        balanced: bool,
        /// magnitude or admm.
        #[arg(long)]
        method: Option<String>,
        /// TOML prune config; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile the pruned convs of a model into a plan file.
    Compile {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        threads: ThreadArgs,
        /// Also print the per-group loop structure.
        #[arg(long)]
        emit_plan: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a compiled model on a tensor file.
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Compare against the unoptimized reference forward pass.
        #[arg(long)]
        check: bool,
    },
    /// Write a seeded random input tensor for a model.
    RandomInput {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print compression factors of a model.
    Stats {
        #[arg(long)]
        model: PathBuf,
    },
    /// Benchmark dense, CSR and pattern executors on a layer suite.
    Bench {
        /// vgg16, resnet50-shapes, mobilenetv2-shapes or toy.
        #[arg(long)]
        suite: String,
        #[command(flatten)]
        threads: ThreadArgs,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        /// Fraction of kernels kept by connectivity pruning.
        #[arg(long, default_value = "1/2")]
        keep: String,
        /// Time the pattern executor at k = 4, 8 and 12.
        #[arg(long)]
        sweep: bool,
        /// Skip the dense and CSR baselines on 3x3 layers.
        #[arg(long)]
        pattern_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn report_line(label: &str, r: &CompressionReport) -> String {
    format!(
        "{label}: pattern {} ({:.4}x), connectivity {} ({:.4}x), combined {} ({:.4}x), macs {} -> {}",
        r.pattern_factor,
        ratio_f64(r.pattern_factor),
        r.connectivity_factor,
        ratio_f64(r.connectivity_factor),
        r.combined_factor,
        ratio_f64(r.combined_factor),
        r.dense_macs,
        r.pruned_macs
    )
}

fn ratio_f64(r: num_rational::Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn print_stats(out: &mut impl Write, model: &pconv_core::model::ModelGraph) -> Result<()> {
    let (total, layers) = compression_stats(model)?;
    for (i, r) in &layers {
        writeln!(out, "{}", report_line(&format!("layer {i}"), r)).ok();
    }
    writeln!(out, "{}", report_line("model", &total)).ok();
    Ok(())
}

/// Executes one command, writing human-readable output to `out`.
pub fn execute(command: Command, out: &mut impl Write) -> Result<()> {
    match command {
        Command::DerivePatterns { k, out: path } => {
            let set = derive_patterns(k)?;
            write_patterns(&path, &set)?;
            writeln!(out, "wrote {} patterns to {}: {:?}", set.len(), path.display(), set.encodings()).ok();
        }
        Command::Init { arch, seed, out: path } => {
            let model = build_model(arch.parse::<Arch>()?, seed)?;
            write_model(&path, &model)?;
            writeln!(out, "wrote {} layers to {}", model.layers.len(), path.display()).ok();
        }
        Command::Prune { model, patterns, connectivity, balanced, method, config, seed, out: path } => {
            let (mut cfg, data) = match &config {
                Some(p) => read_prune_config(p)?,
                None => {
                    (pconv_core::prune::PruneConfig { balanced: false, ..Default::default() }, DataConfig::default())
                }
            };
            if let Some(p) = &patterns {
                let set = read_patterns(p)?;
                cfg.pattern_count = set.len();
                cfg.patterns = Some(set);
            }
            if let Some(r) = &connectivity {
                cfg.keep_ratio = r.parse::<KeepRatio>()?;
            }
            cfg.balanced |= balanced;
            if let Some(m) = &method {
                cfg.method = m.parse::<PruneMethod>()?;
            }
            if let Some(s) = seed {
                cfg.admm.seed = s;
            }
            let dense = read_model(&model)?;
            let pruned = match cfg.method {
                PruneMethod::Magnitude => magnitude_prune(&dense, &cfg)?,
                PruneMethod::Admm => {
                    let expected = Shape3::new(CHANNELS, SIDE, SIDE);
                    if dense.input != expected || dense.output_shape()? != Shape3::new(CLASSES, 1, 1) {
                        return Err(pconv_core::Error::Config(format!(
                            "admm trains on the synthetic {CHANNELS}x{SIDE}x{SIDE} {CLASSES}-class data; \
                             the model must take that input and end in {CLASSES} outputs"
                        ))
                        .into());
                    }
                    let split = synthetic_split(data.train, data.validation, cfg.admm.seed);
                    let (pruned, report) = admm_prune(&dense, &split, &cfg)?;
                    for (r, log) in report.rounds.iter().enumerate() {
                        writeln!(
                            out,
                            "admm round {r}: loss {:.4}, primal residual {:.4e}",
                            log.train_loss, log.primal_residual
                        )
                        .ok();
                    }
                    writeln!(
                        out,
                        "validation: loss {:.4}, accuracy {:.2}%",
                        report.validation_loss,
                        100.0 * report.validation_accuracy
                    )
                    .ok();
                    pruned
                }
            };
            write_model(&path, &pruned)?;
            print_stats(out, &pruned)?;
        }
        Command::Compile { model, threads, emit_plan, out: path } => {
            let model = read_model(&model)?;
            let plan = compile_network(&model, threads.resolve()?)?;
            write_plan(&path, &plan)?;
            if emit_plan {
                write!(out, "{}", emit_plan_text(&plan)).ok();
            }
            let compiled = plan.layers.iter().flatten().count();
            writeln!(out, "compiled {compiled} layer(s) for {} worker(s) to {}", plan.threads, path.display()).ok();
        }
        Command::Run { plan, model, input, out: path, check } => {
            let model = read_model(&model)?;
            let plan = read_plan(&plan)?;
            let x = read_tensor(&input)?;
            let y = run_network(&model, &plan, &x)?;
            write_tensor(&path, &y)?;
            writeln!(out, "wrote output {:?} to {}", y.dims(), path.display()).ok();
            if check {
                let reference = forward_reference(&model, &x)?;
                let diff = max_rel_diff(y.data(), reference.data());
                writeln!(out, "max relative difference to reference: {diff:.3e}").ok();
                if diff > 1e-4 {
                    return Err(pconv_core::Error::Validation(format!(
                        "output differs from the reference by {diff:.3e} (limit 1e-4)"
                    ))
                    .into());
                }
            }
        }
        Command::RandomInput { model, batch, seed, out: path } => {
            let model = read_model(&model)?;
            let s = model.input;
            let t = random_tensor([batch, s.c, s.h, s.w], seed)?;
            write_tensor(&path, &t)?;
            writeln!(out, "wrote input {:?} to {}", t.dims(), path.display()).ok();
        }
        Command::Stats { model } => print_stats(out, &read_model(&model)?)?,
        Command::Bench { suite, threads, reps, keep, sweep, pattern_only, seed, csv } => {
            let mut config = BenchConfig {
                threads: threads.resolve()?,
                reps,
                keep: keep.parse::<KeepRatio>()?,
                baselines: !pattern_only,
                seed,
                ..BenchConfig::new(suite.parse::<Suite>()?)
            };
            if sweep {
                config = config.sweep();
            }
            writeln!(
                out,
                "{:<14} {:>4} {:>4} {:>4} {:>2} {:<12} {:>10} {:>10} {:>8}",
                "layer", "H", "C", "F", "k", "variant", "median_ms", "min_ms", "gflops"
            )
            .ok();
            let report = run_bench_with(&config, |r| {
                writeln!(
                    out,
                    "{:<14} {:>4} {:>4} {:>4} {:>2} {:<12} {:>10.3} {:>10.3} {:>8.2}",
                    r.layer,
                    r.shape.h,
                    r.shape.c,
                    r.shape.f,
                    r.k,
                    r.variant.name(),
                    r.median_ms,
                    r.min_ms,
                    r.gflops()
                )
                .ok();
            })?;
            if let Some(path) = csv {
                write_file(&path, report.to_csv().as_bytes())?;
            }
        }
    }
    Ok(())
}

/// `error[kind]: message` as printed by the binary.
pub fn render_error(e: &Error) -> String {
    format!("error[{}]: {e}", e.kind())
}
