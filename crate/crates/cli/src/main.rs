use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cirfuse::bundle::{read_bundle, synth_bundle, validate, write_bundle, Protocol, SynthSpec};
use cirfuse::evalkit::{
    ablate, ablation_preset, evaluate, ncap_sweep, rank_bundle, sweep, RunConfig, Side, SweepGrid,
};
use cirfuse::{
    load_bundle, Bundle, ChannelSet, Error, EvalReport, ExclusionPolicy, FusionWeights, Metric, MetricKey,
};

#[derive(Parser)]
#[command(name = "cirfuse", version, about = "Fuse, rank and evaluate composed-image-retrieval embedding bundles")]
#[command(allow_negative_numbers = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a bundle directory and list every violation.
    Validate { bundle: PathBuf },
    /// Evaluate one weight setting and print a JSON report.
    Eval {
        bundle: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a grid of (alpha, beta) for each gamma; CSV output.
    Sweep {
        bundle: PathBuf,
        /// Grid step; must be 1/n.
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        /// Gallery caption weights to sweep.
        #[arg(long, alias = "gamma", value_delimiter = ',', default_value = "0.1,0.2")]
        gammas: Vec<f64>,
        /// Print the best cell for this metric to stderr.
        #[arg(long)]
        best: Option<MetricKey>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Remove channel groups one row at a time; CSV output.
    Ablate {
        bundle: PathBuf,
        /// Standard seven-row ablation; used when no `--drop` is given.
        #[arg(long, value_enum)]
        preset: Option<AblationPreset>,
        /// Custom drop set such as `QF+QV`; repeatable.
        #[arg(long = "drop")]
        drops: Vec<ChannelSet>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Vary the number of averaged captions on one side; CSV output.
    Ncap {
        bundle: PathBuf,
        #[arg(long, default_value = "query")]
        side: Side,
        #[arg(long = "n", value_delimiter = ',', required = true)]
        ns: Vec<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the top-k gallery items for one query as `index<TAB>score`.
    Retrieve {
        bundle: PathBuf,
        #[arg(long = "query-id", alias = "query")]
        query: usize,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic bundle with planted ground truth.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        targets: usize,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 15)]
        target_captions: usize,
        #[arg(long, default_value_t = 15)]
        query_captions: usize,
        /// Captions per item on both sides; overrides the two counts above.
        #[arg(long)]
        ncap: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "multi_gt")]
        protocol: Protocol,
        #[arg(long, default_value_t = 1.0)]
        planted_fraction: f64,
        #[arg(long, value_delimiter = ',')]
        categories: Vec<String>,
        #[arg(long, default_value = "synthetic")]
        dataset: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationPreset {
    Standard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// alpha 0.6, beta 0.4, gamma 0.2
    Semantic,
    /// alpha 0.2, beta 0.6, gamma 0.1
    Visual,
}

#[derive(Args)]
struct RunArgs {
    /// Weight preset the explicit weights below start from.
    #[arg(long, value_enum, default_value = "semantic")]
    weights: Preset,
    /// Query caption weight (overrides the preset).
    #[arg(long)]
    alpha: Option<f64>,
    /// Fine-grained channel weight (overrides the preset).
    #[arg(long)]
    beta: Option<f64>,
    /// Gallery caption weight (overrides the preset).
    #[arg(long)]
    gamma: Option<f64>,
    /// Channels to disable, e.g. `QV` or `QF+TV`.
    #[arg(long)]
    mask: Option<ChannelSet>,
    #[arg(long)]
    query_captions: Option<usize>,
    #[arg(long)]
    target_captions: Option<usize>,
    /// Accept alpha + beta > 1.
    #[arg(long)]
    allow_negative_residual: bool,
    /// Combine raw channels without unit-normalizing them first.
    #[arg(long)]
    no_normalize: bool,
    /// Comma-separated metrics such as `map@10,recall@1`.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<MetricKey>,
    /// Cutoffs for mAP and Recall, e.g. `1,5,10`; ignored with `--metrics`.
    #[arg(long = "k", value_delimiter = ',')]
    ks: Vec<usize>,
    /// Keep each query's reference image among its candidates.
    #[arg(long, conflicts_with = "exclude_ref")]
    keep_reference: bool,
    /// Remove each query's reference image from its candidates (default).
    #[arg(long)]
    exclude_ref: bool,
    #[arg(long)]
    threads: Option<usize>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, bundle: &Bundle) -> RunConfig {
        let mut w = match self.weights {
            Preset::Semantic => FusionWeights::semantic_dominant(),
            Preset::Visual => FusionWeights::visual_dominant(),
        };
        w.alpha = self.alpha.unwrap_or(w.alpha);
        w.beta = self.beta.unwrap_or(w.beta);
        w.gamma = self.gamma.unwrap_or(w.gamma);
        if let Some(m) = self.mask {
            w.mask = ChannelSet::ALL.difference(m);
        }
        w.query_captions_used = self.query_captions;
        w.target_captions_used = self.target_captions;
        w.allow_negative_residual = self.allow_negative_residual;
        w.normalize_channels = !self.no_normalize;
        let mut cfg = RunConfig::for_bundle(bundle).with_weights(w).with_threads(self.threads);
        if !self.metrics.is_empty() {
            cfg.metrics = self.metrics.clone();
        } else if !self.ks.is_empty() {
            cfg.metrics.retain(|m| m.metric == Metric::RecallSubset);
            for kind in [Metric::Recall, Metric::Map].into_iter().rev() {
                cfg.metrics.splice(0..0, self.ks.iter().map(|&k| MetricKey::new(kind, k)));
            }
        }
        if self.keep_reference {
            cfg.exclusion = ExclusionPolicy::None;
        }
        cfg
    }

    fn emit(&self, text: &str) -> Result<(), Error> {
        emit(self.out.as_deref(), text)
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Two-column metric table; category averages follow when present.
fn summary(report: &EvalReport) -> String {
    let mut out = String::new();
    for (key, v) in &report.metrics {
        out.push_str(&format!("{:<18}{v:.6}\n", key.to_string()));
    }
    for (key, v) in report.average.iter().flatten() {
        out.push_str(&format!("{:<18}{v:.6}\n", format!("avg/{key}")));
    }
    out
}

/// Exit status 1 for domain and configuration errors, 2 for storage errors.
fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_storage() { 2 } else { 1 })
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Validate { bundle } => {
            let b = read_bundle(&bundle)?;
            let report = validate(&b);
            if report.is_valid() {
                println!("ok: {} queries, {} gallery items, dim {}", b.query_count(), b.gallery_count(), b.dim());
                return Ok(ExitCode::SUCCESS);
            }
            for v in &report.violations {
                println!("{v}");
            }
            Ok(ExitCode::from(1))
        }
        Command::Eval { bundle, run } => {
            let b = load_bundle(&bundle)?;
            let report = evaluate(&b, &run.config(&b))?;
            run.emit(&report.to_json())?;
            if run.out.is_some() {
                print!("{}", summary(&report));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            bundle,
            step,
            gammas,
            best,
            run,
        } => {
            let b = load_bundle(&bundle)?;
            let result = sweep(&b, &SweepGrid::new(step, gammas), &run.config(&b))?;
            run.emit(&result.to_csv())?;
            if let Some(key) = best {
                match result.best(&key) {
                    Some(c) => eprintln!("best {key}: alpha={} beta={} gamma={}", c.alpha, c.beta, c.gamma),
                    None => eprintln!("metric {key} was not computed"),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            bundle,
            preset,
            drops,
            run,
        } => {
            let b = load_bundle(&bundle)?;
            let mut rows = Vec::new();
            if preset.is_some() || drops.is_empty() {
                rows = ablation_preset();
            }
            rows.extend(drops.iter().map(|d| (format!("drop_{d}"), *d)));
            let result = ablate(&b, &run.config(&b), &rows)?;
            run.emit(&result.to_csv())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ncap { bundle, side, ns, run } => {
            let b = load_bundle(&bundle)?;
            let result = ncap_sweep(&b, &ns, side, &run.config(&b))?;
            run.emit(&result.to_csv())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Retrieve {
            bundle,
            query,
            topk,
            run,
        } => {
            let b = load_bundle(&bundle)?;
            if query >= b.query_count() {
                return Err(Error::Incompatible(format!(
                    "query {query} out of range for {} queries",
                    b.query_count()
                )));
            }
            let lists = rank_bundle(&b, &run.config(&b), topk)?;
            let text: String = lists[query]
                .entries
                .iter()
                .map(|h| format!("{}\t{:.6}\n", h.gallery_index, h.score))
                .collect();
            run.emit(&text)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            out,
            targets,
            queries,
            dim,
            target_captions,
            query_captions,
            ncap,
            seed,
            protocol,
            planted_fraction,
            categories,
            dataset,
        } => {
            let spec = SynthSpec::new(targets, queries, dim)
                .captions(ncap.unwrap_or(target_captions), ncap.unwrap_or(query_captions))
                .seed(seed)
                .protocol(protocol)
                .planted_fraction(planted_fraction)
                .categories(&categories)
                .dataset(dataset);
            let b = synth_bundle(&spec)?;
            write_bundle(&b, &out)?;
            println!("wrote {} queries, {} gallery items to {}", queries, targets, out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors share the configuration-error status
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}
