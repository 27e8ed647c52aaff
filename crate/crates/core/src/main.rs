use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use swsl::data::make_folds;
use swsl::eval::{cross_validate, evaluate, EvalLevel, GridSpec};
use swsl::features::{load_frame_dir, train_gmm, DiagGmm, EmSettings, FrameSequence};
use swsl::pipeline::{run_benchmark, train_method, BenchmarkSpec};
use swsl::synth::{generate, GroundTruth, SynthConfig};
use swsl::{Method, Model, Result, RunConfig, SwslDataset, SwslError};

/// Learning from strongly and weakly labeled data.
///
/// Every command writes JSON and is deterministic given its inputs and seed.
/// Exit codes: 0 success, 1 computation failure, 2 usage or input error.
#[derive(Parser)]
#[command(name = "swsl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its instance-level truth.
    ///
    /// Config keys: seed, dim, num_supervised_pos, num_supervised_neg,
    /// num_pos_bags, num_neg_bags, bag_size, witness_rate, bag_label_noise,
    /// signal_noise_sd, cluster_separation.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Fit a diagonal GMM to the frames of every CSV file in a directory.
    GmmTrain {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        components: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Soft-count histograms of a CSV file (or every CSV in a directory).
    Featurize {
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    ///
    /// Config keys: kernel.{kind: exp_chi2|rbf, gamma: number|"auto", sigma},
    /// graph.{k, sigma, metric: chi2|euclidean},
    /// solver.{lambda1, lambda2, lambda3: number|"auto", cccp_tol,
    /// cccp_max_iters, subproblem_tol, subproblem_max_iters, tie_tol},
    /// svm.{slack_c, tol, max_updates, max_outer}.
    Train {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every instance and bag of a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision at bag or instance level.
    Eval {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long, default_value = "bag")]
        level: EvalLevel,
    },
    /// Instance-level evaluation (same as `eval --level instance`).
    Localize {
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Grid search over λ1 × λ2 with k-fold cross-validation.
    ///
    /// SVM-based methods use the λ1 axis as their slack penalty C.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        method: Method,
        /// `default` or a JSON file with lambda1_values, lambda2_values, selection_metric.
        #[arg(long, default_value = "default")]
        grid: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare methods across bag-label noise levels on synthetic data.
    ///
    /// Config keys: synth (as for `synth`), noise_levels, num_runs,
    /// num_classes, test_pos_bags, test_neg_bags, methods, run (as for `train`).
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Instance-level truth; bag labels and instance labels are used without it.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "class0")]
    class: String,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| SwslError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SwslError::parse(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    fs::write(path, text + "\n").map_err(|e| SwslError::io(path, e))
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn csv_inputs(path: &Path) -> Result<Vec<FrameSequence>> {
    if path.is_dir() {
        load_frame_dir(path)
    } else {
        Ok(vec![FrameSequence::from_csv(path)?])
    }
}

#[derive(Serialize)]
struct Histograms {
    segments: Vec<Segment>,
}

#[derive(Serialize)]
struct Segment {
    id: String,
    histogram: Vec<f64>,
}

#[derive(Serialize)]
struct Predictions {
    instances: BTreeMap<String, f64>,
    bags: BTreeMap<String, f64>,
}

fn cmd_eval(args: &EvalArgs, level: EvalLevel) -> Result<()> {
    let model = Model::load(&args.model)?;
    let data = SwslDataset::load(&args.data)?;
    let truth = args.truth.as_deref().map(GroundTruth::load).transpose()?;
    let report = evaluate(&model, &data, truth.as_ref(), level, &args.class)?;
    write_json(&args.out, &report)?;
    println!("{:?}-level MAP {:.4}", level, report.map_value);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            seed,
            out,
            truth,
        } => {
            let mut cfg = config
                .as_deref()
                .map_or_else(|| Ok(SynthConfig::default()), SynthConfig::load)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (data, gt) = generate(&cfg)?;
            data.save(&out)?;
            gt.save(&truth)?;
            println!(
                "{} instances, {} bags ({} supervised)",
                data.instances().len(),
                data.bags().len(),
                data.num_supervised()
            );
        }
        Command::GmmTrain {
            frames,
            components,
            seed,
            out,
        } => {
            let seqs = load_frame_dir(&frames)?;
            let fit = train_gmm(&seqs, components, seed, &EmSettings::default())?;
            write_json(&out, &fit.gmm)?;
            println!(
                "{} EM iterations, final log-likelihood {:.6}, converged {}",
                fit.log_likelihood_trace.len(),
                fit.log_likelihood_trace.last().copied().unwrap_or(f64::NAN),
                fit.converged
            );
        }
        Command::Featurize { gmm, frames, out } => {
            let gmm: DiagGmm = read_json(&gmm)?;
            gmm.validate()
                .map_err(|e| SwslError::parse(&frames, e.to_string()))?;
            let segments = csv_inputs(&frames)?
                .iter()
                .map(|s| {
                    Ok(Segment {
                        id: s.segment_id.clone(),
                        histogram: gmm.soft_count_histogram(s)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            println!("{} segments featurized", segments.len());
            write_json(&out, &Histograms { segments })?;
        }
        Command::Train {
            method,
            data,
            config,
            out,
        } => {
            let cfg = run_config(config.as_deref())?;
            let data = SwslDataset::load(&data)?;
            let started = Instant::now();
            let model = train_method(method, &data, &cfg)?;
            let secs = started.elapsed().as_secs_f64();
            model.save(&out)?;
            let trace = &model.meta.objective_trace;
            match (trace.first(), trace.last()) {
                (Some(a), Some(b)) => println!(
                    "{method}: objective {a:.6} -> {b:.6} over {} CCCP steps in {secs:.3}s",
                    trace.len() - 1
                ),
                _ => println!(
                    "{method}: {} support vectors in {secs:.3}s",
                    model.alpha.len()
                ),
            }
        }
        Command::Predict { model, data, out } => {
            let model = Model::load(&model)?;
            let data = SwslDataset::load(&data)?;
            let mut instances = BTreeMap::new();
            for inst in data.instances() {
                instances.insert(inst.id.clone(), model.predict_instance(&inst.features)?);
            }
            let mut bags = BTreeMap::new();
            for bag in data.bags() {
                bags.insert(bag.id.clone(), model.predict_bag(&data.bag_features(bag))?);
            }
            println!(
                "scored {} instances and {} bags",
                instances.len(),
                bags.len()
            );
            write_json(&out, &Predictions { instances, bags })?;
        }
        Command::Eval { args, level } => cmd_eval(&args, level)?,
        Command::Localize { args } => cmd_eval(&args, EvalLevel::Instance)?,
        Command::Cv {
            data,
            folds,
            seed,
            method,
            grid,
            config,
            out,
        } => {
            let cfg = run_config(config.as_deref())?;
            let grid = if grid == "default" {
                GridSpec::default()
            } else {
                read_json(Path::new(&grid))?
            };
            let data = SwslDataset::load(&data)?;
            let folds = make_folds(&data, folds, seed)?;
            let report = cross_validate(&data, &folds, &grid, method, &cfg)?;
            println!(
                "{method}: best lambda1 {} lambda2 {} (mean held-out AP {:.4})",
                report.best_lambda1, report.best_lambda2, report.best_score
            );
            write_json(&out, &report)?;
        }
        Command::Benchmark { config, seed, out } => {
            let spec: BenchmarkSpec = match config {
                Some(p) => read_json(&p)?,
                None => BenchmarkSpec::default(),
            };
            let (report, timings) = run_benchmark(&spec, seed)?;
            println!(
                "{:<12} {:>6} {:>9} {:>9} {:>9}",
                "method", "noise", "bag MAP", "inst MAP", "seconds"
            );
            for (row, secs) in report.rows.iter().zip(&timings) {
                println!(
                    "{:<12} {:>6.2} {:>9.4} {:>9.4} {:>9.3}",
                    row.method.name(),
                    row.noise,
                    row.bag_map,
                    row.instance_map,
                    secs
                );
            }
            write_json(&out, &report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
