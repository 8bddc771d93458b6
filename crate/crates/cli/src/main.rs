//! `oodkit` command-line driver.
//!
//! Exit status: 0 on success, 2 on invalid input or configuration,
//! 1 on runtime failures.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use oodkit::calibrate::{self, CalibrationConfig, CalibrationFile};
use oodkit::corpus::{self, Format, Role};
use oodkit::embed;
use oodkit::filter::{self, FilterReport, ShellWidth};
use oodkit::generate;
use oodkit::metrics;
use oodkit::model::{self, ClassifierParams};
use oodkit::pipeline::{self, artifacts, Embedded, Inputs, Method, RunConfig};
use oodkit::report;
use oodkit::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "oodkit", version, about = "OOD-aware text classification toolkit")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.alpha=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shortcut for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> oodkit::Result<RunConfig> {
        let mut sets = self.overrides.clone();
        if let Some(seed) = self.seed {
            sets.push(format!("seed={seed}"));
        }
        RunConfig::load(&self.config, &sets)
    }
}

/// Shortcuts for the `generation` and `data` config keys.
#[derive(Args, Clone, Default)]
struct GenerateFlags {
    /// Number of IND seed sentences (`generation.num_seeds`).
    #[arg(long)]
    n: Option<usize>,
    /// Boost factor for bag-of-words tokens (`generation.beta`).
    #[arg(long)]
    beta: Option<f64>,
    /// Maximum sentence length in tokens (`generation.max_length`).
    #[arg(long)]
    max_len: Option<usize>,
    /// Continuations per seed sentence (`generation.samples_per_seed`).
    #[arg(long)]
    samples: Option<usize>,
    /// Bag-of-words file; repeatable, one candidate batch per file.
    #[arg(long)]
    bow_file: Vec<PathBuf>,
    /// Extra text for the n-gram model (`data.neutral_corpus`).
    #[arg(long)]
    neutral_corpus: Option<PathBuf>,
}

impl GenerateFlags {
    fn apply(&self, config: &mut RunConfig) {
        let g = &mut config.generation;
        g.num_seeds = self.n.unwrap_or(g.num_seeds);
        g.beta = self.beta.unwrap_or(g.beta);
        g.max_length = self.max_len.unwrap_or(g.max_length);
        g.samples_per_seed = self.samples.unwrap_or(g.samples_per_seed);
        if !self.bow_file.is_empty() {
            config.data.bow = self.bow_file.clone();
        }
        if let Some(p) = &self.neutral_corpus {
            config.data.neutral_corpus = Some(p.clone());
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on IND data, optionally with an OOD pool.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// OOD training texts (dataset or candidates file). Without it the
        /// entropy weight is forced to zero.
        #[arg(long)]
        ood: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate steered pseudo-OOD candidates.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: GenerateFlags,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Keep candidates inside the boundary shell around the IND cluster.
    Filter {
        #[command(flatten)]
        config: ConfigArgs,
        /// Candidates file written by `generate`.
        #[arg(long)]
        candidates: PathBuf,
        /// Keep all candidates and mark the filter as bypassed.
        #[arg(long)]
        skip_filter: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Filter precomputed embeddings without a config.
    FilterEmbeddings {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        ind: PathBuf,
        /// Absolute shell width.
        #[arg(long, conflicts_with = "rho")]
        width: Option<f64>,
        /// Shell width as a multiple of the boundary radius.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score texts with a trained model (`1 - max softmax probability`).
    Detect {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Texts to score; defaults to IND test followed by OOD eval.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute detection and calibration metrics.
    Evaluate {
        #[command(flatten)]
        config: Option<ConfigArgs>,
        /// Trained model; evaluates IND test against OOD eval.
        #[arg(long, requires = "config")]
        model: Option<PathBuf>,
        /// Score file (`score,is_ood`); detection metrics only.
        #[arg(long, conflicts_with_all = ["model", "config"])]
        scores: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit a Dirichlet calibration map on predicted probabilities.
    Calibrate {
        /// One whitespace-separated probability row per line.
        #[arg(long)]
        preds: PathBuf,
        /// One class id per line.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, conflicts_with = "auto_lambda")]
        lambda: Option<f64>,
        #[arg(long)]
        auto_lambda: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build a comparison table from completed runs.
    Report {
        /// Run directories (or parents of run directories).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run one or more methods end to end and tabulate them.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
        /// msp, msp-er or msp-er-pplm (repeatable; default all three).
        #[arg(long = "method")]
        methods: Vec<String>,
        /// Use every generated candidate; the report flags the bypass.
        #[arg(long)]
        skip_filter: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the bundled synthetic corpus, word vectors and a config.
    /// Re-run one method for each value of a config key (e.g. `train.alpha`
    /// or `filter.width`) and tabulate the metrics in `sweep.csv`.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dotted config key to vary.
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "MSP+ER+PPLM")]
        method: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    Synth {
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn invalid(message: impl Into<String>) -> anyhow::Error {
    oodkit::Error::InvalidInput(message.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_train(args: &ConfigArgs, ood: Option<&Path>, out_dir: &Path) -> Result<()> {
    let config = args.load()?;
    let inputs = Inputs::load(&config)?;
    create_dir(out_dir)?;
    pipeline::write_json(&out_dir.join(artifacts::CONFIG), &config)?;
    let mut warnings = Vec::new();
    let embedded = Embedded::new(&inputs, &mut warnings)?;
    let mut train_cfg = config.train.clone();
    let pool = match ood {
        Some(path) => {
            let ds = corpus::load_dataset(path, Format::from_path(path), Role::OodCandidate, config.data.k)?;
            if let Some(w) = pipeline::leakage_warning(&ds, &inputs.ood_eval, "--ood") {
                warnings.push(w);
            }
            pipeline::embed_checked(&ds, &inputs.vectors, "OOD train", &mut warnings)
        }
        None => {
            if train_cfg.alpha != 0.0 {
                log::info!("no OOD pool given; training with alpha = 0");
            }
            train_cfg.alpha = 0.0;
            Vec::new()
        }
    };
    print_warnings(&warnings);
    let outcome = pipeline::train_stage(&train_cfg, config.data.k, &embedded, &pool, out_dir)?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs; kept epoch {} (val acc {:.4}); checkpoint {}",
        outcome.log.len(),
        outcome.best_epoch,
        outcome.log[outcome.best_epoch - 1].val_acc,
        out_dir.join(artifacts::CHECKPOINT).display()
    );
    log::debug!("final epoch loss {:.6}", last.total);
    Ok(())
}

fn cmd_generate(args: &ConfigArgs, flags: &GenerateFlags, out_dir: &Path) -> Result<()> {
    let mut config = args.load()?;
    flags.apply(&mut config);
    let inputs = Inputs::load(&config)?;
    create_dir(out_dir)?;
    pipeline::write_json(&out_dir.join(artifacts::CONFIG), &config)?;
    let mut warnings = Vec::new();
    let (candidates, _) = pipeline::generate_stage(&config, &inputs, out_dir, &mut warnings)?;
    print_warnings(&warnings);
    println!(
        "generated {} candidates into {}",
        candidates.len(),
        out_dir.join(artifacts::CANDIDATES).display()
    );
    Ok(())
}

fn cmd_filter(args: &ConfigArgs, candidates: &Path, skip: bool, out_dir: &Path) -> Result<()> {
    let mut config = args.load()?;
    config.filter.skip |= skip;
    let inputs = Inputs::load(&config)?;
    create_dir(out_dir)?;
    let (cands, provenance) = generate::read_candidates(candidates, config.data.k)?;
    if cands.is_empty() {
        return Err(invalid(format!("{}: no candidates", candidates.display())));
    }
    let mut warnings = Vec::new();
    let ind = pipeline::embed_checked(&inputs.ind_train, &inputs.vectors, "IND train", &mut warnings);
    let cand_e = pipeline::embed_checked(&cands, &inputs.vectors, "candidates", &mut warnings);
    let (report, _) = pipeline::filter_stage(&config, &ind, &cand_e, out_dir, &mut warnings)?;
    print_warnings(&warnings);
    let kept = oodkit::corpus::Dataset {
        examples: report.kept_indices.iter().map(|&i| cands.examples[i].clone()).collect(),
        ..cands.clone()
    };
    let kept_prov: Vec<_> = report.kept_indices.iter().map(|&i| provenance[i]).collect();
    generate::write_candidates(&out_dir.join("kept.jsonl"), &kept, &kept_prov)?;
    println!(
        "kept {} of {} candidates (d = {:.4}, T = {:.4}{})",
        report.kept_indices.len(),
        report.n_candidates,
        report.d,
        report.t,
        if report.bypassed { ", filter bypassed" } else { "" }
    );
    Ok(())
}

fn cmd_filter_embeddings(candidates: &Path, ind: &Path, width: Option<f64>, rho: Option<f64>, out_dir: &Path) -> Result<()> {
    let shell = match (width, rho) {
        (_, Some(rho)) => ShellWidth::Relative { rho },
        (Some(width), None) => ShellWidth::Absolute { width },
        (None, None) => ShellWidth::default(),
    };
    let vectors = |p: &Path| -> Result<Vec<Vec<f64>>> {
        Ok(embed::load_precomputed(p)?.into_iter().map(|e| e.vector).collect())
    };
    let ind_v = vectors(ind)?;
    let outcome = filter::filter_candidates(&vectors(candidates)?, &ind_v, shell)?;
    create_dir(out_dir)?;
    let report = FilterReport::new(&outcome, ind_v.len(), shell);
    pipeline::write_json(&out_dir.join(artifacts::FILTER), &report)?;
    println!("kept {} of {} candidates", report.kept_indices.len(), report.n_candidates);
    if report.kept_indices.is_empty() {
        return Err(oodkit::Error::NothingKept {
            radius: report.d,
            width: report.t,
        }
        .into());
    }
    Ok(())
}

fn cmd_detect(args: &ConfigArgs, model_path: &Path, input: Option<&Path>, out_dir: &Path) -> Result<()> {
    let config = args.load()?;
    let params = ClassifierParams::load(model_path)?;
    create_dir(out_dir)?;
    let mut warnings = Vec::new();
    match input {
        Some(path) => {
            let wv = embed::load_word_vectors(&config.embedding.word_vectors)?;
            let ds = corpus::load_dataset(path, Format::from_path(path), Role::OodEval, config.data.k)?;
            let embs = pipeline::embed_checked(&ds, &wv, "input", &mut warnings);
            let x = pipeline::matrix(&embs, wv.dim())?;
            let preds = model::predict_batch(&params, x.view())?;
            let out = out_dir.join("detections.csv");
            let mut w = csv_writer(&out)?;
            writeln!(w, "id,predicted_class,msp,ood_score")?;
            for (ex, p) in ds.examples.iter().zip(&preds) {
                writeln!(w, "{},{},{},{}", ex.id, p.argmax(), model::msp(p), model::ood_score(p))?;
            }
            w.flush()?;
            println!("scored {} texts into {}", preds.len(), out.display());
        }
        None => {
            let inputs = Inputs::load(&config)?;
            let embedded = Embedded::new(&inputs, &mut warnings)?;
            let samples = embedded.detection_scores(&params)?;
            metrics::write_scores(&out_dir.join(artifacts::SCORES), &samples)?;
            println!("wrote {} scores into {}", samples.len(), out_dir.join(artifacts::SCORES).display());
        }
    }
    print_warnings(&warnings);
    Ok(())
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

fn cmd_evaluate(config: Option<&ConfigArgs>, model_path: Option<&Path>, scores: Option<&Path>, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    match (config, model_path, scores) {
        (_, _, Some(scores)) => {
            let samples = metrics::read_scores(scores)?;
            let report = metrics::detection_report(&samples, None, metrics::DEFAULT_ECE_BINS)?;
            pipeline::write_json(&out_dir.join(artifacts::METRICS), &report)?;
            println!(
                "AUROC {:.4}  AUPR {:.4}  FPR@90 {:.4}",
                report.auroc, report.aupr, report.fpr_at_90
            );
        }
        (Some(args), Some(model_path), None) => {
            let config = args.load()?;
            let inputs = Inputs::load(&config)?;
            let params = ClassifierParams::load(model_path)?;
            let mut warnings = Vec::new();
            let embedded = Embedded::new(&inputs, &mut warnings)?;
            print_warnings(&warnings);
            let ev = pipeline::evaluate_stage(&config, None, &params, &embedded, out_dir)?;
            let m = &ev.metrics;
            println!(
                "AUROC {:.4}  AUPR {:.4}  FPR@90 {:.4}  ECE {:.4}  ECE+cal {}  IND acc {:.4}",
                m.auroc,
                m.aupr,
                m.fpr_at_90,
                m.ece,
                m.ece_after_calibration.map_or("-".into(), |e| format!("{e:.4}")),
                ev.ind_accuracy
            );
        }
        _ => return Err(invalid("evaluate needs --scores, or --config with --model")),
    }
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| oodkit::Error::parse(path, i + 1, e.to_string()).into())
        })
        .collect()
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| oodkit::Error::parse(path, i + 1, e.to_string()).into())
        })
        .collect()
}

fn cmd_calibrate(preds: &Path, labels: &Path, lambda: Option<f64>, auto_lambda: bool, out_dir: &Path) -> Result<()> {
    let probs = read_rows(preds)?;
    let labels = read_labels(labels)?;
    let mut cfg = CalibrationConfig {
        auto_lambda,
        ..CalibrationConfig::default()
    };
    if let Some(l) = lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(invalid(format!("lambda must be >= 0, got {l}")));
        }
        cfg.lambda = l;
    }
    let fit = calibrate::fit_with(&probs, &labels, &cfg)?;
    create_dir(out_dir)?;
    CalibrationFile::from(&fit).save(&out_dir.join(artifacts::CALIBRATION))?;
    println!(
        "lambda {}: NLL {:.6} (identity {:.6})",
        fit.lambda, fit.val_nll, fit.identity_nll
    );
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out_dir: Option<&Path>) -> Result<()> {
    let reports = report::collect_reports(runs)?;
    let rows = match out_dir {
        Some(dir) => report::write_all(dir, &reports)?,
        None => report::rows(&reports)?,
    };
    print!("{}", report::render_text(&rows));
    Ok(())
}

fn cmd_pipeline(args: &ConfigArgs, methods: &[String], skip_filter: bool, out_dir: &Path) -> Result<()> {
    let mut config = args.load()?;
    config.filter.skip |= skip_filter;
    let methods: Vec<Method> = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        methods.iter().map(|m| m.parse()).collect::<oodkit::Result<_>>()?
    };
    let reports = pipeline::run_all(&config, &methods, out_dir)?;
    for r in &reports {
        print_warnings(&r.warnings);
    }
    print!("{}", fs::read_to_string(out_dir.join(artifacts::REPORT_TEXT))?);
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, key: &str, values: &[String], method: &str, out_dir: &Path) -> Result<()> {
    let method: Method = method.parse()?;
    create_dir(out_dir)?;
    let mut rows = String::from("key,value,method,auroc,aupr,fpr_at_90,ece,ind_accuracy,n_ood_train\n");
    for value in values {
        let mut run_args = args.clone();
        run_args.overrides.push(format!("{key}={value}"));
        let config = run_args.load()?;
        let inputs = Inputs::load(&config)?;
        let r = pipeline::run_method(method, &config, &inputs, &out_dir.join(format!("{key}={value}")))?;
        print_warnings(&r.warnings);
        let m = &r.metrics;
        println!(
            "{key}={value}: AUROC {:.4}  AUPR {:.4}  FPR@90 {:.4}  ECE {:.4}  IND acc {:.4}",
            m.auroc, m.aupr, m.fpr_at_90, m.ece, r.ind_accuracy
        );
        rows.push_str(&format!(
            "{key},{value},{},{},{},{},{},{},{}\n",
            method.tag(),
            m.auroc,
            m.aupr,
            m.fpr_at_90,
            m.ece,
            r.ind_accuracy,
            r.n_ood_train
        ));
    }
    let path = out_dir.join("sweep.csv");
    fs::write(&path, rows).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_synth(seed: u64, out_dir: &Path) -> Result<()> {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let bundle = synth::write_bundle(&synth::generate(&cfg)?, out_dir)?;
    println!("wrote synthetic corpus; run with: oodkit pipeline --config {} --out-dir <dir>", bundle.config.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, ood, out_dir } => cmd_train(&config, ood.as_deref(), &out_dir),
        Command::Generate { config, flags, out_dir } => cmd_generate(&config, &flags, &out_dir),
        Command::Filter {
            config,
            candidates,
            skip_filter,
            out_dir,
        } => cmd_filter(&config, &candidates, skip_filter, &out_dir),
        Command::FilterEmbeddings {
            candidates,
            ind,
            width,
            rho,
            out_dir,
        } => cmd_filter_embeddings(&candidates, &ind, width, rho, &out_dir),
        Command::Detect {
            config,
            model,
            input,
            out_dir,
        } => cmd_detect(&config, &model, input.as_deref(), &out_dir),
        Command::Evaluate {
            config,
            model,
            scores,
            out_dir,
        } => cmd_evaluate(config.as_ref(), model.as_deref(), scores.as_deref(), &out_dir),
        Command::Calibrate {
            preds,
            labels,
            lambda,
            auto_lambda,
            out_dir,
        } => cmd_calibrate(&preds, &labels, lambda, auto_lambda, &out_dir),
        Command::Report { runs, out_dir } => cmd_report(&runs, out_dir.as_deref()),
        Command::Pipeline {
            config,
            methods,
            skip_filter,
            out_dir,
        } => cmd_pipeline(&config, &methods, skip_filter, &out_dir),
        Command::Sweep {
            config,
            key,
            values,
            method,
            out_dir,
        } => cmd_sweep(&config, &key, &values, &method, &out_dir),
        Command::Synth { seed, out_dir } => cmd_synth(seed, &out_dir),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<oodkit::Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
