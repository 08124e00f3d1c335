use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use autocomplete_core::agents::{
    collect_offline, fitted_q_train, q_learning_train, CollectConfig, EnvFactory, FeatureConfig, FeatureKind,
    FittedConfig, LearningRate, OfflineDataset, PolicySpec, QTable, TrainConfig,
};
use autocomplete_core::corpus::{filter_corpus_report, read_lines, split_corpus, FilterConfig, SentenceRecord};
use autocomplete_core::eval::{evaluate, threshold_sweep, write_csv, EvalBundle, EvalConfig};
use autocomplete_core::exec::Execution;
use autocomplete_core::lm::{build_lm, LanguageModel, LmConfig};
use autocomplete_core::mdp::{EnvConfig, RewardParams, TimingConstants};
use autocomplete_core::study::analysis::analyze;
use autocomplete_core::study::sim::{simulate_session, PlantedLoad, SimConfig};
use autocomplete_core::study::{load_logs, StudyService};
use autocomplete_core::theory::{
    alpha_sweep, brute_force_two_word, default_alpha_grid, disagreement_interval, q_farsighted_at_m, q_myopic_at_m,
    Prior, PrefixMdp, TwoWordInstance,
};
use autocomplete_server::AppState;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "autocomplete", version, about = "Inline autocomplete as sequential decision-making")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize and filter a raw sentence file.
    FilterCorpus {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_words: usize,
    },
    /// Build the bigram language model from a corpus.
    BuildLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the candidate slate for a typed context.
    Suggest {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        context: String,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        multiword: bool,
        #[arg(long, default_value_t = 0.7)]
        lambda: f64,
    },
    /// Closed-form and brute-force values of the two-word system.
    TwoWord {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 60.0 / 521.0)]
        beta: f64,
    },
    /// Fraction of trie states where γ = 0 and γ = 1 policies disagree, per α.
    DisagreeSweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 500)]
        words: usize,
        #[arg(long, default_value_t = 60.0 / 521.0)]
        beta: f64,
        #[arg(long, value_enum, default_value_t = PriorArg::Frequency)]
        prior: PriorArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Roll out a threshold policy with random exploration and save the
    /// transitions.
    CollectOffline {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.3)]
        tau: f64,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FeatureArg::Binned)]
        features: FeatureArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Train a Q-table online or from an offline dataset.
    TrainQ {
        #[arg(long, value_enum)]
        mode: TrainMode,
        #[command(flatten)]
        data: DataArgs,
        /// Offline dataset (JSON lines) for `--mode offline`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[arg(long, default_value_t = 250_000)]
        steps: usize,
        /// Constant learning rate; 1/visits when omitted.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FeatureArg::Binned)]
        features: FeatureArg,
        #[arg(long)]
        out: PathBuf,
        /// Training curve CSV (online mode).
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Evaluate policies over several runs with 95% confidence intervals.
    RunEval {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated: oracle, random, wait, threshold:<tau>, q:<table.json>.
        #[arg(long, default_value = "oracle,random,threshold:0.3")]
        policies: String,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Sentences drawn per run; 0 uses the whole split.
        #[arg(long, default_value_t = 50)]
        per_run: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Sweep the threshold agent's τ and report the best.
    ThresholdSweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        taus: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the study service over HTTP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "threshold:0")]
        policy: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[command(flatten)]
        env: EnvArgs,
    },
    /// Drive the study service with synthetic participants and planted
    /// timing, writing session logs.
    SimulateStudy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 5)]
        sessions: usize,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 30.0 / 521.0)]
        beta_correct: f64,
        #[arg(long, default_value_t = 30.0 / 521.0)]
        beta_incorrect: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cognitive-load estimate and fatigue curves from study logs.
    AnalyzeStudy {
        #[arg(long)]
        logs: PathBuf,
        /// Directory for load.csv and fatigue.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 25)]
        bin: usize,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    split: SplitArg,
    #[command(flatten)]
    env: EnvArgs,
}

#[derive(Args)]
struct EnvArgs {
    /// Reward preset: default or study.
    #[arg(long, default_value = "default")]
    preset: String,
    /// TOML or JSON environment config; overrides the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    multiword: bool,
}

#[derive(Args)]
struct ExecArgs {
    /// Run on a single thread.
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn mode(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Eval,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Frequency,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    Binned,
    Exact,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Online,
    Offline,
}

impl FeatureArg {
    fn config(self) -> FeatureConfig {
        match self {
            FeatureArg::Binned => FeatureConfig::default(),
            FeatureArg::Exact => FeatureConfig { kind: FeatureKind::Exact, ..Default::default() },
        }
    }
}

impl EnvArgs {
    fn resolve(&self) -> Result<EnvConfig> {
        if let Some(path) = &self.config {
            return Ok(EnvConfig::load(path)?);
        }
        let mut env = EnvConfig::with_preset(&self.preset)?;
        env.lm = LmConfig { k: self.k, multiword: self.multiword, ..env.lm };
        env.lm.validate()?;
        Ok(env)
    }
}

fn load_model(path: &Path) -> Result<LanguageModel> {
    LanguageModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_sentences(path: &Path, split: SplitArg) -> Result<Vec<SentenceRecord>> {
    let lines = read_lines(path).with_context(|| format!("reading {}", path.display()))?;
    let (kept, _) = filter_corpus_report(&lines, &FilterConfig::default(), None)?;
    let s = split_corpus(&kept, 10);
    Ok(match split {
        SplitArg::Train => s.train,
        SplitArg::Validation => s.validation,
        SplitArg::Eval => s.eval,
        SplitArg::All => kept,
    })
}

fn parse_policy(s: &str) -> Result<PolicySpec> {
    if let Some(path) = s.strip_prefix("q:") {
        let text = fs::read_to_string(path).with_context(|| format!("reading Q-table {path}"))?;
        return Ok(PolicySpec::QOnline(Arc::new(QTable::from_json(&text)?)));
    }
    Ok(PolicySpec::parse(s)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FilterCorpus { input, output, max_words } => {
            let lines = read_lines(&input)?;
            let cfg = FilterConfig { max_words, ..Default::default() };
            let (kept, summary) = filter_corpus_report(&lines, &cfg, None)?;
            let mut w = create(&output)?;
            for r in &kept {
                writeln!(w, "{}", r.text)?;
            }
            w.flush()?;
            print_json(&summary)
        }
        Command::BuildLm { corpus, out } => {
            let lines = read_lines(&corpus)?;
            let (kept, summary) = filter_corpus_report(&lines, &FilterConfig::default(), None)?;
            let lm = build_lm(&kept)?;
            lm.save(&out)?;
            print_json(&json!({
                "sentences": summary.kept_count,
                "dropped": summary.input_count - summary.kept_count,
                "vocabulary": lm.vocab().counts.len(),
                "hash": lm.content_hash(),
            }))
        }
        Command::Suggest { model, context, k, multiword, lambda } => {
            let lm = load_model(&model)?;
            let cfg = LmConfig { k, multiword, lambda, ..Default::default() };
            cfg.validate()?;
            print_json(&lm.candidates(&context, &cfg))
        }
        Command::TwoWord { n, m, alpha, beta } => {
            let inst = TwoWordInstance::new(n, m, alpha, beta)?;
            print_json(&json!({
                "instance": inst,
                "farsighted_regime": inst.farsighted_regime(),
                "myopic_at_m": q_myopic_at_m(&inst),
                "farsighted_at_m": q_farsighted_at_m(&inst),
                "brute_force_gamma0": brute_force_two_word(&inst, 0.0).rows,
                "brute_force_gamma1": brute_force_two_word(&inst, 1.0).rows,
                "disagreement_interval": disagreement_interval(n, m, beta),
            }))
        }
        Command::DisagreeSweep { model, words, beta, prior, out, exec } => {
            let lm = load_model(&model)?;
            let prior = match prior {
                PriorArg::Frequency => Prior::Frequency,
                PriorArg::Uniform => Prior::Uniform,
            };
            let template = PrefixMdp::from_lm_top_words(&lm, words, prior, RewardParams::uniform(0.1, beta), 1.0)?;
            let sweep = alpha_sweep(&template, &default_alpha_grid(), beta, exec.mode())?;
            let rows: Vec<_> = sweep
                .iter()
                .map(|p| {
                    json!({"alpha": p.alpha, "states": p.report.total_states,
                           "disagreements": p.report.disagreements, "fraction": p.report.fraction})
                })
                .collect();
            match out {
                Some(path) => {
                    let mut w = create(&path)?;
                    writeln!(w, "alpha,states,disagreements,fraction")?;
                    for p in &sweep {
                        writeln!(w, "{},{},{},{}", p.alpha, p.report.total_states, p.report.disagreements, p.report.fraction)?;
                    }
                    w.flush()?;
                    Ok(())
                }
                None => print_json(&rows),
            }
        }
        Command::CollectOffline { data, tau, eps, n, seed, features, out, exec } => {
            let lm = load_model(&data.model)?;
            let env = data.env.resolve()?;
            let sents = load_sentences(&data.corpus, data.split)?;
            let factory = EnvFactory::new(&lm, &env, &sents)?;
            let cfg = CollectConfig { exploration_rate: eps, trajectories: n, seed, features: features.config() };
            let dataset = collect_offline(&PolicySpec::Threshold(tau), &factory, &cfg, exec.mode())?;
            let mut w = create(&out)?;
            dataset.write_jsonl(&mut w)?;
            w.flush()?;
            print_json(&json!({
                "trajectories": dataset.trajectories,
                "transitions": dataset.transitions.len(),
                "exploration_fraction": dataset.exploration_fraction(),
            }))
        }
        Command::TrainQ { mode, data, dataset, gamma, steps, lr, seed, features, out, curve } => {
            let table = match mode {
                TrainMode::Online => {
                    let lm = load_model(&data.model)?;
                    let env = data.env.resolve()?;
                    let sents = load_sentences(&data.corpus, data.split)?;
                    let factory = EnvFactory::new(&lm, &env, &sents)?;
                    let cfg = TrainConfig {
                        gamma,
                        steps,
                        seed,
                        features: features.config(),
                        learning_rate: lr.map_or(LearningRate::InverseVisits, LearningRate::Constant),
                        ..Default::default()
                    };
                    let report = q_learning_train(&factory, &cfg)?;
                    if let Some(path) = curve {
                        write_csv(&report.curve, create(&path)?)?;
                    }
                    eprintln!("trained on {} episodes", report.episodes);
                    report.table
                }
                TrainMode::Offline => {
                    let path = dataset.context("--dataset is required for offline training")?;
                    let data = OfflineDataset::read_jsonl(BufReader::new(File::open(&path)?))?;
                    fitted_q_train(&data, &FittedConfig { gamma, ..Default::default() })?
                }
            };
            let mut w = create(&out)?;
            w.write_all(table.to_json()?.as_bytes())?;
            w.flush()?;
            print_json(&json!({ "entries": table.entries.len() }))
        }
        Command::RunEval { data, policies, runs, per_run, seed, csv, json, exec } => {
            let lm = load_model(&data.model)?;
            let env = data.env.resolve()?;
            let sents = load_sentences(&data.corpus, data.split)?;
            let names: Vec<&str> = policies.split(',').map(str::trim).collect();
            let specs = names.iter().map(|p| parse_policy(p)).collect::<Result<Vec<_>>>()?;
            let per_run = (per_run > 0).then_some(per_run);
            let cfg = EvalConfig { runs, per_run, seed_base: seed, exec: exec.mode(), ..EvalConfig::new(sents, env) };
            let mut rows = evaluate(&specs, &lm, &cfg)?;
            for (row, name) in rows.iter_mut().zip(&names) {
                if name.starts_with("q:") {
                    row.policy = name.to_string();
                }
            }
            match csv {
                Some(path) => write_csv(&rows, create(&path)?)?,
                None => write_csv(&rows, std::io::stdout())?,
            }
            if let Some(path) = json {
                let mut w = create(&path)?;
                serde_json::to_writer_pretty(&mut w, &EvalBundle::new(&lm, &cfg, rows))?;
                w.flush()?;
            }
            Ok(())
        }
        Command::ThresholdSweep { data, taus, runs, csv } => {
            let lm = load_model(&data.model)?;
            let env = data.env.resolve()?;
            let sents = load_sentences(&data.corpus, data.split)?;
            let reward = env.reward;
            let cfg = EvalConfig { runs, ..EvalConfig::new(sents, env) };
            let sweep = threshold_sweep(&taus, reward, &lm, &cfg)?;
            if let Some(path) = csv {
                write_csv(&sweep.rows, create(&path)?)?;
            }
            print_json(&json!({ "best_tau": sweep.best_tau, "rows": sweep.rows }))
        }
        Command::Serve { model, policy, port, host, prompts, logs, env } => {
            let lm = Arc::new(load_model(&model)?);
            let env = env.resolve()?;
            let prompts = read_lines(&prompts)?;
            let service = StudyService::new(lm, env, parse_policy(&policy)?).with_log_dir(&logs)?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host/port")?;
            let state = Arc::new(AppState::new(service, prompts));
            eprintln!("listening on http://{addr}");
            tokio::runtime::Runtime::new()?.block_on(autocomplete_server::serve(addr, state))?;
            Ok(())
        }
        Command::SimulateStudy { model, prompts, logs, sessions, alpha, beta_correct, beta_incorrect, seed } => {
            let lm = Arc::new(load_model(&model)?);
            let prompts = read_lines(&prompts)?;
            let service =
                StudyService::new(lm, EnvConfig::default(), PolicySpec::Threshold(0.0)).with_log_dir(&logs)?;
            let cfg = SimConfig { load: PlantedLoad { alpha, beta_correct, beta_incorrect }, ..Default::default() };
            let ids = (0..sessions)
                .map(|i| simulate_session(&service, &format!("sim{i}"), &prompts, &cfg, seed + i as u64))
                .collect::<autocomplete_core::Result<Vec<_>>>()?;
            print_json(&json!({ "sessions": ids }))
        }
        Command::AnalyzeStudy { logs, out_dir, bin } => {
            let logs = load_logs(&logs)?;
            if logs.is_empty() {
                bail!("no session logs found");
            }
            let analysis = analyze(&logs, &TimingConstants::default(), bin)?;
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir)?;
                if let Some(load) = &analysis.load {
                    write_csv(&load.rows(), create(&dir.join("load.csv"))?)?;
                }
                let buckets: Vec<_> = analysis.fatigue.all.iter().chain(&analysis.fatigue.incorrect).collect();
                write_csv(&buckets, create(&dir.join("fatigue.csv"))?)?;
            }
            print_json(&analysis)
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        let broken_pipe = e.chain().any(|c| {
            c.downcast_ref::<std::io::Error>().map(std::io::Error::kind)
                .or_else(|| c.downcast_ref::<serde_json::Error>().and_then(serde_json::Error::io_error_kind))
                == Some(std::io::ErrorKind::BrokenPipe)
        });
        if broken_pipe {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
