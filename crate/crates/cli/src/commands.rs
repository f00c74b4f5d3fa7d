//! Argument parsing and dispatch.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use coo_core::dataset::write_dataset;
use coo_core::eval::TTestKind;
use coo_core::experiments::{PersonaKind, ReasoningStyle};

use crate::config::{parse_override, RunConfig};
use crate::runner::{self, RunOptions};
use crate::synth::{self, SynthSpec};
use crate::{report, study};

#[derive(Debug, Parser)]
#[command(name = "coo", version, about = "Persona-conditioned opinion prediction")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// live, record, strict-replay or scripted.
    #[arg(long, global = true)]
    pub provider_mode: Option<String>,
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override any configuration value by dotted name, e.g.
    /// `--set provider.model=gpt-4`.
    #[arg(long = "set", global = true, value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
}

impl GlobalArgs {
    pub fn load_config(&self) -> anyhow::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        let quoted = |s: &str| toml::Value::String(s.to_string()).to_string();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|s| s.to_string()));
        push("parallelism", self.parallelism.map(|p| p.to_string()));
        push("provider.mode", self.provider_mode.as_deref().map(quoted));
        push("cache", self.cache.as_ref().map(|p| quoted(&p.to_string_lossy())));
        push("out", self.out.as_ref().map(|p| quoted(&p.to_string_lossy())));
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(long)]
        path: PathBuf,
        #[arg(long, default_value_t = 15)]
        topics: usize,
        #[arg(long, default_value_t = 30)]
        users: usize,
        #[arg(long, default_value_t = 20)]
        history: usize,
    },
    /// Draw the evaluation split and write the manifest.
    Prepare,
    /// Answer every pending test question; resumes from the ledger.
    Run {
        /// Stop after this many pending questions.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Accuracy, collapsed accuracy, per-K refusal rates and comparisons.
    Eval {
        /// Second run directory to test against.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "student")]
        test: TestArg,
    },
    /// Write fine-tuning lines for every complete question.
    ExportFinetune {
        #[arg(long)]
        path: PathBuf,
    },
    #[command(subcommand)]
    Study(StudyCommand),
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TestArg {
    Student,
    Welch,
    Paired,
}

impl From<TestArg> for TTestKind {
    fn from(t: TestArg) -> Self {
        match t {
            TestArg::Student => TTestKind::Student,
            TestArg::Welch => TTestKind::Welch,
            TestArg::Paired => TTestKind::Paired,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum KindArg {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StyleArg {
    Cot,
    Vbn,
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Prediction change when irrelevant personae are added.
    Sensitivity {
        /// JSONL relevance labels.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Kendall's tau between model and semantic rankings.
    Agreement {
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Answer agreement of five samples across temperatures.
    Consistency {
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.6, 0.9])]
        temperatures: Vec<f64>,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["cot", "vbn"])]
        styles: Vec<StyleArg>,
        #[arg(long, default_value_t = 100)]
        limit: usize,
    },
    /// Top-K overlap across repeated rankings.
    RankingConsistency {
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 20)]
        k_max: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Token and dollar totals from the usage log.
    Cost {
        /// JSON price table; defaults to `price_table` in the config.
        #[arg(long)]
        prices: Option<PathBuf>,
    },
}

/// Runs one parsed command, printing a short summary on stdout.
pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.global.load_config()?;
    match &cli.command {
        Command::Synth { path, topics, users, history } => {
            let spec = SynthSpec { topics: *topics, users_per_topic: *users, history: *history, seed: cfg.seed };
            let corpus = synth::corpus(&spec);
            write_dataset(&corpus, BufWriter::new(File::create(path)?))?;
            println!("wrote {} users to {}", corpus.len(), path.display());
        }
        Command::Prepare => {
            let s = runner::prepare(&cfg)?;
            println!(
                "loaded {} users; split has {} users over {} topics with {} test questions (sha256 {})",
                s.loaded_users, s.users, s.topics, s.questions, s.split_sha256
            );
        }
        Command::Run { limit } => {
            let s = runner::run(&cfg, &RunOptions { limit: *limit })?;
            println!(
                "{} questions: {} already done, {} completed, {} failed; {} generation calls ({} from cache)",
                s.total, s.skipped, s.completed, s.failed, s.generation_calls, s.cache_hits
            );
        }
        Command::Eval { compare, test } => {
            let r = report::eval(&cfg.out, compare.as_deref(), (*test).into())?;
            println!("{} {}: Acc / CAcc = {} (n = {})", r.overall.strategy, r.overall.model, r.headline(), r.overall.n);
            for row in &r.ita {
                println!("K={}: ITA {:.2}%, unparsed {:.2}%", row.k, row.ita_pct, row.parse_failure_pct);
            }
            if let Some(c) = r.consistency {
                println!("consistency score {:.2}%", 100.0 * c);
            }
            if let Some(c) = &r.compare {
                println!("vs {}: Acc t = {:.4}, p = {:.4}; CAcc t = {:.4}, p = {:.4}", c.other, c.acc.t, c.acc.p, c.cacc.t, c.cacc.p);
            }
        }
        Command::ExportFinetune { path } => {
            let s = report::export_finetune(&cfg.out, path)?;
            println!("wrote {} lines to {} ({} skipped)", s.written, path.display(), s.skipped);
        }
        Command::Study(cmd) => run_study(&cfg, cmd)?,
    }
    Ok(())
}

fn run_study(cfg: &RunConfig, cmd: &StudyCommand) -> anyhow::Result<()> {
    if let StudyCommand::Cost { prices } = cmd {
        for r in study::cost(cfg, prices.as_deref())? {
            println!(
                "{}: {} calls, {:.1} tokens/question, ${:.4}{}",
                r.model,
                r.line.total_calls,
                r.line.avg_tokens_per_question,
                r.line.total_usd,
                if r.line.estimated { " (estimated tokens)" } else { "" }
            );
        }
        return Ok(());
    }
    let provider = runner::build_provider(cfg)?;
    match cmd {
        StudyCommand::Sensitivity { labels, kind, samples, limit } => {
            let kind = match kind {
                KindArg::Explicit => PersonaKind::Explicit,
                KindArg::Implicit => PersonaKind::Implicit,
            };
            let r = study::sensitivity(cfg, &provider, labels, kind, *samples, *limit)?;
            for row in &r.rows {
                println!("{:?} {}: accuracy {:.2}% (n = {})", row.kind, row.label.name(), 100.0 * row.accuracy, row.n);
            }
            for (k, rate) in &r.change_rate {
                println!("{k:?}: prediction change rate {:.2}%", 100.0 * rate);
            }
        }
        StudyCommand::Agreement { limit } => {
            let r = study::agreement(cfg, &provider, *limit)?;
            match r.summary {
                Some(s) => println!("tau over {} questions: mean {:.4}, std {:.4}", s.n, s.mean, s.std),
                None => println!("no questions to compare"),
            }
        }
        StudyCommand::Consistency { temperatures, styles, limit } => {
            let styles: Vec<ReasoningStyle> = styles
                .iter()
                .map(|s| match s {
                    StyleArg::Cot => ReasoningStyle::Cot,
                    StyleArg::Vbn => ReasoningStyle::Vbn,
                })
                .collect();
            for row in study::temperature_consistency(cfg, &provider, temperatures, &styles, Some(*limit))? {
                println!("{:?} at {}: {:.2}% over {} questions", row.style, row.temperature, 100.0 * row.consistency, row.questions);
            }
        }
        StudyCommand::RankingConsistency { runs, k_max, limit } => {
            for (k, oc) in study::ranking_consistency(cfg, &provider, *runs, *k_max, *limit)? {
                println!("K={k}: mean overlap {oc:.4}");
            }
        }
        StudyCommand::Cost { .. } => unreachable!("handled above"),
    }
    Ok(())
}
