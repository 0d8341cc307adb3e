//! Command-line front end: one subcommand per pipeline stage plus
//! `experiment`, which chains them.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtkd_core::corpus::{corpus_stats, GenerationSpec, Split, SplitSizes};
use mtkd_core::losses::LossHyperparams;
use mtkd_core::strategies::Strategy;
use mtkd_core::training::HeadReset;

use crate::formats::read_json;
use crate::pipeline::{self, DistillOptions, EvalTarget, ExperimentConfig};
use crate::{thread_count, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mtkd", version, about = "Multi-teacher knowledge distillation for joint CTC-attention models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and start a run record.
    GenCorpus(GenCorpusArgs),
    /// Train the teacher grid and write the ensemble summary.
    TrainTeachers(TrainTeachersArgs),
    /// Distill a student from the ensemble with one strategy.
    Distill(DistillArgs),
    /// Decode a split with a checkpoint and write per-sentence errors.
    Evaluate(EvaluateArgs),
    /// Consolidate finished runs into comparison tables.
    Report(OutArgs),
    /// Run every stage from one configuration.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory holding the run record.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of content tokens.
    #[arg(long, default_value_t = 12)]
    pub z: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 20)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.3)]
    pub sigma: f64,
    /// Homophone pairs as `a-b,c-d`, or `none`.
    #[arg(long, default_value = "0-1,2-3", value_parser = parse_pairs)]
    pub homophones: Pairs,
    /// Train, valid and test sizes as `train,valid,test`.
    #[arg(long, default_value = "2000,200,200", value_parser = parse_splits)]
    pub splits: SplitSizes,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2)]
    pub min_repeat: usize,
    #[arg(long, default_value_t = 5)]
    pub max_repeat: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairs(pub Vec<(usize, usize)>);

fn parse_pairs(s: &str) -> std::result::Result<Pairs, String> {
    if s == "none" || s.is_empty() {
        return Ok(Pairs(Vec::new()));
    }
    s.split(',')
        .map(|pair| {
            let (a, b) = pair.split_once('-').ok_or_else(|| format!("expected a-b, got {pair:?}"))?;
            let a = a.trim().parse().map_err(|_| format!("bad token id {a:?}"))?;
            let b = b.trim().parse().map_err(|_| format!("bad token id {b:?}"))?;
            Ok((a, b))
        })
        .collect::<std::result::Result<Vec<_>, String>>()
        .map(Pairs)
}

fn parse_splits(s: &str) -> std::result::Result<SplitSizes, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad split size {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [train, valid, test] => Ok(SplitSizes { train, valid, test }),
        _ => Err(format!("expected train,valid,test, got {s:?}")),
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainTeachersArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON list of teacher specs replacing the default grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Train only this grid entry.
    #[arg(long)]
    pub only: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Heads {
    Both,
    DecoderOnly,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// average, weighted, top1 or topk.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Strategy,
    /// CE weight against CTC.
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    /// KD weight against ground truth.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Defaults to a sub-stream of the run-record seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Output layers redrawn when the student starts from the teacher.
    #[arg(long, value_enum, default_value = "both")]
    pub heads: Heads,
    /// Run directory name; defaults to the strategy name.
    #[arg(long)]
    pub name: Option<String>,
    /// Beam width for the teachers' cached hypotheses.
    #[arg(long, default_value_t = 4)]
    pub beam_width: usize,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["teacher", "run", "checkpoint"])))]
pub struct EvaluateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub teacher: Option<usize>,
    #[arg(long)]
    pub run: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, valid or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?}, expected train, valid or test"))
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON experiment configuration; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn usage<T>(r: mtkd_core::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Usage(e.to_string()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => {
            let spec = GenerationSpec {
                z: a.z,
                dim: a.dim,
                min_len: a.min_len,
                max_len: a.max_len,
                min_repeat: a.min_repeat,
                max_repeat: a.max_repeat,
                sigma: a.sigma,
                homophones: a.homophones.0,
                splits: a.splits,
                seed: 0,
            };
            usage(spec.validate())?;
            let corpus = pipeline::gen_corpus(&a.out, a.seed, spec)?;
            let stats = corpus_stats(&corpus)?;
            println!("corpus: {}", a.out.join(pipeline::CORPUS_FILE).display());
            for (split, n) in stats.per_split {
                println!("{:<6}{n} utterances", split.name());
            }
            println!("tokens {} frames {} (T_y {}..{}, T_x {}..{})", stats.total_tokens, stats.total_frames, stats.min_tokens, stats.max_tokens, stats.min_frames, stats.max_frames);
            println!("mean frames per token {:.3}", stats.mean_frames_per_token);
            println!("token counts {:?}", stats.token_counts);
        }
        Command::TrainTeachers(a) => {
            let grid = a.grid.as_deref().map(read_json).transpose()?;
            let rows = pipeline::train_teachers(&a.out, grid, a.only, thread_count()?)?;
            println!("{:>3} {:>4} {:>6} {:>6} {:>9} {:>9}", "id", "cell", "hidden", "layers", "valid_er", "test_er");
            for r in rows {
                println!("{:>3} {:>4} {:>6} {:>6} {:>9.4} {:>9.4} {}", r.teacher_id, r.cell, r.hidden, r.layers, r.valid_er, r.test_er, r.selected);
            }
        }
        Command::Distill(a) => {
            let loss = LossHyperparams {
                alpha: a.alpha,
                beta: a.beta,
                nbest: a.beam_width,
                ..LossHyperparams::default()
            };
            usage(loss.validate())?;
            let options = DistillOptions {
                name: a.name,
                strategy: a.strategy,
                alpha: a.alpha,
                beta: a.beta,
                epochs: a.epochs,
                lr: a.lr,
                batch_size: a.batch_size,
                momentum: a.momentum,
                seed: a.seed,
                heads: match a.heads {
                    Heads::Both => HeadReset::Both,
                    Heads::DecoderOnly => HeadReset::DecoderOnly,
                },
                beam_width: a.beam_width,
            };
            let optim = mtkd_core::training::OptimConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                lr: a.lr,
                momentum: a.momentum,
                ..Default::default()
            };
            usage(optim.validate())?;
            let r = pipeline::distill_run(&a.out, &options, thread_count()?)?;
            println!("run {} ({}) best epoch {} valid ER {:.4} test ER {:.4}", r.name, r.strategy, r.best_epoch, r.valid_er, r.test_er);
        }
        Command::Evaluate(a) => {
            let target = match (a.teacher, a.run, a.checkpoint) {
                (Some(i), _, _) => EvalTarget::Teacher(i),
                (_, Some(r), _) => EvalTarget::Run(r),
                (_, _, Some(p)) => EvalTarget::File(p),
                _ => return Err(Error::Usage("one of --teacher, --run or --checkpoint is required".into())),
            };
            let (path, report) = pipeline::evaluate_target(&a.out, &target, a.split)?;
            println!("{} ER {:.4} over {} sentences ({})", a.split.name(), report.er, report.sentences.len(), path.display());
        }
        Command::Report(a) => {
            let rows = pipeline::report(&a.out)?;
            println!("{:<12} {:<9} {:>9} {:>9}", "run", "strategy", "valid_er", "test_er");
            for r in rows {
                println!("{:<12} {:<9} {:>9.4} {:>9.4}", r.run, r.strategy, r.valid_er, r.test_er);
            }
        }
        Command::Experiment(a) => {
            let mut config: ExperimentConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            usage(config.corpus.validate())?;
            let manifest = pipeline::experiment(&a.out, &config, thread_count()?)?;
            for t in &manifest.teachers {
                let mark = if manifest.selected_teacher == Some(t.id) { "*" } else { "" };
                println!("teacher {:>2} valid ER {:.4} test ER {:.4} {mark}", t.id, t.valid_er, t.test_er);
            }
            for r in &manifest.runs {
                println!("run {:<10} valid ER {:.4} test ER {:.4}", r.name, r.valid_er, r.test_er);
            }
        }
    }
    Ok(())
}
