use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sevex::harness::{
    build_graph, dump_records, embedders_for, evaluate_checkpoint, explain_records, load_dataset, run_training,
    Checkpoint, Partition, RunConfig,
};
use sevex::Error;

#[derive(Parser)]
#[command(name = "sevex", version, about = "Explainable depression severity estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a triplet file by a symptom lexicon and write the graph JSON.
    BuildKg {
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Supplies embedding settings (dims, tables, seed).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch log as JSON here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Weighted precision, recall and F1 of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset the checkpoint was trained on.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One explanation JSON line per post.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        top_k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fused post vectors as TSV: id, label, then the vector.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl From<SplitArg> for Partition {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Partition::Train,
            SplitArg::Val => Partition::Val,
            SplitArg::Test => Partition::Test,
            SplitArg::All => Partition::All,
        }
    }
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    class_count: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    gat_heads: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    max_sentences: Option<usize>,
    #[arg(long)]
    cosine_threshold: Option<f64>,
    /// Comma-separated subset of 1 (word), 2 (sentence), 3 (post).
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<u8>>,
}

impl Overrides {
    fn apply(self, c: &mut RunConfig) {
        fn set<T>(slot: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if self.split_seed.is_some() {
            c.split_seed = self.split_seed;
        }
        for (slot, v) in [
            (&mut c.paths.dataset, self.dataset),
            (&mut c.paths.graph, self.graph),
            (&mut c.paths.triplets, self.triplets),
            (&mut c.paths.lexicon, self.lexicon),
        ] {
            if v.is_some() {
                *slot = v;
            }
        }
        set(&mut c.class_count, self.class_count);
        set(&mut c.beta, self.beta);
        set(&mut c.heads, self.heads);
        set(&mut c.gat_heads, self.gat_heads);
        set(&mut c.hidden, self.hidden);
        set(&mut c.dropout, self.dropout);
        set(&mut c.lr, self.lr);
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch, self.batch);
        set(&mut c.max_tokens, self.max_tokens);
        set(&mut c.max_sentences, self.max_sentences);
        set(&mut c.cosine_threshold, self.cosine_threshold);
        set(&mut c.blocks, self.blocks);
    }
}

fn load_config(path: Option<&Path>) -> sevex::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let (config, warnings) = RunConfig::load(path)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(config)
}

fn output(path: Option<&Path>) -> sevex::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| io_error(p, "cannot create", e))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn io_error(path: &Path, what: &str, source: io::Error) -> Error {
    Error::Io {
        context: format!("{what} {}", path.display()),
        source,
    }
}

fn write_json<T: serde::Serialize>(out: &mut dyn Write, value: &T) -> sevex::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out).map_err(|e| io_error(Path::new("<output>"), "cannot write", e))
}

fn finish(mut out: Box<dyn Write>) -> sevex::Result<()> {
    out.flush().map_err(|e| io_error(Path::new("<output>"), "cannot write", e))
}

fn run(command: Command) -> sevex::Result<()> {
    match command {
        Command::BuildKg {
            triplets,
            lexicon,
            threshold,
            out,
            config,
        } => {
            let config = load_config(config.as_deref())?;
            let threshold = threshold.unwrap_or(config.cosine_threshold);
            if !(-1.0..=1.0).contains(&threshold) {
                return Err(Error::Validation(format!("threshold {threshold} is outside [-1, 1]")));
            }
            let embedders = embedders_for(&config)?;
            let graph = build_graph(&triplets, &lexicon, threshold, &embedders.sentences)?;
            graph.save(&out)?;
            let mut o = output(None)?;
            write_json(
                &mut *o,
                &serde_json::json!({
                    "out": out,
                    "nodes": graph.node_count(),
                    "edges": graph.edge_count(),
                }),
            )?;
            finish(o)
        }
        Command::Train {
            config,
            seed,
            out,
            log,
            overrides,
        } => {
            let mut config = load_config(config.as_deref())?;
            if seed.is_some() {
                config.seed = seed;
            }
            overrides.apply(&mut config);
            config.seed.ok_or_else(|| Error::Validation("train requires --seed".into()))?;
            for w in config.validate()? {
                log::warn!("{w}");
            }
            let report = run_training(&config)?;
            report.checkpoint.save(&out)?;
            let summary = serde_json::json!({
                "checkpoint": out,
                "config_hash": config.hash(),
                "best_epoch": report.best_epoch,
                "log": report.log,
            });
            if let Some(path) = log {
                let mut o = output(Some(&path))?;
                write_json(&mut *o, &report.log)?;
                finish(o)?;
            }
            let mut o = output(None)?;
            write_json(&mut *o, &summary)?;
            finish(o)
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            repeats,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = match dataset.or_else(|| ckpt.config.paths.dataset.clone()) {
                Some(d) => d,
                None => return Err(Error::Validation("no --dataset and none recorded in the checkpoint".into())),
            };
            let records = load_dataset(&dataset, ckpt.config.class_count)?;
            let report = evaluate_checkpoint(&ckpt, &records, split.into(), repeats)?;
            let mut o = output(out.as_deref())?;
            write_json(&mut *o, &report)?;
            finish(o)
        }
        Command::Explain {
            checkpoint,
            post,
            top_k,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let records = load_dataset(&post, ckpt.config.class_count)?;
            let bundles = explain_records(&ckpt, &records, top_k)?;
            let mut o = output(out.as_deref())?;
            for b in &bundles {
                serde_json::to_writer(&mut *o, b)?;
                writeln!(o).map_err(|e| io_error(Path::new("<output>"), "cannot write", e))?;
            }
            finish(o)
        }
        Command::DumpEmbeddings {
            checkpoint,
            dataset,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let records = load_dataset(&dataset, ckpt.config.class_count)?;
            let mut o = output(out.as_deref())?;
            let rows = dump_records(&ckpt, &records, &mut o)?;
            log::info!("wrote {rows} rows");
            finish(o)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
