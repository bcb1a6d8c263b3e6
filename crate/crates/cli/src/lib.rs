//! Subcommands of the `mpner` executable.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mpner::datagen::{
    entity_histogram, generate_records, read_jsonl, split_catalog, surface_overlap, write_jsonl,
    GenerateOptions, ProductCatalog, TemplateSet, UtteranceRecord, MAX_ITEMS,
};
use mpner::eval::{ablation_table, parse_grid, percent, render_table, AblationSetting};
use mpner::tagger::span_texts;
use mpner::{checkpoint, EntityTagger};

#[derive(Parser, Debug)]
#[command(
    name = "mpner",
    version,
    about = "Multiple product name entity recognition"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train and held-out test utterances from a catalog.
    Datagen(DatagenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Extract product names from text.
    Predict(PredictArgs),
    /// Train and score one model per feature combination.
    Ablation(AblationArgs),
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub templates: PathBuf,
    #[arg(long)]
    pub quantities: PathBuf,
    /// Training records to generate.
    #[arg(long)]
    pub count: usize,
    /// Test records to generate; defaults to a fifth of `--count`.
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub min_items: usize,
    #[arg(long, default_value_t = MAX_ITEMS)]
    pub max_items: usize,
    #[arg(long, default_value_t = 0.2)]
    pub holdout_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Training data; overrides `train` in the config.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Development data; overrides `dev` in the config.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Utterance to tag; reads lines from stdin when absent.
    #[arg(long)]
    pub text: Option<String>,
    /// Print `start:end:label` spans instead of entity text.
    #[arg(long)]
    pub spans: bool,
    /// Report per-utterance wall time on stderr.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Grid such as `lexical=off,on;dense=hash:32:7,none`; overrides `grid`
    /// in the config.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Table output file.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Datagen(a) => datagen(&a, &mut out),
        Command::Train(a) => train(&a, &mut out),
        Command::Eval(a) => eval(&a, &mut out),
        Command::Predict(a) => {
            let stdin = std::io::stdin();
            predict(&a, stdin.lock(), &mut out, &mut std::io::stderr())
        }
        Command::Ablation(a) => ablation(&a, &mut out),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_records(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let records = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    if records.is_empty() {
        bail!("no records in {}", path.display());
    }
    Ok(records)
}

pub fn datagen(a: &DatagenArgs, out: &mut impl Write) -> Result<()> {
    let catalog = ProductCatalog::load(&a.catalog)
        .with_context(|| format!("catalog {}", a.catalog.display()))?;
    let templates = TemplateSet::load(&a.templates, &a.quantities)?;
    if !(a.holdout_fraction > 0.0 && a.holdout_fraction < 1.0) {
        bail!("holdout fraction must be strictly between 0 and 1");
    }
    let (train_cat, test_cat) = split_catalog(&catalog, a.holdout_fraction, a.seed)?;
    let test_count = a.test_count.unwrap_or((a.count / 5).max(1));
    let train = generate_records(
        &templates,
        &train_cat,
        &GenerateOptions {
            seed: a.seed,
            count: a.count,
            min_items: a.min_items,
            max_items: a.max_items,
            id_prefix: "train-",
        },
    )?;
    let test = generate_records(
        &templates,
        &test_cat,
        &GenerateOptions {
            seed: a.seed.wrapping_add(1),
            count: test_count,
            min_items: a.min_items,
            max_items: a.max_items,
            id_prefix: "test-",
        },
    )?;
    if train.is_empty() || test.is_empty() {
        bail!("record counts must be at least 1");
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_jsonl(&a.out_dir.join("train.jsonl"), &train)?;
    write_jsonl(&a.out_dir.join("test.jsonl"), &test)?;

    let product_overlap = train_cat
        .entries
        .iter()
        .filter(|p| test_cat.entries.iter().any(|q| q.canonical == p.canonical))
        .count();
    let surfaces = surface_overlap(&train, &test);
    let mut stats = String::new();
    writeln!(stats, "train_records\t{}", train.len())?;
    writeln!(stats, "test_records\t{}", test.len())?;
    writeln!(stats, "train_products\t{}", train_cat.len())?;
    writeln!(stats, "test_products\t{}", test_cat.len())?;
    writeln!(stats, "product_overlap\t{product_overlap}")?;
    writeln!(stats, "surface_overlap\t{}", surfaces.len())?;
    for (name, records) in [("train", &train), ("test", &test)] {
        for (k, n) in entity_histogram(records).iter().enumerate().skip(1) {
            writeln!(stats, "{name}_entities_{k}\t{n}")?;
        }
    }
    write_file(&a.out_dir.join("stats.txt"), &stats)?;
    write!(out, "{stats}")?;
    Ok(())
}

pub fn train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let cfg = config::load(&a.config)?;
    let train_path = a
        .train
        .clone()
        .or(cfg.train_path.clone())
        .context("no training data: pass --train or set train in the config")?;
    let train = load_records(&train_path)?;
    let dev = match a.dev.clone().or(cfg.dev_path.clone()) {
        Some(p) => load_records(&p)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut log = String::from("epoch\tbatch_size\tmean_loss\tdev_f1\n");
    let outcome = mpner::train::train_with(&cfg.train, &train, &dev, |entry| {
        log.push_str(&format!("{entry}\n"));
        eprintln!("{entry}");
    })?;
    log.push_str(&format!("train_f1\t{:.6}\n", outcome.train_f1));
    checkpoint::save(&outcome.tagger, &a.out)?;
    write_file(&a.out.join("train.log"), &log)?;
    writeln!(out, "train_f1\t{:.6}", outcome.train_f1)?;
    if let Some(f1) = outcome.log.last().and_then(|l| l.dev_f1) {
        writeln!(out, "dev_f1\t{f1:.6}")?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<EntityTagger> {
    checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let tagger = load_model(&a.model)?;
    let records = load_records(&a.data)?;
    let tokens: Vec<Vec<String>> = records.iter().map(|r| r.tokens.clone()).collect();
    let gold: Vec<_> = records.iter().map(|r| r.entities.clone()).collect();
    let setting = AblationSetting {
        use_lexical: tagger.featurizer.use_lexical,
        provider: tagger.featurizer.provider_spec.clone(),
    };
    let report = tagger
        .evaluate(&tokens, &gold)?
        .with_description(setting.describe());
    if let Some(path) = &a.report {
        let table = render_table(&[[
            setting.sparse_label().to_owned(),
            setting.provider.describe(),
            "-".to_owned(),
            percent(report.f1),
        ]]);
        write_file(path, &format!("{table}\n{report}"))?;
    }
    writeln!(out, "f1\t{:.6}", report.f1)?;
    writeln!(out, "precision\t{:.6}", report.precision)?;
    writeln!(out, "recall\t{:.6}", report.recall)?;
    Ok(())
}

/// Tags each input line; returns after the input is exhausted.
pub fn predict(
    a: &PredictArgs,
    input: impl BufRead,
    out: &mut impl Write,
    err: &mut impl Write,
) -> Result<()> {
    let tagger = load_model(&a.model)?;
    let mut handle = |line: &str| -> Result<()> {
        let start = Instant::now();
        let (tokens, spans) = tagger.predict(line)?;
        let elapsed = start.elapsed();
        let cells: Vec<String> = if a.spans {
            spans
                .iter()
                .map(|s| format!("{}:{}:{}", s.start, s.end, s.label))
                .collect()
        } else {
            span_texts(&tokens, &spans)
        };
        writeln!(out, "{}", cells.join("\t"))?;
        if a.timing {
            writeln!(err, "{:.3} ms", elapsed.as_secs_f64() * 1e3)?;
        }
        Ok(())
    };
    match &a.text {
        Some(text) => handle(text)?,
        None => {
            for line in input.lines() {
                handle(&line.context("reading stdin")?)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn ablation(a: &AblationArgs, out: &mut impl Write) -> Result<()> {
    let cfg = config::load(&a.config)?;
    let grid = a
        .grid
        .clone()
        .or(cfg.grid.clone())
        .context("no grid: pass --grid or set grid in the config")?;
    let base = AblationSetting {
        use_lexical: cfg.train.use_lexical,
        provider: cfg.train.provider.clone(),
    };
    let settings = parse_grid(&grid, &base)?;
    let train_path = a
        .train
        .clone()
        .or(cfg.train_path.clone())
        .context("no training data")?;
    let test_path = a
        .test
        .clone()
        .or(cfg.test_path.clone())
        .context("no test data")?;
    let train = load_records(&train_path)?;
    let test = load_records(&test_path)?;
    let rows = mpner::train::ablation_run(&cfg.train, &settings, &train, &test)?;
    let table = ablation_table(&rows);
    write_file(&a.out, &table)?;
    write!(out, "{table}")?;
    Ok(())
}
