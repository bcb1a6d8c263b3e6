//! Run configuration files: flat `key=value` lines, `#` starts a comment.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mpner::embed::ProviderSpec;
use mpner::TrainConfig;

pub const REQUIRED: [&str; 3] = ["epochs", "seed", "provider"];

pub const KNOWN: [&str; 21] = [
    "epochs",
    "seed",
    "provider",
    "lr",
    "batch_start",
    "batch_end",
    "eval_every",
    "d_model",
    "n_heads",
    "ff_units",
    "n_layers",
    "sparse_proj_dim",
    "rel_clip",
    "dropout",
    "use_lexical",
    "min_freq",
    "n_max",
    "train",
    "dev",
    "test",
    "grid",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub grid: Option<String>,
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .ok()
        .with_context(|| format!("bad value {value:?} for {key} on line {line}"))
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig {
        train: TrainConfig::default(),
        train_path: None,
        dev_path: None,
        test_path: None,
        grid: None,
    };
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {line_no}: expected key=value, got {line:?}");
        };
        let (key, value) = (key.trim(), value.trim());
        if !KNOWN.contains(&key) {
            bail!("unknown config key {key:?} on line {line_no}");
        }
        if !seen.insert(key.to_owned()) {
            bail!("config key {key} repeated on line {line_no}");
        }
        let t = &mut cfg.train;
        match key {
            "epochs" => t.epochs = num(key, value, line_no)?,
            "seed" => t.seed = num(key, value, line_no)?,
            "provider" => {
                t.provider = value
                    .parse::<ProviderSpec>()
                    .with_context(|| format!("line {line_no}"))?
            }
            "lr" => t.lr = num(key, value, line_no)?,
            "batch_start" => t.batch_start = num(key, value, line_no)?,
            "batch_end" => t.batch_end = num(key, value, line_no)?,
            "eval_every" => t.eval_every = num(key, value, line_no)?,
            "d_model" => t.model.d_model = num(key, value, line_no)?,
            "n_heads" => t.model.n_heads = num(key, value, line_no)?,
            "ff_units" => t.model.ff_units = num(key, value, line_no)?,
            "n_layers" => t.model.n_layers = num(key, value, line_no)?,
            "sparse_proj_dim" => t.model.sparse_proj_dim = num(key, value, line_no)?,
            "rel_clip" => t.model.rel_clip = num(key, value, line_no)?,
            "dropout" => t.model.dropout = num(key, value, line_no)?,
            "use_lexical" => {
                t.use_lexical = parse_bool(value).with_context(|| {
                    format!("bad value {value:?} for use_lexical on line {line_no}")
                })?
            }
            "min_freq" => t.min_freq = num(key, value, line_no)?,
            "n_max" => t.n_max = num(key, value, line_no)?,
            "train" => cfg.train_path = Some(PathBuf::from(value)),
            "dev" => cfg.dev_path = Some(PathBuf::from(value)),
            "test" => cfg.test_path = Some(PathBuf::from(value)),
            "grid" => cfg.grid = Some(value.to_owned()),
            _ => unreachable!("checked against KNOWN"),
        }
    }
    let missing: Vec<&str> = REQUIRED
        .iter()
        .copied()
        .filter(|k| !seen.contains(*k))
        .collect();
    if !missing.is_empty() {
        bail!("missing required config keys: {}", missing.join(", "));
    }
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("config {}", path.display()))
}
