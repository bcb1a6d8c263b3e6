//! On-disk model format.
//!
//! A checkpoint is a directory with three files:
//!
//! * `manifest.txt`: `config<TAB>key<TAB>value` lines describing the model
//!   and features, then one `tensor<TAB>name<TAB>shape<TAB>f32<TAB>offset`
//!   line per tensor, shapes written like `32x128` and offsets in bytes.
//! * `params.bin`: the tensors as little-endian `f32`, in manifest order.
//! * `vocab.tsv`: the vocabulary (see [`Vocabulary::write_tsv`]).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::embed::ProviderSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tagger::{EntityTagger, Featurizer};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";
pub const VOCAB: &str = "vocab.tsv";

const DTYPE: &str = "f32";

fn config_entries(tagger: &EntityTagger) -> Vec<(&'static str, String)> {
    let c = &tagger.params.config;
    let f = &tagger.featurizer;
    vec![
        ("d_model", c.d_model.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("ff_units", c.ff_units.to_string()),
        ("n_layers", c.n_layers.to_string()),
        ("sparse_proj_dim", c.sparse_proj_dim.to_string()),
        ("sparse_input_dim", c.sparse_input_dim.to_string()),
        ("dense_dim", c.dense_dim.to_string()),
        ("rel_clip", c.rel_clip.to_string()),
        ("dropout", c.dropout.to_string()),
        ("n_tags", c.n_tags.to_string()),
        ("provider", f.provider_spec.to_string()),
        ("use_lexical", f.use_lexical.to_string()),
        ("min_freq", f.vocab.min_freq.to_string()),
        ("n_max", f.vocab.n_max.to_string()),
    ]
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

pub fn save(tagger: &EntityTagger, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# mpner checkpoint\n");
    for (k, v) in config_entries(tagger) {
        manifest.push_str(&format!("config\t{k}\t{v}\n"));
    }
    let mut blob = Vec::new();
    for (name, tensor) in tagger.params.set.iter() {
        manifest.push_str(&format!(
            "tensor\t{name}\t{}\t{DTYPE}\t{}\n",
            shape_string(tensor.shape()),
            blob.len()
        ));
        for &v in tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write(MANIFEST, manifest.as_bytes())?;
    write(BLOB, &blob)?;
    let path = dir.join(VOCAB);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    tagger
        .featurizer
        .vocab
        .write_tsv(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(&path, e))
}

struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

struct Manifest {
    config: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut config = BTreeMap::new();
    let mut tensors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[..] {
            ["config", key, value] => {
                config.insert(key.to_owned(), value.to_owned());
            }
            ["tensor", name, shape, dtype, offset] => {
                if dtype != DTYPE {
                    return Err(Error::format(
                        format!("unsupported dtype {dtype:?}"),
                        line_no,
                    ));
                }
                let shape = if shape.is_empty() {
                    Vec::new()
                } else {
                    shape
                        .split('x')
                        .map(str::parse)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|_| Error::format(format!("bad shape {shape:?}"), line_no))?
                };
                let offset = offset
                    .parse()
                    .map_err(|_| Error::format(format!("bad offset {offset:?}"), line_no))?;
                tensors.push(TensorEntry {
                    name: name.to_owned(),
                    shape,
                    offset,
                });
            }
            _ => return Err(Error::format("unrecognized manifest entry", line_no)),
        }
    }
    Ok(Manifest { config, tensors })
}

fn get<T: std::str::FromStr>(config: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = config
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("manifest is missing config {key}")))?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("manifest config {key} has bad value {raw:?}")))
}

pub fn load(dir: &Path) -> Result<EntityTagger> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| Error::io(&path, e))
    };
    let manifest_bytes = read(MANIFEST)?;
    let manifest_text = String::from_utf8(manifest_bytes)
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let manifest = parse_manifest(&manifest_text)?;
    let blob = read(BLOB)?;
    let c = &manifest.config;

    let config = ModelConfig {
        d_model: get(c, "d_model")?,
        n_heads: get(c, "n_heads")?,
        ff_units: get(c, "ff_units")?,
        n_layers: get(c, "n_layers")?,
        sparse_proj_dim: get(c, "sparse_proj_dim")?,
        sparse_input_dim: get(c, "sparse_input_dim")?,
        dense_dim: get(c, "dense_dim")?,
        rel_clip: get(c, "rel_clip")?,
        dropout: get(c, "dropout")?,
        n_tags: get(c, "n_tags")?,
    };
    let provider: ProviderSpec = get::<String>(c, "provider")?.parse()?;
    let use_lexical: bool = get(c, "use_lexical")?;
    let min_freq: usize = get(c, "min_freq")?;
    let n_max: usize = get(c, "n_max")?;

    let mut set = ParamSet::new();
    let mut cursor = 0;
    for t in &manifest.tensors {
        if t.offset != cursor {
            return Err(Error::Checkpoint(format!(
                "tensor {} starts at byte {} but the previous one ends at {cursor}",
                t.name, t.offset
            )));
        }
        let n: usize = t.shape.iter().product();
        let end = t.offset + 4 * n;
        if end > blob.len() {
            return Err(Error::Checkpoint(
                "blob shorter than manifest extent".into(),
            ));
        }
        let data = blob[t.offset..end]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        set.push(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
        cursor = end;
    }
    if cursor != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes past the manifest extent",
            blob.len() - cursor
        )));
    }
    let params = ModelParams::from_set(config, set)?;

    let path = dir.join(VOCAB);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let vocab = Vocabulary::read_tsv(BufReader::new(file), min_freq, n_max)?;
    let featurizer = Featurizer::new(vocab, provider, use_lexical)?;
    EntityTagger::new(featurizer, params)
}
