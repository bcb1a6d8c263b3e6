//! Dense per-token feature providers.
//!
//! Two kinds exist: a deterministic hash embedding that needs no data, and a
//! file-backed table of precomputed vectors (for example, vectors exported
//! from a pre-trained language model). Both are context-free: a token maps
//! to the same vector wherever it occurs.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Per-token dense vectors stored row-major, `len × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSequence {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DenseSequence {
    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic unit-norm vector for a token.
///
/// Component `i` is `u * 2 - 1` where `u` is the top 53 bits of
/// `splitmix64(splitmix64(fnv1a(token) ^ splitmix64(seed)) ^ i)` scaled to
/// `[0, 1)`; the vector is then divided by its Euclidean norm.
pub fn hash_embed(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let base = splitmix64(fnv1a(token.as_bytes()) ^ splitmix64(seed));
    let mut v: Vec<f64> = (0..dim as u64)
        .map(|i| {
            let h = splitmix64(base ^ i);
            let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
            unit * 2.0 - 1.0
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingProvider {
    Hash {
        dim: usize,
        seed: u64,
    },
    File {
        dim: usize,
        table: HashMap<String, Vec<f64>>,
    },
}

impl EmbeddingProvider {
    pub fn hash(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be at least 1".into()));
        }
        Ok(EmbeddingProvider::Hash { dim, seed })
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Hash { dim, .. } | EmbeddingProvider::File { dim, .. } => *dim,
        }
    }

    /// Vector for one token; absent tokens in a file table map to zeros.
    pub fn embed_token(&self, token: &str) -> Vec<f64> {
        match self {
            EmbeddingProvider::Hash { dim, seed } => hash_embed(token, *dim, *seed),
            EmbeddingProvider::File { dim, table } => {
                table.get(token).cloned().unwrap_or_else(|| vec![0.0; *dim])
            }
        }
    }

    pub fn embed_sequence<S: AsRef<str>>(&self, tokens: &[S]) -> DenseSequence {
        let dim = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * dim);
        for t in tokens {
            data.extend(self.embed_token(t.as_ref()));
        }
        DenseSequence { dim, data }
    }

    /// Parses `token f1 f2 ...` rows; the first row fixes the width.
    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            let line =
                line.map_err(|e| Error::format(format!("embedding read error: {e}"), line_no))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let token = fields.next().unwrap_or_default().to_owned();
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("bad float", line_no))?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("non-finite value", line_no));
            }
            match dim {
                None if values.is_empty() => {
                    return Err(Error::format("row has no values", line_no))
                }
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => return Err(Error::format("dim mismatch", line_no)),
                Some(_) => {}
            }
            table.insert(token, values);
        }
        match dim {
            Some(dim) => Ok(EmbeddingProvider::File { dim, table }),
            None => Err(Error::Invalid("empty embedding file".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }
}

/// How dense features are obtained; the textual forms are `none`,
/// `hash:<dim>:<seed>` and `file:<path>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProviderSpec {
    None,
    Hash { dim: usize, seed: u64 },
    File(PathBuf),
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Option<EmbeddingProvider>> {
        match self {
            ProviderSpec::None => Ok(None),
            ProviderSpec::Hash { dim, seed } => EmbeddingProvider::hash(*dim, *seed).map(Some),
            ProviderSpec::File(path) => EmbeddingProvider::load(path).map(Some),
        }
    }

    /// Human-readable name for report tables.
    pub fn describe(&self) -> String {
        match self {
            ProviderSpec::None => "Not Present".to_owned(),
            ProviderSpec::Hash { dim, .. } => format!("hash embeddings ({dim}d)"),
            ProviderSpec::File(path) => format!(
                "file embeddings ({})",
                path.file_name().map_or_else(
                    || path.display().to_string(),
                    |f| f.to_string_lossy().into_owned()
                )
            ),
        }
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderSpec::None => write!(f, "none"),
            ProviderSpec::Hash { dim, seed } => write!(f, "hash:{dim}:{seed}"),
            ProviderSpec::File(path) => write!(f, "file:{}", path.display()),
        }
    }
}

impl FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "bad provider {s:?}; expected none, hash:<dim>:<seed> or file:<path>"
            ))
        };
        if s == "none" {
            return Ok(ProviderSpec::None);
        }
        if let Some(rest) = s.strip_prefix("hash:") {
            let (dim, seed) = rest.split_once(':').ok_or_else(bad)?;
            let dim: usize = dim.parse().map_err(|_| bad())?;
            let seed: u64 = seed.parse().map_err(|_| bad())?;
            if dim == 0 {
                return Err(bad());
            }
            return Ok(ProviderSpec::Hash { dim, seed });
        }
        if let Some(path) = s.strip_prefix("file:") {
            if !path.is_empty() {
                return Ok(ProviderSpec::File(PathBuf::from(path)));
            }
        }
        Err(bad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedding_is_deterministic_and_unit_norm() {
        let a = hash_embed("milk", 32, 7);
        assert_eq!(a, hash_embed("milk", 32, 7));
        for token in ["milk", "a", "sunflower", "", "épicerie"] {
            let v = hash_embed(token, 32, 7);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6);
            assert!(v.iter().all(|x| x.abs() <= 1.0));
        }
        assert_ne!(a, hash_embed("milk", 32, 8));
        assert_ne!(a, hash_embed("silk", 32, 7));
    }

    #[test]
    fn file_embeddings_parse() {
        let text = "milk 1 2 3 4\napples 0.5 0.5 0.5 0.5\neggs -1 0 0 1e-3\n";
        let p = EmbeddingProvider::read(text.as_bytes()).unwrap();
        assert_eq!(p.dim(), 4);
        let EmbeddingProvider::File { table, .. } = &p else {
            panic!()
        };
        assert_eq!(table.len(), 3);
        assert_eq!(p.embed_token("milk"), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.embed_token("bread"), vec![0.0; 4]);
    }

    #[test]
    fn file_embedding_errors() {
        let err = EmbeddingProvider::read("a 1 2 3 4\nb 1 2 3 4 5\n".as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "dim mismatch line 2");
        assert!(EmbeddingProvider::read("".as_bytes()).is_err());
    }

    #[test]
    fn sequences() {
        let p = EmbeddingProvider::hash(32, 1).unwrap();
        let empty: [&str; 0] = [];
        let s = p.embed_sequence(&empty);
        assert_eq!((s.dim, s.len()), (32, 0));
        let s = p.embed_sequence(&["milk", "milk"]);
        assert_eq!(s.row(0), s.row(1));
        let toks = ["add", "seven", "apples", "one", "gallon", "of", "milk"];
        let s = p.embed_sequence(&toks);
        assert_eq!(s.data.len(), 7 * 32);
        assert!(s.data.iter().all(|v| v.is_finite()));
        assert_eq!(s, p.embed_sequence(&toks));
    }

    #[test]
    fn provider_spec_round_trip() {
        for s in ["none", "hash:32:7", "file:/tmp/emb.txt"] {
            assert_eq!(s.parse::<ProviderSpec>().unwrap().to_string(), s);
        }
        assert!("hash:0:1".parse::<ProviderSpec>().is_err());
        assert!("bert".parse::<ProviderSpec>().is_err());
    }
}
